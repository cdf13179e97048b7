"""Kernel backend selection.

The hot elementwise/reduction kernels exist twice: a compiled extension
(``s3pet.kernels._native``, built from Cython) and a pure numpy fallback.
The backend is picked once at import time; set ``S3PET_KERNELS`` to
``native`` or ``numpy`` to force a choice (``native`` raises if the
extension is missing). ``use_backend`` rebinds at runtime, which the
benchmark suite uses to compare both on identical inputs.
"""

import os

from s3pet.errors import ConfigError
from s3pet.kernels import numpy_backend

_EXPORTED = [
    "sigmoid_forward",
    "sigmoid_backward",
    "relu_forward",
    "relu_backward",
    "softmax_forward",
    "softmax_backward",
    "cross_entropy_forward",
    "cross_entropy_backward",
    "binary_concrete_forward",
    "adamw_update",
]

PROB_EPS = numpy_backend.PROB_EPS
SAMPLE_EPS = numpy_backend.SAMPLE_EPS

_backend = None


def _load_native():
    from s3pet.kernels import _native  # noqa: PLC0415 (deferred: optional ext)

    return _native


def available_backends() -> list:
    names = ["numpy"]
    try:
        _load_native()
        names.insert(0, "native")
    except ImportError:
        pass
    return names


def use_backend(name: str) -> None:
    """Rebind all kernel functions to the named backend."""
    global _backend
    if name == "numpy":
        mod = numpy_backend
    elif name == "native":
        try:
            mod = _load_native()
        except ImportError as exc:
            raise ConfigError("native kernel backend requested but the extension is not built") from exc
    else:
        raise ConfigError(f"unknown kernel backend {name!r}; expected 'native' or 'numpy'")
    for fn in _EXPORTED:
        globals()[fn] = getattr(mod, fn)
    _backend = mod


def backend_name() -> str:
    return _backend.NAME


def _initial_choice() -> str:
    env = os.environ.get("S3PET_KERNELS", "").strip().lower()
    if env in ("native", "numpy"):
        return env
    if env not in ("", "auto"):
        raise ConfigError(f"S3PET_KERNELS={env!r} not understood; use 'native', 'numpy', or 'auto'")
    return "native" if "native" in available_backends() else "numpy"


use_backend(_initial_choice())
