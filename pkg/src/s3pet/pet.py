"""The delta-module zoo and the candidate grid it induces on a backbone.

Each method computes an additive modification of one hidden-state
transformation: the backbone's output at a site becomes
``m(h_in) + z * delta``. All five kinds initialize to an exact identity
(delta == 0), so a freshly built supernet reproduces the frozen backbone
bit for bit regardless of gate values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from s3pet import autodiff as ad
from s3pet.autodiff import Tensor
from s3pet.backbone import Backbone, BackboneConfig, Projection, SublayerId, SublayerKind
from s3pet.errors import ConfigError, DimensionError
from s3pet.rng import stream

MIX_SPACE = "mix"
LORA_SPACE = "lora"
SEARCH_SPACES = (MIX_SPACE, LORA_SPACE)


class PETKind(str, Enum):
    LORA = "lora"
    ADAPTER = "adapter"
    PARALLEL_ADAPTER = "parallel_adapter"
    BITFIT = "bitfit"
    LNFIT = "lnfit"


# Fixed presentation/enumeration order of kinds at a site.
KIND_ORDER = (PETKind.LORA, PETKind.ADAPTER, PETKind.PARALLEL_ADAPTER, PETKind.BITFIT, PETKind.LNFIT)


def site_is_legal(kind: PETKind, site: SublayerId) -> bool:
    """Legal attachment grid per kind.

    Low-rank reparameterization applies to linear projections; bottleneck
    adapters to whole module outputs; bias deltas to linears and norms;
    norm-scale deltas to norms only.
    """
    if kind == PETKind.LORA:
        return site.is_linear
    if kind in (PETKind.ADAPTER, PETKind.PARALLEL_ADAPTER):
        return site.is_module_output
    if kind == PETKind.BITFIT:
        return site.is_linear or site.is_layer_norm
    if kind == PETKind.LNFIT:
        return site.is_layer_norm
    raise ConfigError(f"unknown delta kind {kind!r}")


def param_count_for(kind: PETKind, site: SublayerId, config: BackboneConfig, rank: int = 1) -> int:
    """Trainable parameter count of one module, without instantiating it."""
    d_in, d_out = _site_dims(site, config)
    if kind == PETKind.LORA:
        return rank * (d_in + d_out)
    if kind == PETKind.ADAPTER:
        return 2 * rank * d_out
    if kind == PETKind.PARALLEL_ADAPTER:
        return rank * (d_in + d_out)
    if kind == PETKind.BITFIT:
        return d_out
    if kind == PETKind.LNFIT:
        return config.hidden_dim
    raise ConfigError(f"unknown delta kind {kind!r}")


def _site_dims(site: SublayerId, config: BackboneConfig) -> tuple[int, int]:
    d, dm = config.hidden_dim, config.ffn_dim
    if site.projection == Projection.W1:
        return d, dm
    if site.projection == Projection.W2:
        return dm, d
    return d, d


@dataclass
class PETModule:
    """One concrete delta computer bound to a site.

    ``params`` holds the only tensors in the whole model with
    ``requires_grad`` set.
    """

    kind: PETKind
    site: SublayerId
    rank: int = 1
    params: dict = field(default_factory=dict)
    in_dim: int = 0
    out_dim: int = 0

    @property
    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def delta(self, h_in: Tensor, h_out: Tensor) -> Tensor:
        if self.kind == PETKind.LORA:
            return lora_delta(h_in, self)
        if self.kind == PETKind.ADAPTER:
            return adapter_delta(h_out, self)
        if self.kind == PETKind.PARALLEL_ADAPTER:
            return parallel_adapter_delta(h_in, self)
        if self.kind == PETKind.BITFIT:
            return bitfit_delta(self, like=h_out)
        return lnfit_delta(h_in, self)

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def make_module(kind: PETKind, site: SublayerId, config: BackboneConfig, rank: int = 1) -> PETModule:
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    if not site_is_legal(kind, site):
        raise ConfigError(f"{kind.value} cannot attach at site {site.label()}")
    d_in, d_out = _site_dims(site, config)
    m = PETModule(kind=kind, site=site, rank=rank, in_dim=d_in, out_dim=d_out)
    if kind == PETKind.LORA:
        m.params = {"down": Tensor(np.zeros((d_in, rank)), requires_grad=True),
                    "up": Tensor(np.zeros((rank, d_out)), requires_grad=True)}
    elif kind == PETKind.ADAPTER:
        m.params = {"down": Tensor(np.zeros((d_out, rank)), requires_grad=True),
                    "up": Tensor(np.zeros((rank, d_out)), requires_grad=True)}
    elif kind == PETKind.PARALLEL_ADAPTER:
        m.params = {"down": Tensor(np.zeros((d_in, rank)), requires_grad=True),
                    "up": Tensor(np.zeros((rank, d_out)), requires_grad=True)}
    elif kind == PETKind.BITFIT:
        m.params = {"bias": Tensor(np.zeros(d_out), requires_grad=True)}
    else:
        m.params = {"scale": Tensor(np.zeros(config.hidden_dim), requires_grad=True)}
    return m


def init_params(module: PETModule, seed: int) -> PETModule:
    """Reset parameters to the identity-start init, reproducibly.

    The down path gets a small Gaussian (variance 1/fan-in style: 1/rank
    for the low-rank factor, 1/width for adapter bottlenecks); every up
    path, bias, and scale starts at zero so delta == 0 exactly.
    """
    rng = stream(seed, f"pet:{module.site.label()}:{module.kind.value}")
    if module.kind == PETKind.LORA:
        module.params["down"].data = rng.standard_normal((module.in_dim, module.rank)) / np.sqrt(module.rank)
        module.params["up"].data = np.zeros((module.rank, module.out_dim))
    elif module.kind == PETKind.ADAPTER:
        module.params["down"].data = rng.standard_normal((module.out_dim, module.rank)) / np.sqrt(module.out_dim)
        module.params["up"].data = np.zeros((module.rank, module.out_dim))
    elif module.kind == PETKind.PARALLEL_ADAPTER:
        module.params["down"].data = rng.standard_normal((module.in_dim, module.rank)) / np.sqrt(module.in_dim)
        module.params["up"].data = np.zeros((module.rank, module.out_dim))
    elif module.kind == PETKind.BITFIT:
        module.params["bias"].data = np.zeros(module.out_dim)
    else:
        module.params["scale"].data = np.zeros_like(module.params["scale"].data)
    for t in module.params.values():
        t.grad = None
    return module


# --- delta formulas ---------------------------------------------------


def lora_delta(h_in: Tensor, m: PETModule) -> Tensor:
    """Low-rank additive reparameterization of a linear projection."""
    return ad.matmul(ad.matmul(h_in, m.params["down"]), m.params["up"])


def adapter_delta(m_out: Tensor, m: PETModule) -> Tensor:
    """Bottleneck transform of the module output: relu(out @ down) @ up."""
    return ad.matmul(ad.relu(ad.matmul(m_out, m.params["down"])), m.params["up"])


def parallel_adapter_delta(h_in: Tensor, m: PETModule) -> Tensor:
    """Bottleneck transform of the module input: relu(in @ down) @ up."""
    return ad.matmul(ad.relu(ad.matmul(h_in, m.params["down"])), m.params["up"])


def bitfit_delta(m: PETModule, seq_len: Optional[int] = None, like: Optional[Tensor] = None) -> Tensor:
    """Trainable bias broadcast over the sequence (and batch) dimension."""
    bias = m.params["bias"]
    if like is not None:
        return ad.mul(ad.constant(np.ones((*like.shape[:-1], 1))), bias)
    if seq_len is None:
        raise DimensionError("bitfit_delta needs seq_len or a reference tensor")
    return ad.mul(ad.constant(np.ones((seq_len, 1))), bias)


def lnfit_delta(h_in: Tensor, m: PETModule) -> Tensor:
    """Extra trainable norm scale: (h / var(h)) * scale_delta.

    Uses the same variance normalization (including the clamp floor) as
    the frozen norm it augments.
    """
    return ad.mul(ad.normalized_by_variance(h_in), m.params["scale"])


def apply_gated(m_out: Tensor, delta: Tensor, z_hat) -> Tensor:
    """Gate a delta onto a module output: m_out + z * delta.

    ``z_hat`` is a soft 0-d tensor during search or a plain 0/1 float
    during evaluation.
    """
    if isinstance(z_hat, Tensor):
        return ad.add(m_out, ad.mul(delta, z_hat))
    return ad.add(m_out, ad.mul(delta, ad.constant(float(z_hat))))


# --- candidate grid ---------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    """One (site, kind, rank) slot in the search space."""

    site: SublayerId
    kind: PETKind
    rank: int = 1

    def label(self) -> str:
        return f"{self.site.label()}:{self.kind.value}"


def space_kinds(space: str) -> tuple:
    if space == MIX_SPACE:
        return (PETKind.LORA, PETKind.ADAPTER, PETKind.BITFIT, PETKind.LNFIT)
    if space == LORA_SPACE:
        return (PETKind.LORA,)
    raise ConfigError(f"unknown search space {space!r}; expected one of {SEARCH_SPACES}")


def enumerate_space(backbone: Backbone, space: str, rank: int = 1) -> list[Candidate]:
    """All legal (site, kind) pairs of the space, in canonical order."""
    kinds = space_kinds(space)
    out = []
    for site in backbone.sites():
        for kind in KIND_ORDER:
            if kind in kinds and site_is_legal(kind, site):
                out.append(Candidate(site=site, kind=kind, rank=rank))
    return out


def candidate_counts(candidates, config: BackboneConfig) -> np.ndarray:
    return np.array([param_count_for(c.kind, c.site, config, c.rank) for c in candidates], dtype=np.int64)


class AttachmentSet:
    """Hook registry mapping sites to gated delta modules.

    ``gates`` aligns with ``modules``: each entry is a 0-d tensor (soft
    search sample) or a float (hard evaluation gate).
    """

    def __init__(self, modules: list[PETModule], gates: list):
        if len(modules) != len(gates):
            raise DimensionError(f"{len(modules)} modules with {len(gates)} gates")
        self._by_site: dict[SublayerId, list[tuple[PETModule, object]]] = {}
        for mod, gate in zip(modules, gates):
            self._by_site.setdefault(mod.site, []).append((mod, gate))

    def apply(self, site: SublayerId, h_in: Tensor, h_out: Tensor) -> Tensor:
        attached = self._by_site.get(site, ())
        if not attached:
            return h_out
        # Every delta reads the frozen transformation, not other deltas:
        # the gated modifications at one site sum independently.
        base = h_out
        for mod, gate in attached:
            h_out = apply_gated(h_out, mod.delta(h_in, base), gate)
        return h_out
