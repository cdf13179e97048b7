"""Probabilistic gating and explicit sparsity control.

Each candidate module i gets a structural parameter alpha_i. A shifted
sigmoid maps it to an activation probability, a value-preserving global
renormalization reroutes gradients so sites compete, and a relaxed
Bernoulli (Binary Concrete) sample gates the module's delta during
search. The shift zeta is re-solved every step by bisection so the
expected trainable-parameter count stays within the budget.

An alternative mode skips the shift/renormalization entirely and instead
penalizes the expected parameter count in the outer loss (the classic
sparsity-regularization baseline).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from s3pet import autodiff as ad
from s3pet import kernels as K
from s3pet.autodiff import Tensor
from s3pet.errors import ConfigError, DimensionError, NumericError

GLOBAL_SIGMOID_MODE = "shifted_global_sigmoid"
L0_MODE = "l0"
SPARSITY_MODES = (GLOBAL_SIGMOID_MODE, L0_MODE)

# Bisection bracket half-width in units of tau; the sigmoid is fully
# saturated this far out.
_BRACKET_TAUS = 40.0
_BISECT_ITERS = 200
_BISECT_WIDTH = 1e-12

PMYRIAD = 10_000.0  # ratio unit: hundredths of a percent


@dataclass(frozen=True)
class Budget:
    """Trainable-parameter cap: absolute count or ratio of backbone size.

    Ratios are in hundredths of a percent (parts per ten thousand),
    written with a 'bp' suffix (or the per-ten-thousand sign) on the CLI.
    """

    max_params: Optional[int] = None
    ratio_pmyriad: Optional[float] = None

    def __post_init__(self):
        if (self.max_params is None) == (self.ratio_pmyriad is None):
            raise ConfigError("budget needs exactly one of max_params or ratio_pmyriad")
        if self.max_params is not None and self.max_params < 0:
            raise ConfigError("budget max_params must be >= 0")
        if self.ratio_pmyriad is not None and self.ratio_pmyriad <= 0:
            raise ConfigError("budget ratio must be > 0")

    @classmethod
    def parse(cls, text: Union[str, int, float]) -> "Budget":
        if isinstance(text, int):
            return cls(max_params=text)
        if isinstance(text, float):
            raise ConfigError("bare float budget is ambiguous; pass an int count or a 'bp' ratio string")
        s = str(text).strip()
        for suffix in ("‱", "bp"):
            if s.endswith(suffix):
                return cls(ratio_pmyriad=float(s[: -len(suffix)]))
        if not s.lstrip("+-").isdigit():
            raise ConfigError(f"budget {text!r} not understood: use an integer count or e.g. '35bp'")
        return cls(max_params=int(s))

    def resolve(self, backbone_params: int) -> int:
        if self.max_params is not None:
            return int(self.max_params)
        return int(np.floor(self.ratio_pmyriad / PMYRIAD * backbone_params))

    def describe(self) -> str:
        if self.max_params is not None:
            return str(self.max_params)
        return f"{self.ratio_pmyriad}bp"

    def to_json(self):
        return self.max_params if self.max_params is not None else f"{self.ratio_pmyriad}bp"


def shifted_sigmoid(alpha, zeta: float, tau: float):
    """Elementwise sigmoid((alpha - zeta) / tau); works on arrays or tensors."""
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if isinstance(alpha, Tensor):
        return ad.sigmoid((alpha - zeta) / tau)
    return K.sigmoid_forward((np.asarray(alpha, dtype=np.float64) - zeta) / tau)


def global_normalize(p_tilde: Tensor) -> Tensor:
    """Value-preserving renormalization that reroutes gradients globally.

    Multiplies by (sum of detached values) / (sum of live values): the
    forward value is exactly p_tilde, but each site's gradient picks up a
    mean-correction term that makes sites compete — equal upstream
    gradients on every probability cancel to zero.
    """
    total = ad.reduce_sum(p_tilde)
    if float(total.data) <= 0.0:
        raise NumericError("global_normalize needs strictly positive probabilities")
    return ad.mul(p_tilde, ad.div(ad.reduce_sum(ad.detach(p_tilde)), total))


def sample_binary_concrete(p, u, beta: float):
    """Soft Bernoulli relaxation: sigmoid((1/beta) log[u p / ((1-u)(1-p))]).

    Differentiable in p when p is a tensor (u and beta are never
    differentiated). Probabilities are clamped away from {0, 1} before
    the log-ratio; samples are clamped strictly inside (0, 1).
    """
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise NumericError("uniform draw hit {0, 1}; resample the noise")
    if isinstance(p, Tensor):
        pc = ad.clamp(p, K.PROB_EPS, 1.0 - K.PROB_EPS)
        noise = ad.constant(np.log(u_arr) - np.log1p(-u_arr))
        logits = ad.add(noise, ad.sub(ad.log(pc), ad.log(ad.sub(ad.constant(np.ones_like(pc.data)), pc))))
        z = ad.sigmoid(logits / beta)
        return ad.clamp(z, K.SAMPLE_EPS, 1.0 - K.SAMPLE_EPS)
    out = K.binary_concrete_forward(np.asarray(p, dtype=np.float64), u_arr, float(beta))
    return float(out) if np.ndim(out) == 0 else out


def draw_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Open-interval uniform noise; exact zeros are redrawn."""
    u = rng.random(n)
    while np.any(u == 0.0):  # measure-zero guard
        redo = u == 0.0
        u[redo] = rng.random(int(redo.sum()))
    return u


def expected_param_count(p: np.ndarray, counts: np.ndarray) -> float:
    """Expected number of trainable parameters: sum_i p_i * |delta_i|."""
    p = np.asarray(p, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if p.shape != counts.shape:
        raise DimensionError(f"probability/count length mismatch: {p.shape} vs {counts.shape}")
    return float(np.dot(p, counts))


def expected_param_count_tensor(p: Tensor, counts: np.ndarray) -> Tensor:
    if p.shape != np.shape(counts):
        raise DimensionError(f"probability/count length mismatch: {p.shape} vs {np.shape(counts)}")
    return ad.reduce_sum(ad.mul(p, ad.constant(np.asarray(counts, dtype=np.float64))))


def solve_zeta(alpha: np.ndarray, tau: float, counts: np.ndarray, budget: int) -> float:
    """Smallest shift keeping the expected parameter count within budget.

    The expected count is continuous and strictly decreasing in the
    shift, so bisection converges; the returned value is always on the
    feasible side. When even the loosest shift stays under budget, the
    lower bracket bound is returned and the slack is accepted.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.isfinite(alpha).all():
        raise NumericError("non-finite structural parameters in shift solve")
    if budget < 0:
        raise ConfigError(f"budget must be >= 0, got {budget}")
    counts = np.asarray(counts, dtype=np.float64)

    def expected(zeta: float) -> float:
        return float(np.dot(K.sigmoid_forward((alpha - zeta) / tau), counts))

    lo = float(alpha.min()) - _BRACKET_TAUS * tau
    hi = float(alpha.max()) + _BRACKET_TAUS * tau
    if expected(lo) <= budget:
        return lo
    for _ in range(_BISECT_ITERS):
        if hi - lo < _BISECT_WIDTH:
            break
        mid = 0.5 * (lo + hi)
        if expected(mid) <= budget:
            hi = mid
        else:
            lo = mid
    return hi


def l0_penalty(p: Tensor, counts: np.ndarray, lam: float) -> Tensor:
    """Sparsity penalty lam * sum_i p_i |delta_i| for the outer loss."""
    if lam < 0:
        raise ConfigError(f"penalty weight must be >= 0, got {lam}")
    return ad.mul(expected_param_count_tensor(p, counts), ad.constant(float(lam)))


class GateState:
    """Per-step gating state for one search run.

    Owns the structural parameter vector and the most recent shift,
    probabilities, noise, and soft samples. ``build`` constructs the
    differentiable chain alpha -> probabilities -> samples for the
    current (zeta, u); the chain is rebuilt per loss term so the four
    loss evaluations of one step share the identical sample.
    """

    def __init__(self, alpha: Tensor, tau: float, beta: float, mode: str = GLOBAL_SIGMOID_MODE):
        if mode not in SPARSITY_MODES:
            raise ConfigError(f"unknown sparsity mode {mode!r}; expected one of {SPARSITY_MODES}")
        self.alpha = alpha
        self.tau = float(tau)
        self.beta = float(beta)
        self.mode = mode
        self.zeta = 0.0
        self.u: Optional[np.ndarray] = None
        self.p_tilde: Optional[np.ndarray] = None
        self.p: Optional[np.ndarray] = None
        self.z_hat: Optional[np.ndarray] = None

    @property
    def n_sites(self) -> int:
        return self.alpha.size

    def refresh(self, counts: np.ndarray, budget: Optional[int]) -> None:
        """Re-solve the shift (budget mode) and cache current probabilities."""
        if self.mode == GLOBAL_SIGMOID_MODE:
            if budget is None:
                raise ConfigError("budget-constrained mode needs a resolved budget")
            self.zeta = solve_zeta(self.alpha.data, self.tau, counts, budget)
        else:
            self.zeta = 0.0
        self.p_tilde = shifted_sigmoid(self.alpha.data, self.zeta, self.tau)
        self.p = self.p_tilde  # renormalization is value-preserving

    def sample(self, rng: np.random.Generator) -> None:
        self.u = draw_uniform(rng, self.n_sites)
        # Evaluate the graph construction forward-only so the cached
        # sample is bitwise identical to what every loss term will see.
        z, _ = self.build()
        self.z_hat = z.data

    def build(self) -> tuple[Tensor, Tensor]:
        """Differentiable (z, p) for the cached shift and noise."""
        if self.u is None:
            raise ConfigError("sample() must run before building the gate chain")
        p_tilde = shifted_sigmoid(self.alpha, self.zeta, self.tau)
        p = global_normalize(p_tilde) if self.mode == GLOBAL_SIGMOID_MODE else p_tilde
        z = sample_binary_concrete(p, self.u, self.beta)
        return z, p


def gate_probability_rows(candidates, counts, p: np.ndarray, step: int) -> list[dict]:
    """CSV-ready site descriptor rows for one probability snapshot."""
    rows = []
    for i, cand in enumerate(candidates):
        site = cand.site
        rows.append({
            "step": step,
            "site_index": i,
            "stack": site.stack,
            "layer": site.layer,
            "kind": site.kind.value,
            "projection": site.projection.value if site.projection is not None else "",
            "pet_kind": cand.kind.value,
            "param_count": int(counts[i]),
            "p": float(p[i]),
        })
    return rows
