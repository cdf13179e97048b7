"""Bi-level structure search with a finite-difference structural gradient.

Each step: (1) re-solve the budget shift and draw one shared soft-gate
sample; (2) evaluate the loss terms; (3) update the structural parameters
from the approximated outer gradient; (4) update the delta parameters.
The outer gradient approximates the response of the validation-half loss
to the structural parameters through a one-step virtual update of the
deltas, with the second-order term estimated by central differences:

    g_alpha = grad_a L_a(d', a) - xi * (grad_a L_d(d+, a) - grad_a L_d(d-, a)) / (2 eps)

where d' = d - xi * grad_d L_d(d, a) (a plain gradient step) and
d +/- = d +/- eps * grad_{d'} L_a(d', a). All four terms reuse the same
gate sample. The probe width follows the usual convention
eps = 0.01 / ||grad_{d'} L_a||, falling back to a fixed value when the
norm vanishes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from s3pet import structure as structure_io
from s3pet.autodiff import Tape, Tensor
from s3pet.backbone import Backbone
from s3pet.errors import ConfigError, NumericError
from s3pet.gating import (
    GLOBAL_SIGMOID_MODE,
    SPARSITY_MODES,
    Budget,
    GateState,
    expected_param_count,
    gate_probability_rows,
    l0_penalty,
)
from s3pet.model import Supernet
from s3pet.optim import AdamW
from s3pet.pet import SEARCH_SPACES, candidate_counts, enumerate_space
from s3pet.rng import stream
from s3pet.tasks import BatchStream, DataSplit

# Probe width numerator for the central-difference term.
_EPS_COEFF = 0.01


@dataclass(frozen=True)
class SearchConfig:
    budget: Budget = field(default_factory=lambda: Budget(max_params=512))
    inner_lr: float = 3e-4
    alpha_lr: float = 0.1
    epsilon: float = 1e-3  # fixed probe width fallback
    steps: int = 200
    eval_interval: int = 50
    seed: int = 0
    search_space: str = "mix"
    sparsity_mode: str = GLOBAL_SIGMOID_MODE
    first_order_only: bool = False
    tau: float = 1.0
    beta: float = 1.0
    batch_size: int = 8
    l0_lambda: float = 1e-4
    retrain_steps: int = 300
    alpha_init_std: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("search: steps must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("search: eval_interval must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("search: epsilon must be > 0")
        if self.inner_lr <= 0 and not self.first_order_only:
            raise ConfigError("search: inner_lr must be > 0 unless first_order_only")
        if self.alpha_lr <= 0:
            raise ConfigError("search: alpha_lr must be > 0")
        if self.tau <= 0 or self.beta <= 0:
            raise ConfigError("search: tau and beta must be > 0")
        if self.search_space not in SEARCH_SPACES:
            raise ConfigError(f"search: unknown search_space {self.search_space!r}")
        if self.sparsity_mode not in SPARSITY_MODES:
            raise ConfigError(f"search: unknown sparsity_mode {self.sparsity_mode!r}")
        if self.batch_size < 1:
            raise ConfigError("search: batch_size must be >= 1")
        if self.l0_lambda < 0:
            raise ConfigError("search: l0_lambda must be >= 0")
        if self.retrain_steps < 0:
            raise ConfigError("search: retrain_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget"] = self.budget.to_json()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"search config: unknown fields {sorted(unknown)}")
        d = dict(d)
        if "budget" in d and not isinstance(d["budget"], Budget):
            d["budget"] = Budget.parse(d["budget"])
        return cls(**d)


@dataclass
class HistoryRow:
    step: int
    loss_delta: float
    loss_alpha: float
    expected_params: float
    zeta: float
    val_metric: Optional[float] = None


@dataclass
class StructuralGradient:
    alpha_grad: np.ndarray
    delta_grads: list
    loss_delta: float
    loss_alpha: float
    epsilon_used: float


@dataclass
class SearchResult:
    structure: "structure_io.SearchedStructure"
    history: list
    probability_rows: list
    best_step: Optional[int]
    best_val_metric: Optional[float]


def _eval_grads(loss_fn: Callable[[], Tensor], wrt: list) -> tuple[float, list]:
    """Evaluate a loss closure under a fresh tape; return value and grads."""
    with Tape() as tape:
        loss = loss_fn()
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value!r} during search")
    tape.backward(loss)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    tape.release()
    return value, grads


def inner_step(supernet: Supernet, gate: GateState, batch, optimizer: AdamW) -> float:
    """One optimizer step on the delta parameters; gates stay frozen."""
    def build():
        z, _ = gate.build()
        return supernet.loss(batch, z)

    value, grads = _eval_grads(build, optimizer.params)
    optimizer.step(grads)
    return value


def structural_gradient(
    alpha: Tensor,
    delta_params: list,
    loss_delta_fn: Callable[[], Tensor],
    loss_alpha_fn: Callable[[], Tensor],
    xi: float,
    eps_fallback: float,
    first_order: bool = False,
) -> StructuralGradient:
    """Approximate outer gradient w.r.t. the structural parameters.

    The loss closures must rebuild their graphs from the *current* delta
    values on every call and share one gate sample across calls. The
    delta parameters are restored bitwise on exit; the returned
    ``delta_grads`` are the inner-loss gradients at the entry point,
    ready for the real delta update.
    """
    loss_d, g_delta = _eval_grads(loss_delta_fn, delta_params)

    if first_order:
        loss_a, (g_alpha,) = _eval_grads(loss_alpha_fn, [alpha])
        return StructuralGradient(g_alpha, g_delta, loss_d, loss_a, 0.0)

    saved = [p.data.copy() for p in delta_params]
    try:
        # Virtual one-step update d' = d - xi * grad (plain gradient step).
        if xi != 0.0:
            for p, g in zip(delta_params, g_delta):
                p.data = p.data - xi * g
        loss_a, grads = _eval_grads(loss_alpha_fn, [alpha, *delta_params])
        g_alpha_main, g_delta_prime = grads[0], grads[1:]

        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in g_delta_prime)))
        eps = _EPS_COEFF / norm if norm > 0 else eps_fallback

        for p, s, v in zip(delta_params, saved, g_delta_prime):
            p.data = s + eps * v
        _, (g_alpha_plus,) = _eval_grads(loss_delta_fn, [alpha])
        for p, s, v in zip(delta_params, saved, g_delta_prime):
            p.data = s - eps * v
        _, (g_alpha_minus,) = _eval_grads(loss_delta_fn, [alpha])
    finally:
        for p, s in zip(delta_params, saved):
            p.data = s

    g_alpha = g_alpha_main - xi * (g_alpha_plus - g_alpha_minus) / (2.0 * eps)
    return StructuralGradient(g_alpha, g_delta, loss_d, loss_a, eps)


def search(
    config: SearchConfig,
    backbone: Backbone,
    splits: DataSplit,
    source: Optional[dict] = None,
) -> SearchResult:
    """Run the full search loop and extract the best-scoring structure."""
    candidates = enumerate_space(backbone, config.search_space)
    counts = candidate_counts(candidates, backbone.config)
    budget = config.budget.resolve(backbone.param_count())
    if budget < int(counts.min()):
        raise ConfigError(
            f"budget {budget} is below the smallest candidate module ({int(counts.min())} params); "
            "no structure exists"
        )

    supernet = Supernet(backbone, candidates, config.seed)
    alpha = Tensor(
        stream(config.seed, "alpha-init").normal(0.0, config.alpha_init_std, size=len(candidates)),
        requires_grad=True,
    )
    gate = GateState(alpha, tau=config.tau, beta=config.beta, mode=config.sparsity_mode)
    noise = stream(config.seed, "gate-noise")
    stream_delta = BatchStream(splits.delta, config.batch_size, config.seed, "delta")
    stream_alpha = BatchStream(splits.alpha, config.batch_size, config.seed, "alpha")

    opt_delta = AdamW(supernet.delta_params(), lr=config.inner_lr, total_steps=config.steps)
    opt_alpha = AdamW([alpha], lr=config.alpha_lr, total_steps=config.steps)

    history: list[HistoryRow] = []
    prob_rows: list[dict] = []
    best: Optional[tuple] = None  # (metric, step, p snapshot)

    for step in range(config.steps):
        gate.refresh(counts, budget)
        gate.sample(noise)
        expected = expected_param_count(gate.p, counts)
        batch_d = next(stream_delta)
        batch_a = next(stream_alpha)

        def loss_delta_fn():
            z, _ = gate.build()
            return supernet.loss(batch_d, z)

        def loss_alpha_fn():
            z, p = gate.build()
            loss = supernet.loss(batch_a, z)
            if config.sparsity_mode != GLOBAL_SIGMOID_MODE:
                loss = loss + l0_penalty(p, counts, config.l0_lambda)
            return loss

        sg = structural_gradient(
            alpha,
            opt_delta.params,
            loss_delta_fn,
            loss_alpha_fn,
            xi=config.inner_lr,
            eps_fallback=config.epsilon,
            first_order=config.first_order_only,
        )
        opt_alpha.step([sg.alpha_grad])
        opt_delta.step(sg.delta_grads)

        val_metric = None
        if (step + 1) % config.eval_interval == 0:
            p_snapshot = gate.p.copy()
            indices, _ = structure_io.knapsack_select(p_snapshot, counts, budget)
            z_hard = np.zeros(len(candidates))
            z_hard[indices] = 1.0
            val_metric = supernet.metric(splits.val, z_hard)
            prob_rows.extend(gate_probability_rows(candidates, counts, p_snapshot, step))
            if best is None or val_metric > best[0]:
                best = (val_metric, step, p_snapshot)

        history.append(HistoryRow(step, sg.loss_delta, sg.loss_alpha, expected, gate.zeta, val_metric))

    if best is None:
        # Never evaluated (steps == 0 or eval_interval > steps): extract
        # from the most recent probabilities.
        gate.refresh(counts, budget)
        best = (None, config.steps - 1 if config.steps else -1, gate.p.copy())
        prob_rows.extend(gate_probability_rows(candidates, counts, gate.p, best[1]))

    metric_at_best, best_step, p_best = best
    meta = dict(source or {})
    meta.update({
        "seed": config.seed,
        "budget": config.budget.to_json(),
        "budget_resolved": budget,
        "search_space": config.search_space,
        "sparsity_mode": config.sparsity_mode,
        "extracted_at_step": best_step,
    })
    structure = structure_io.select_structure(
        candidates,
        p_best,
        counts,
        budget,
        search_space=config.search_space,
        backbone_fingerprint=backbone.fingerprint(),
        backbone_config=backbone.config,
        source=meta,
    )
    return SearchResult(structure, history, prob_rows, best_step, metric_at_best)
