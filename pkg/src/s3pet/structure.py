"""Structure extraction under the budget, serialization, and retraining.

Extraction picks the feasible candidate subset with the highest total
activation probability: an exact 0/1 knapsack dynamic program on the toy
spaces (few candidates, few distinct module sizes), with a density-greedy
fallback flagged as approximate for larger instances. Extracted
structures serialize to a versioned JSON file so they can be retrained
on other tasks over the same frozen backbone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from s3pet import pet
from s3pet.backbone import Backbone, BackboneConfig, Projection, SublayerId, SublayerKind
from s3pet.errors import ConfigError, StructureFormatError
from s3pet.model import FixedStructureModel, train_fixed
from s3pet.pet import Candidate, PETKind
from s3pet.tasks import BatchStream, DataSplit

log = logging.getLogger(__name__)

STRUCTURE_FILE_VERSION = 1
# Exact selection is used when either bound holds; beyond both, greedy.
_DP_MAX_ITEMS = 64
_DP_MAX_DISTINCT_WEIGHTS = 8


@dataclass(frozen=True)
class StructureEntry:
    site: SublayerId
    pet_kind: PETKind
    rank: int
    param_count: int
    p_at_extraction: Optional[float] = None


@dataclass
class SearchedStructure:
    """Ordered activated sites plus provenance metadata."""

    entries: list
    total_params: int
    budget: int
    search_space: str
    backbone_fingerprint: str
    backbone_layers: dict
    approximate: bool = False
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = [(e.site, e.pet_kind) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ConfigError("structure has duplicate (site, kind) entries")
        if self.total_params > self.budget:
            raise ConfigError(f"structure exceeds budget: {self.total_params} > {self.budget}")

    def candidates(self) -> list[Candidate]:
        return [Candidate(site=e.site, kind=e.pet_kind, rank=e.rank) for e in self.entries]


def knapsack_select(p: np.ndarray, counts: np.ndarray, capacity: int) -> tuple[list, bool]:
    """Indices maximizing total p subject to total count <= capacity.

    Returns (sorted indices, approximate flag). The dynamic program is
    exact; the greedy path orders by value density (ties: higher p, then
    smaller weight, then index) and is flagged approximate.
    """
    p = np.asarray(p, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    if p.shape != counts.shape:
        raise ConfigError(f"probability/count length mismatch: {p.shape} vs {counts.shape}")
    n = len(p)
    if n == 0 or capacity < int(counts.min()):
        log.warning("budget %d below the smallest module; extracting an empty structure", capacity)
        return [], False
    cap = int(min(capacity, int(counts.sum())))

    if n <= _DP_MAX_ITEMS or len(set(counts.tolist())) <= _DP_MAX_DISTINCT_WEIGHTS:
        dp = np.zeros(cap + 1)
        take = np.zeros((n, cap + 1), dtype=bool)
        for i in range(n):
            w = int(counts[i])
            if w > cap:
                continue
            cand = dp[: cap - w + 1] + p[i]
            better = cand > dp[w:]
            take[i, w:][better] = True
            dp[w:][better] = cand[better]
        chosen = []
        w = cap
        for i in range(n - 1, -1, -1):
            if take[i, w]:
                chosen.append(i)
                w -= int(counts[i])
        return sorted(chosen), False

    order = sorted(range(n), key=lambda i: (-p[i] / counts[i], -p[i], counts[i], i))
    chosen, used = [], 0
    for i in order:
        if used + counts[i] <= cap:
            chosen.append(i)
            used += int(counts[i])
    return sorted(chosen), True


def select_structure(
    candidates: Sequence[Candidate],
    p: np.ndarray,
    counts: np.ndarray,
    budget: int,
    search_space: str,
    backbone_fingerprint: str,
    backbone_config: BackboneConfig,
    source: Optional[dict] = None,
) -> SearchedStructure:
    """Budget-feasible subset with the highest total activation probability."""
    indices, approximate = knapsack_select(p, counts, budget)
    entries = [
        StructureEntry(
            site=candidates[i].site,
            pet_kind=candidates[i].kind,
            rank=candidates[i].rank,
            param_count=int(counts[i]),
            p_at_extraction=float(p[i]),
        )
        for i in indices
    ]
    return SearchedStructure(
        entries=entries,
        total_params=int(sum(e.param_count for e in entries)),
        budget=int(budget),
        search_space=search_space,
        backbone_fingerprint=backbone_fingerprint,
        backbone_layers={
            "num_encoder_layers": backbone_config.num_encoder_layers,
            "num_decoder_layers": backbone_config.num_decoder_layers,
        },
        approximate=approximate,
        source=dict(source or {}),
    )


# --- serialization ----------------------------------------------------


def save_structure(s: SearchedStructure, path) -> None:
    doc = {
        "format_version": STRUCTURE_FILE_VERSION,
        "backbone_fingerprint": s.backbone_fingerprint,
        "backbone": s.backbone_layers,
        "budget": s.budget,
        "search_space": s.search_space,
        "approximate": s.approximate,
        "total_params": s.total_params,
        "source": s.source,
        "sites": [
            {
                "stack": e.site.stack,
                "layer": e.site.layer,
                "kind": e.site.kind.value,
                "projection": e.site.projection.value if e.site.projection is not None else None,
                "pet_kind": e.pet_kind.value,
                "rank": e.rank,
                "param_count": e.param_count,
                "p_at_extraction": e.p_at_extraction,
            }
            for e in s.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(doc: dict, key: str, ctx: str):
    if key not in doc:
        raise StructureFormatError(f"{ctx}: missing field {key!r}")
    return doc[key]


def load_structure(path) -> SearchedStructure:
    """Parse and validate a structure file; errors name the offending field."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StructureFormatError(f"structure file is not valid JSON: {exc}") from exc
    version = _require(doc, "format_version", "structure header")
    if version != STRUCTURE_FILE_VERSION:
        raise StructureFormatError(f"structure header: unsupported format_version {version!r}")
    layers = _require(doc, "backbone", "structure header")
    for key in ("num_encoder_layers", "num_decoder_layers"):
        if not isinstance(layers.get(key), int) or layers[key] < 1:
            raise StructureFormatError(f"structure header: backbone.{key} must be a positive integer")
    budget = _require(doc, "budget", "structure header")
    entries = []
    for idx, site_doc in enumerate(_require(doc, "sites", "structure header")):
        ctx = f"sites[{idx}]"
        stack = _require(site_doc, "stack", ctx)
        layer = _require(site_doc, "layer", ctx)
        kind_s = _require(site_doc, "kind", ctx)
        proj_s = _require(site_doc, "projection", ctx)
        pet_s = _require(site_doc, "pet_kind", ctx)
        rank = _require(site_doc, "rank", ctx)
        try:
            kind = SublayerKind(kind_s)
        except ValueError:
            raise StructureFormatError(f"{ctx}: kind {kind_s!r} is not a sublayer kind") from None
        try:
            proj = Projection(proj_s) if proj_s is not None else None
        except ValueError:
            raise StructureFormatError(f"{ctx}: projection {proj_s!r} is not a projection") from None
        try:
            pet_kind = PETKind(pet_s)
        except ValueError:
            raise StructureFormatError(f"{ctx}: pet_kind {pet_s!r} is not a delta kind") from None
        if not isinstance(rank, int) or rank < 1:
            raise StructureFormatError(f"{ctx}: rank must be an integer >= 1, got {rank!r}")
        n_layers = layers["num_encoder_layers"] if stack == "encoder" else layers["num_decoder_layers"]
        max_layer = n_layers if proj == Projection.LN_FINAL else n_layers - 1
        if not isinstance(layer, int) or not 0 <= layer <= max_layer:
            raise StructureFormatError(f"{ctx}: layer {layer!r} out of range [0, {max_layer}] for {stack}")
        try:
            site = SublayerId(stack, layer, kind, proj)
        except ConfigError as exc:
            raise StructureFormatError(f"{ctx}: {exc}") from exc
        if not pet.site_is_legal(pet_kind, site):
            raise StructureFormatError(f"{ctx}: pet_kind {pet_s!r} cannot attach at {site.label()}")
        p_at = site_doc.get("p_at_extraction")
        entries.append(
            StructureEntry(
                site=site,
                pet_kind=pet_kind,
                rank=rank,
                param_count=int(_require(site_doc, "param_count", ctx)),
                p_at_extraction=None if p_at is None else float(p_at),
            )
        )
    try:
        return SearchedStructure(
            entries=entries,
            total_params=int(_require(doc, "total_params", "structure header")),
            budget=int(budget),
            search_space=_require(doc, "search_space", "structure header"),
            backbone_fingerprint=_require(doc, "backbone_fingerprint", "structure header"),
            backbone_layers=layers,
            approximate=bool(doc.get("approximate", False)),
            source=doc.get("source", {}),
        )
    except ConfigError as exc:
        raise StructureFormatError(f"structure file invalid: {exc}") from exc


def check_fingerprint(structure: SearchedStructure, backbone: Backbone) -> bool:
    """Warn (not error) on fingerprint mismatch, to allow cross-task reuse."""
    actual = backbone.fingerprint()
    if structure.backbone_fingerprint != actual:
        log.warning(
            "structure was searched on backbone %s but is being applied to %s",
            structure.backbone_fingerprint, actual,
        )
        return False
    return True


# --- retraining -------------------------------------------------------


def build_modules(structure: SearchedStructure, backbone: Backbone, seed: int) -> list:
    """Instantiate the structure's modules with a fresh identity init."""
    for e in structure.entries:
        if not backbone.has_site(e.site):
            raise ConfigError(f"structure/backbone mismatch: site {e.site.label()} not present")
    return [
        pet.init_params(pet.make_module(e.pet_kind, e.site, backbone.config, e.rank), seed)
        for e in structure.entries
    ]


def retrain(
    structure: SearchedStructure,
    backbone: Backbone,
    splits: DataSplit,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> dict:
    """Re-initialize the selected modules, train on the full pool, report metrics.

    Gates are hard ones; no sampling and no structural parameters are
    involved.
    """
    modules = build_modules(structure, backbone, seed)
    model = FixedStructureModel(backbone, modules)
    train_stream = BatchStream(splits.train_pool(), batch_size, seed, "retrain")
    final_loss = train_fixed(model, train_stream, steps, lr)
    return {
        "val_metric": model.metric(splits.val),
        "test_metric": model.metric(splits.test),
        "final_train_loss": final_loss,
        "trainable_params": int(sum(m.param_count for m in modules)),
        "steps": steps,
        "seed": seed,
    }
