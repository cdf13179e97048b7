"""Supernet wiring: backbone + candidate delta modules + gates.

One ``Supernet`` owns the full candidate grid with every module attached
and gated. Losses are token-level cross entropy over decoder positions;
the metric is token accuracy. A lighter fixed-structure variant (only
selected modules, hard unit gates) serves evaluation and retraining.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from s3pet import autodiff as ad
from s3pet import pet
from s3pet.autodiff import Tape, Tensor
from s3pet.backbone import Backbone
from s3pet.errors import NumericError
from s3pet.optim import AdamW
from s3pet.pet import AttachmentSet, Candidate
from s3pet.tasks import Batch, BatchStream

GateVector = Union[Tensor, np.ndarray, None]


def _gates_from(z: GateVector, n: int) -> list:
    if z is None:
        return [0.0] * n
    if isinstance(z, Tensor):
        return [ad.index(z, i) for i in range(n)]
    return [float(v) for v in np.asarray(z)]


class Supernet:
    """Backbone with the whole candidate grid attached and gated."""

    def __init__(self, backbone: Backbone, candidates: Sequence[Candidate], seed: int):
        self.backbone = backbone
        self.candidates = list(candidates)
        self.seed = seed
        self.modules = [
            pet.init_params(pet.make_module(c.kind, c.site, backbone.config, c.rank), seed)
            for c in self.candidates
        ]

    def reinit(self, seed: Optional[int] = None) -> None:
        for m in self.modules:
            pet.init_params(m, self.seed if seed is None else seed)

    def delta_params(self) -> list[Tensor]:
        out = []
        for m in self.modules:
            out.extend(m.trainable())
        return out

    def logits(self, batch: Batch, z: GateVector) -> Tensor:
        hooks = AttachmentSet(self.modules, _gates_from(z, len(self.modules)))
        return self.backbone.forward(batch["src"], batch["dec_in"], hooks=hooks)

    def loss(self, batch: Batch, z: GateVector) -> Tensor:
        return ad.cross_entropy(self.logits(batch, z), batch["tgt"])

    def metric(self, data: Batch, z: GateVector) -> float:
        """Token accuracy under hard gates; no tape, no gradients."""
        logits = self.logits(data, z)
        pred = np.argmax(logits.data, axis=-1)
        return float(np.mean(pred == data["tgt"]))


class FixedStructureModel:
    """Backbone plus a fixed set of modules with hard unit gates."""

    def __init__(self, backbone: Backbone, modules: Sequence[pet.PETModule]):
        self.backbone = backbone
        self.modules = list(modules)
        self._hooks = AttachmentSet(self.modules, [1.0] * len(self.modules)) if self.modules else None

    def delta_params(self) -> list[Tensor]:
        out = []
        for m in self.modules:
            out.extend(m.trainable())
        return out

    def logits(self, batch: Batch) -> Tensor:
        return self.backbone.forward(batch["src"], batch["dec_in"], hooks=self._hooks)

    def loss(self, batch: Batch) -> Tensor:
        return ad.cross_entropy(self.logits(batch), batch["tgt"])

    def metric(self, data: Batch) -> float:
        pred = np.argmax(self.logits(data).data, axis=-1)
        return float(np.mean(pred == data["tgt"]))


def train_fixed(model: FixedStructureModel, train_stream: BatchStream, steps: int, lr: float) -> float:
    """Plain training of a fixed structure; returns the final batch loss."""
    params = model.delta_params()
    last = 0.0
    if not params:
        # Nothing trainable: evaluate one batch for the record.
        return float(model.loss(next(train_stream)).item())
    opt = AdamW(params, lr=lr, total_steps=steps)
    for _ in range(steps):
        with Tape() as tape:
            loss = model.loss(next(train_stream))
        last = loss.item()
        if not np.isfinite(last):
            raise NumericError("non-finite training loss")
        tape.backward(loss)
        opt.step()
        tape.release()
    return last
