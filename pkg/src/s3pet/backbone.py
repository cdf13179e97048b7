"""A small frozen encoder-decoder transformer with hookable sites.

Every hidden-state transformation — each linear projection, each
attention/feed-forward module output, and each layer norm — is addressed
by a ``SublayerId`` and passes through an optional hook registry, so
delta modules can attach anywhere without the backbone knowing about
them.

Layer norm here divides by the row variance (not the standard deviation)
and subtracts no mean; see ``autodiff.layernorm_scale``. Ordering is
post-norm: ``h = LN(h + Sublayer(h))`` around self-attention,
cross-attention, and feed-forward, plus one final LN per stack. A golden
regression test pins this layout.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np

from s3pet import autodiff as ad
from s3pet.autodiff import Tensor
from s3pet.errors import ConfigError, InputError, StructureFormatError
from s3pet.rng import stream

ENCODER = "encoder"
DECODER = "decoder"
STACKS = (ENCODER, DECODER)

WEIGHT_FILE_VERSION = 1
# Additive pre-softmax mask value for causally hidden positions.
_MASK_VALUE = -1e30


class SublayerKind(str, Enum):
    SELF_ATTN = "self_attn"
    CROSS_ATTN = "cross_attn"
    FFN = "ffn"
    LN = "ln"


class Projection(str, Enum):
    """Sub-module discriminator within a sublayer.

    Linear projections carry Q/K/V/O/W1/W2. LN sites carry a tag naming
    which sublayer's norm they are (or the stack-final norm). A module
    whose projection is None addresses the whole sublayer output, which
    is where bottleneck adapters attach.
    """

    Q = "Q"
    K = "K"
    V = "V"
    O = "O"
    W1 = "W1"
    W2 = "W2"
    LN_SELF = "ln_self"
    LN_CROSS = "ln_cross"
    LN_FFN = "ln_ffn"
    LN_FINAL = "ln_final"


_ATTN_PROJS = (Projection.Q, Projection.K, Projection.V, Projection.O)
_FFN_PROJS = (Projection.W1, Projection.W2)
_LN_TAGS = (Projection.LN_SELF, Projection.LN_CROSS, Projection.LN_FFN, Projection.LN_FINAL)


@dataclass(frozen=True)
class SublayerId:
    """Address of one hookable transformation inside the backbone."""

    stack: str
    layer: int
    kind: SublayerKind
    projection: Optional[Projection] = None

    def __post_init__(self):
        if self.stack not in STACKS:
            raise ConfigError(f"unknown stack {self.stack!r}")
        if self.kind == SublayerKind.CROSS_ATTN and self.stack != DECODER:
            raise ConfigError("cross-attention sites exist only in the decoder stack")
        if self.projection == Projection.LN_CROSS and self.stack != DECODER:
            raise ConfigError("cross-attention layer norm exists only in the decoder stack")
        if self.kind in (SublayerKind.SELF_ATTN, SublayerKind.CROSS_ATTN):
            ok = self.projection is None or self.projection in _ATTN_PROJS
        elif self.kind == SublayerKind.FFN:
            ok = self.projection is None or self.projection in _FFN_PROJS
        else:  # LN sites always carry a tag so ids stay unique
            ok = self.projection in _LN_TAGS
        if not ok:
            raise ConfigError(f"projection {self.projection} invalid for kind {self.kind}")

    @property
    def is_linear(self) -> bool:
        return self.kind != SublayerKind.LN and self.projection is not None

    @property
    def is_module_output(self) -> bool:
        return self.kind != SublayerKind.LN and self.projection is None

    @property
    def is_layer_norm(self) -> bool:
        return self.kind == SublayerKind.LN

    def label(self) -> str:
        proj = self.projection.value if self.projection is not None else "out"
        return f"{self.stack}.{self.layer}.{self.kind.value}.{proj}"


@dataclass(frozen=True)
class BackboneConfig:
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    hidden_dim: int = 32
    ffn_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("num_encoder_layers", "num_decoder_layers", "hidden_dim", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"backbone config: {name} must be positive")
        if self.ffn_dim < self.hidden_dim:
            raise ConfigError("backbone config: ffn_dim must be >= hidden_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"backbone config: unknown fields {sorted(unknown)}")
        return cls(**d)


def _site_order_key(site: SublayerId) -> tuple:
    kind_pos = {
        SublayerKind.SELF_ATTN: 0,
        SublayerKind.CROSS_ATTN: 1,
        SublayerKind.FFN: 2,
        SublayerKind.LN: 3,
    }
    proj_pos = {p: i for i, p in enumerate([*_ATTN_PROJS, *_FFN_PROJS, *_LN_TAGS])}
    # LN tags interleave with the sublayer they follow.
    ln_after = {Projection.LN_SELF: 0, Projection.LN_CROSS: 1, Projection.LN_FFN: 2, Projection.LN_FINAL: 3}
    if site.is_layer_norm:
        slot = (ln_after[site.projection], 9, 0)
    else:
        slot = (kind_pos[site.kind], 0 if site.projection is not None else 5, proj_pos.get(site.projection, 0))
    return (STACKS.index(site.stack), site.layer, slot)


def sorted_sites(sites) -> list:
    return sorted(sites, key=_site_order_key)


class Backbone:
    """Frozen single-head encoder-decoder transformer.

    Weights are drawn once from seeded Gaussians and never receive
    gradients. Matrix weights use scale 1/sqrt(d); embeddings and
    position rows are unit-scale; biases start at zero and LN scales at
    one, so activations stay O(1) through the stacks.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.weights: dict[str, Tensor] = {}
        self._build_weights()

    # --- construction -------------------------------------------------

    def _add_weight(self, name: str, data: np.ndarray) -> None:
        self.weights[name] = Tensor(data)  # requires_grad stays False

    def _build_weights(self) -> None:
        cfg = self.config
        rng = stream(cfg.seed, "backbone-init")
        d, dm = cfg.hidden_dim, cfg.ffn_dim
        scale = 1.0 / math.sqrt(d)
        self._add_weight("embedding", rng.standard_normal((cfg.vocab_size, d)))
        self._add_weight("pos_embedding", rng.standard_normal((cfg.max_seq_len, d)))
        for st, n_layers in ((ENCODER, cfg.num_encoder_layers), (DECODER, cfg.num_decoder_layers)):
            for layer in range(n_layers):
                attns = ["self_attn"] if st == ENCODER else ["self_attn", "cross_attn"]
                for attn in attns:
                    for proj in ("wq", "wk", "wv", "wo"):
                        self._add_weight(f"{st}.{layer}.{attn}.{proj}", rng.standard_normal((d, d)) * scale)
                self._add_weight(f"{st}.{layer}.ffn.w1", rng.standard_normal((d, dm)) * scale)
                self._add_weight(f"{st}.{layer}.ffn.b1", np.zeros(dm))
                self._add_weight(f"{st}.{layer}.ffn.w2", rng.standard_normal((dm, d)) / math.sqrt(dm))
                self._add_weight(f"{st}.{layer}.ffn.b2", np.zeros(d))
                for tag in self._ln_tags_for(st):
                    self._add_weight(f"{st}.{layer}.{tag}.scale", np.ones(d))
                    self._add_weight(f"{st}.{layer}.{tag}.bias", np.zeros(d))
            self._add_weight(f"{st}.final_ln.scale", np.ones(d))
            self._add_weight(f"{st}.final_ln.bias", np.zeros(d))
        self._add_weight("head", rng.standard_normal((d, cfg.vocab_size)) * scale)

    @staticmethod
    def _ln_tags_for(stack: str) -> tuple:
        return ("ln_self", "ln_cross", "ln_ffn") if stack == DECODER else ("ln_self", "ln_ffn")

    # --- site grid ----------------------------------------------------

    def sites(self) -> list[SublayerId]:
        """Every hookable site, in canonical (execution) order."""
        out = []
        for st, n_layers in ((ENCODER, self.config.num_encoder_layers), (DECODER, self.config.num_decoder_layers)):
            for layer in range(n_layers):
                kinds = [SublayerKind.SELF_ATTN]
                if st == DECODER:
                    kinds.append(SublayerKind.CROSS_ATTN)
                for kind in kinds:
                    for proj in _ATTN_PROJS:
                        out.append(SublayerId(st, layer, kind, proj))
                    out.append(SublayerId(st, layer, kind, None))
                for proj in _FFN_PROJS:
                    out.append(SublayerId(st, layer, SublayerKind.FFN, proj))
                out.append(SublayerId(st, layer, SublayerKind.FFN, None))
                out.append(SublayerId(st, layer, SublayerKind.LN, Projection.LN_SELF))
                if st == DECODER:
                    out.append(SublayerId(st, layer, SublayerKind.LN, Projection.LN_CROSS))
                out.append(SublayerId(st, layer, SublayerKind.LN, Projection.LN_FFN))
            out.append(SublayerId(st, n_layers, SublayerKind.LN, Projection.LN_FINAL))
        return sorted_sites(out)

    def has_site(self, site: SublayerId) -> bool:
        n_layers = self.config.num_encoder_layers if site.stack == ENCODER else self.config.num_decoder_layers
        if site.projection == Projection.LN_FINAL:
            return site.layer == n_layers
        if not 0 <= site.layer < n_layers:
            return False
        if site.projection == Projection.LN_CROSS or site.kind == SublayerKind.CROSS_ATTN:
            return site.stack == DECODER
        return True

    def site_dims(self, site: SublayerId) -> tuple[int, int]:
        """(input dim, output dim) of the transformation at a site."""
        d, dm = self.config.hidden_dim, self.config.ffn_dim
        if site.projection == Projection.W1:
            return d, dm
        if site.projection == Projection.W2:
            return dm, d
        return d, d

    def param_count(self) -> int:
        return int(sum(t.size for t in self.weights.values()))

    # --- forward pieces -------------------------------------------------

    def _apply_hooks(self, hooks, site: SublayerId, h_in: Tensor, h_out: Tensor) -> Tensor:
        if hooks is None:
            return h_out
        return hooks.apply(site, h_in, h_out)

    def _project(self, h: Tensor, name: str, site: SublayerId, hooks, bias: Optional[str] = None) -> Tensor:
        out = ad.matmul(h, self.weights[name])
        if bias is not None:
            out = ad.add(out, self.weights[bias])
        return self._apply_hooks(hooks, site, h, out)

    def _attention(self, h: Tensor, memory: Tensor, stack: str, layer: int, kind: SublayerKind, hooks, causal: bool) -> Tensor:
        attn = "self_attn" if kind == SublayerKind.SELF_ATTN else "cross_attn"
        prefix = f"{stack}.{layer}.{attn}"
        q = self._project(h, f"{prefix}.wq", SublayerId(stack, layer, kind, Projection.Q), hooks)
        k = self._project(memory, f"{prefix}.wk", SublayerId(stack, layer, kind, Projection.K), hooks)
        v = self._project(memory, f"{prefix}.wv", SublayerId(stack, layer, kind, Projection.V), hooks)
        scores = ad.matmul(q, ad.transpose_last2(k)) / math.sqrt(self.config.hidden_dim)
        if causal:
            t = h.shape[-2]
            mask = np.triu(np.full((t, t), _MASK_VALUE), k=1)
            scores = ad.add(scores, ad.constant(mask))
        ctx = ad.matmul(ad.softmax(scores), v)
        out = self._project(ctx, f"{prefix}.wo", SublayerId(stack, layer, kind, Projection.O), hooks)
        return self._apply_hooks(hooks, SublayerId(stack, layer, kind, None), h, out)

    def self_attention(self, h: Tensor, stack: str, layer: int, hooks=None) -> Tensor:
        causal = stack == DECODER
        return self._attention(h, h, stack, layer, SublayerKind.SELF_ATTN, hooks, causal)

    def cross_attention(self, h: Tensor, memory: Tensor, layer: int, hooks=None) -> Tensor:
        return self._attention(h, memory, DECODER, layer, SublayerKind.CROSS_ATTN, hooks, causal=False)

    def feed_forward(self, h: Tensor, stack: str, layer: int, hooks=None) -> Tensor:
        prefix = f"{stack}.{layer}.ffn"
        mid = self._project(h, f"{prefix}.w1", SublayerId(stack, layer, SublayerKind.FFN, Projection.W1), hooks, bias=f"{prefix}.b1")
        out = self._project(ad.relu(mid), f"{prefix}.w2", SublayerId(stack, layer, SublayerKind.FFN, Projection.W2), hooks, bias=f"{prefix}.b2")
        return self._apply_hooks(hooks, SublayerId(stack, layer, SublayerKind.FFN, None), h, out)

    def _layer_norm(self, h: Tensor, stack: str, layer: int, tag: Projection, hooks) -> Tensor:
        if tag == Projection.LN_FINAL:
            name = f"{stack}.final_ln"
        else:
            name = f"{stack}.{layer}.{tag.value}"
        out = ad.layernorm_scale(h, self.weights[f"{name}.scale"], self.weights[f"{name}.bias"])
        return self._apply_hooks(hooks, SublayerId(stack, layer, SublayerKind.LN, tag), h, out)

    def _embed(self, ids: np.ndarray) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise InputError(f"token batch must be 2-d (batch, seq), got {ids.shape}")
        if ids.shape[1] > cfg.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise InputError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        tok = ad.embedding(self.weights["embedding"], ids)
        pos = ad.constant(self.weights["pos_embedding"].data[: ids.shape[1]])
        return ad.add(tok, pos)

    def encode(self, src_ids: np.ndarray, hooks=None) -> Tensor:
        h = self._embed(src_ids)
        for layer in range(self.config.num_encoder_layers):
            a = self.self_attention(h, ENCODER, layer, hooks)
            h = self._layer_norm(ad.add(h, a), ENCODER, layer, Projection.LN_SELF, hooks)
            f = self.feed_forward(h, ENCODER, layer, hooks)
            h = self._layer_norm(ad.add(h, f), ENCODER, layer, Projection.LN_FFN, hooks)
        return self._layer_norm(h, ENCODER, self.config.num_encoder_layers, Projection.LN_FINAL, hooks)

    def decode(self, tgt_ids: np.ndarray, memory: Tensor, hooks=None) -> Tensor:
        h = self._embed(tgt_ids)
        for layer in range(self.config.num_decoder_layers):
            a = self.self_attention(h, DECODER, layer, hooks)
            h = self._layer_norm(ad.add(h, a), DECODER, layer, Projection.LN_SELF, hooks)
            c = self.cross_attention(h, memory, layer, hooks)
            h = self._layer_norm(ad.add(h, c), DECODER, layer, Projection.LN_CROSS, hooks)
            f = self.feed_forward(h, DECODER, layer, hooks)
            h = self._layer_norm(ad.add(h, f), DECODER, layer, Projection.LN_FFN, hooks)
        return self._layer_norm(h, DECODER, self.config.num_decoder_layers, Projection.LN_FINAL, hooks)

    def forward(self, src_ids: np.ndarray, tgt_ids: np.ndarray, hooks=None) -> Tensor:
        """Logits over the vocabulary for every decoder position."""
        memory = self.encode(src_ids, hooks)
        h = self.decode(tgt_ids, memory, hooks)
        return ad.matmul(h, self.weights["head"])

    # --- serialization --------------------------------------------------

    def _serialize(self) -> bytes:
        header = {
            "format_version": WEIGHT_FILE_VERSION,
            "config": self.config.to_dict(),
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in self.weights.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
        for t in self.weights.values():
            blob += t.data.astype("<f8").tobytes()
        return blob

    def save_weights(self, path) -> None:
        """Write a JSON shape header line followed by little-endian float64 data."""
        with open(path, "wb") as fh:
            fh.write(self._serialize())

    @classmethod
    def load_weights(cls, path) -> "Backbone":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise StructureFormatError(f"weight file header is not valid JSON: {exc}") from exc
            if header.get("format_version") != WEIGHT_FILE_VERSION:
                raise StructureFormatError(f"weight file: unsupported format_version {header.get('format_version')!r}")
            backbone = cls(BackboneConfig.from_dict(header["config"]))
            for spec in header["tensors"]:
                name, shape = spec["name"], tuple(spec["shape"])
                if name not in backbone.weights or backbone.weights[name].shape != shape:
                    raise StructureFormatError(f"weight file: unexpected tensor {name!r} of shape {shape}")
                n_bytes = int(np.prod(shape)) * 8
                raw = fh.read(n_bytes)
                if len(raw) != n_bytes:
                    raise StructureFormatError(f"weight file: truncated data for tensor {name!r}")
                backbone.weights[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        return backbone

    def fingerprint(self) -> str:
        """64-bit hash of the serialized frozen weights, as 16 hex chars."""
        return hashlib.blake2b(self._serialize(), digest_size=8).hexdigest()
