"""End-to-end masked autoencoder with attention-guided mask sampling.

Forward pass for pretraining: embed, compute the first-layer attention
map, sample a mask from it, softmax the masked scores, aggregate values
into hidden rows, run the transformer trunk, upsample back to sequence
length with positional queries, and reconstruct raw values. The loss is
computed only on masked positions.

Only the first attention layer ever participates in mask extraction.
Mask selection itself is non-differentiable (the chosen indices are
constants in the graph); gradients flow through the masked softmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention as attn
from . import autograd as ag
from . import embedding as emb
from . import masker
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch
from .rng import Rng

__all__ = ["ModelConfig", "PretrainOutput", "MaskedAutoencoder",
           "physics_config", "protein_config"]

NEG_INF = -np.inf


@dataclass
class ModelConfig:
    kind: str = "self"          # "self" (l = n) or "cross" (l = latents < n)
    n: int = 28
    layers: int = 4
    d_embed: int = 128
    d_k: int = 128
    d_v: int = 128
    heads: int = 8
    latents: int = 0            # cross-attention only; forced to n for self
    discrete: bool = False
    d_raw: int = 1
    init_sigma: float = 0.02
    query_subset_size: int = 0  # 0 = max(1, round(l * r))

    def __post_init__(self):
        if self.kind not in ("self", "cross"):
            raise ValueError(f"kind must be self or cross, got {self.kind!r}")
        if self.kind == "self":
            self.latents = self.n
        else:
            if not 0 < self.latents < self.n:
                raise ValueError(
                    f"cross-attention needs 0 < latents < n, got {self.latents} vs {self.n}")
        if self.d_k % self.heads or self.d_v % self.heads:
            raise ValueError("d_k and d_v must be divisible by heads")

    @property
    def d_out(self) -> int:
        return emb.BYTE_VOCAB if self.discrete else self.d_raw

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def physics_config(**overrides) -> ModelConfig:
    """Tabular default: short self-attention model over 28 scalar tokens."""
    base = dict(kind="self", n=28, layers=4, d_embed=128, d_k=128, d_v=128,
                heads=8, discrete=False, d_raw=1)
    base.update(overrides)
    return ModelConfig(**base)


def protein_config(**overrides) -> ModelConfig:
    """Byte-sequence default: deep cross-attention model with 256 latents."""
    base = dict(kind="cross", n=1024, layers=16, d_embed=512, d_k=256,
                d_v=1024, heads=8, latents=256, discrete=True)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class PretrainOutput:
    loss: Tensor
    masks: list[masker.MaskSpec]
    reconstruction: Tensor


@dataclass
class _Decoder:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


@dataclass
class _ReconHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class _TaskHead:
    w: Tensor
    b: Tensor
    out_dim: int


class MaskedAutoencoder:
    """Embedding + guided-mask first layer + trunk + upsampling decoder."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        c = config
        s = c.init_sigma
        self.embedding = emb.init_embedding(c.discrete, c.n, c.d_embed, c.d_raw,
                                            rng, sigma=s)
        self.encoder = attn.init_attention(c.kind, c.d_embed, c.d_k, c.d_v,
                                           c.heads, c.latents, rng, sigma=s)
        self.blocks = [attn.init_block(c.d_v, c.heads, rng, sigma=s)
                       for _ in range(c.layers)]
        self.decoder = _Decoder(
            w_q=Tensor(s * rng.normals((c.d_embed, c.d_k)), requires_grad=True),
            w_k=Tensor(s * rng.normals((c.d_v, c.d_k)), requires_grad=True),
            w_v=Tensor(s * rng.normals((c.d_v, c.d_v)), requires_grad=True),
        )
        hidden = 4 * c.d_v
        self.recon = _ReconHead(
            w1=Tensor(s * rng.normals((c.d_v, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(s * rng.normals((hidden, c.d_out)), requires_grad=True),
            b2=Tensor(np.zeros(c.d_out), requires_grad=True),
        )
        self.task_head: _TaskHead | None = None

    # -- parameter registry -------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """Stable name-to-tensor map (iteration order fixed by construction)."""
        out = {
            "embedding.table": self.embedding.table,
            "embedding.positions": self.embedding.positions,
        }
        if self.encoder.latents is not None:
            out["encoder.latents"] = self.encoder.latents
        out.update({
            "encoder.w_q": self.encoder.w_q,
            "encoder.w_k": self.encoder.w_k,
            "encoder.w_v": self.encoder.w_v,
            "encoder.w_o": self.encoder.w_o,
        })
        for i, blk in enumerate(self.blocks):
            prefix = f"block{i}."
            out.update({
                prefix + "ln1_gain": blk.ln1_gain,
                prefix + "ln1_bias": blk.ln1_bias,
                prefix + "w_q": blk.attn.w_q,
                prefix + "w_k": blk.attn.w_k,
                prefix + "w_v": blk.attn.w_v,
                prefix + "w_o": blk.attn.w_o,
                prefix + "ln2_gain": blk.ln2_gain,
                prefix + "ln2_bias": blk.ln2_bias,
                prefix + "w1": blk.w1,
                prefix + "b1": blk.b1,
                prefix + "w2": blk.w2,
                prefix + "b2": blk.b2,
            })
        out.update({
            "decoder.w_q": self.decoder.w_q,
            "decoder.w_k": self.decoder.w_k,
            "decoder.w_v": self.decoder.w_v,
            "recon.w1": self.recon.w1,
            "recon.b1": self.recon.b1,
            "recon.w2": self.recon.w2,
            "recon.b2": self.recon.b2,
        })
        if self.task_head is not None:
            out["head.w"] = self.task_head.w
            out["head.b"] = self.task_head.b
        return out

    def ensure_task_head(self, out_dim: int, rng: Rng) -> None:
        if self.task_head is not None and self.task_head.out_dim == out_dim:
            return
        self.task_head = _TaskHead(
            w=Tensor(self.config.init_sigma * rng.normals((self.config.d_v, out_dim)),
                     requires_grad=True),
            b=Tensor(np.zeros(out_dim), requires_grad=True),
            out_dim=out_dim,
        )

    # -- forward paths ------------------------------------------------------

    def _check_batch(self, batch: Batch) -> None:
        if batch.tokens.shape[-1] != self.config.n:
            raise ag.ShapeError(
                f"batch length {batch.tokens.shape[-1]} != model n {self.config.n}")
        if self.config.discrete:
            ids = np.asarray(batch.tokens)
            if ids.max(initial=0) >= emb.BYTE_VOCAB or ids.min(initial=0) < 0:
                raise IndexError("token id out of vocabulary range")

    def _pad_additive(self, pads: np.ndarray) -> np.ndarray | None:
        if not pads.any():
            return None
        if np.all(pads.all(axis=-1)):
            raise ValueError("a sample is entirely padding")
        return np.where(pads, NEG_INF, 0.0)

    def sample_masks(self, score_values: np.ndarray, r: float, rng: Rng,
                     pads: np.ndarray) -> list[masker.MaskSpec]:
        """Per-sample guided masks from raw [b, h, l, n] attention scores.

        Sample i uses the derived stream rng.child(i); the same derivation
        is used by the random baseline so mask mode is the only difference
        between the two.
        """
        size = self.config.query_subset_size or None
        # one softmax pass for the whole batch, then per-sample selection
        aggregated = np.add.reduce(ag.softmax_rows_data(score_values), axis=1)
        return [
            masker.sample_mask_aggregated(aggregated[i], r, rng.child(i),
                                          pad=pads[i] if pads[i].any() else None,
                                          subset_size=size)
            for i in range(score_values.shape[0])
        ]

    def _masked_value_keep(self, masks, batch_shape) -> np.ndarray:
        keep = np.ones(batch_shape)
        for i, spec in enumerate(masks):
            keep[i, spec.masked] = 0.0
        return keep

    def _encode(self, batch: Batch, masks: list[masker.MaskSpec] | None,
                ratio: float | None = None, rng: Rng | None = None):
        """Shared encoder path; returns (hidden rows, masks, pad additive).

        With `masks` given they are applied as-is; with `ratio` and `rng`
        given instead, guided masks are sampled from the first-layer map;
        with neither, the pass runs unmasked (fine-tuning, evaluation).
        """
        self._check_batch(batch)
        c = self.config
        pads = np.asarray(batch.pads, dtype=bool)
        pad_add = self._pad_additive(pads)
        sampling = masks is None and ratio is not None and rng is not None

        if c.kind == "cross":
            xhat = emb.embed(batch.tokens, self.embedding)
            scores = attn.attention_map(xhat, self.encoder)
            if sampling:
                masks = self.sample_masks(scores.data, ratio, rng, pads)
            values_src = xhat
        else:
            # Self-attention projects queries from the inputs, so the value
            # term of every masked slot is dropped before encoding; masked
            # rows reduce to their positional embedding and carry no trace
            # of the raw value. The sampling map itself sees the full input.
            if sampling:
                with ag.no_grad():
                    raw = attn.attention_map(emb.embed(batch.tokens, self.embedding),
                                             self.encoder)
                masks = self.sample_masks(raw.data, ratio, rng, pads)
            keep = None
            if masks is not None:
                keep = self._masked_value_keep(masks, batch.tokens.shape)
            xhat = emb.embed(batch.tokens, self.embedding, value_keep=keep)
            scores = attn.attention_map(xhat, self.encoder)
            values_src = xhat

        if masks is None and pad_add is None:
            weights = ag.row_softmax(scores)
        else:
            additive = np.zeros(batch.tokens.shape)
            if masks is not None:
                for i, spec in enumerate(masks):
                    additive[i] = spec.additive
            if pad_add is not None:
                additive = additive + pad_add
            full = np.broadcast_to(additive[:, None, None, :], scores.shape)
            weights = ag.row_softmax(ag.add(scores, Tensor(full)))
        hidden = attn.attend(weights, attn.value_heads(values_src, self.encoder),
                             self.encoder.w_o)

        trunk_add = None
        if c.kind == "self" and pad_add is not None:
            trunk_add = pad_add[:, None, None, :]
        for blk in self.blocks:
            hidden = attn.transformer_block(hidden, blk, key_additive=trunk_add)
        return hidden, masks, pad_add

    def pretrain_forward(self, batch: Batch, r: float, rng: Rng | None = None,
                         masks: list[masker.MaskSpec] | None = None) -> PretrainOutput:
        """One masked-reconstruction pass; loss is on masked indices only."""
        if masks is None and rng is None:
            raise ValueError("pretrain_forward needs an rng or explicit masks")
        hidden, masks, pad_add = self._encode(batch, masks, ratio=r, rng=rng)
        outputs = self.decode_upsample(hidden, pad_add)
        recon = self.reconstruct(outputs)
        index_sets = [spec.masked for spec in masks]
        if self.config.discrete:
            loss = ag.cross_entropy_masked(recon, batch.tokens, index_sets)
        else:
            target = np.asarray(batch.tokens, dtype=np.float64)[..., None]
            loss = ag.mse_masked(recon, Tensor(target), index_sets)
        return PretrainOutput(loss=loss, masks=masks, reconstruction=recon)

    def encoder_hidden(self, batch: Batch, masks) -> Tensor:
        """Deterministic hidden rows under a caller-fixed mask (no rng)."""
        if isinstance(masks, masker.MaskSpec):
            masks = [masks] * batch.tokens.shape[0]
        hidden, _, _ = self._encode(batch, masks)
        return hidden

    def decode_upsample(self, hidden: Tensor,
                        pad_additive: np.ndarray | None = None) -> Tensor:
        """Upsample hidden rows to n outputs with positional queries.

        O = softmax(Q K^T / sqrt(d_k)) V with Q projected from the
        positional table and K, V from the hidden rows (single head).
        """
        queries = ag.matmul(self.embedding.positions, self.decoder.w_q)
        keys = ag.matmul(hidden, self.decoder.w_k)
        vals = ag.matmul(hidden, self.decoder.w_v)
        kt = ag.transpose(keys, tuple(range(keys.ndim - 2)) + (keys.ndim - 1, keys.ndim - 2))
        scores = ag.scale(ag.matmul(queries, kt), 1.0 / np.sqrt(self.config.d_k))
        if self.config.kind == "self" and pad_additive is not None:
            # hidden rows sit at input positions; padded rows are not keys
            shift = np.broadcast_to(pad_additive[:, None, :], scores.shape)
            scores = ag.add(scores, Tensor(shift))
        return ag.matmul(ag.row_softmax(scores), vals)

    def reconstruct(self, outputs: Tensor) -> Tensor:
        """Two-layer MLP from decoded rows to raw values or byte logits."""
        inner = ag.gelu(ag.add(ag.matmul(outputs, self.recon.w1), self.recon.b1))
        return ag.add(ag.matmul(inner, self.recon.w2), self.recon.b2)

    def finetune_forward(self, batch: Batch) -> tuple[Tensor, Tensor]:
        """Full unmasked forward, mean-pool, linear head; returns (output, loss)."""
        if batch.labels is None:
            raise ValueError("finetune_forward needs labels")
        if self.task_head is None:
            raise ValueError("call ensure_task_head() before fine-tuning")
        hidden, _, _ = self._encode(batch, masks=None)
        pads = np.asarray(batch.pads, dtype=bool)
        if self.config.kind == "self" and pads.any():
            keep_rows = (~pads).astype(np.float64)
        else:
            keep_rows = np.ones(hidden.shape[:-1])
        pooled = ag.masked_row_mean(hidden, keep_rows)
        out = ag.add(ag.matmul(pooled, self.task_head.w), self.task_head.b)
        all_rows = np.arange(out.shape[0])
        if self.task_head.out_dim == 1:
            target = Tensor(np.asarray(batch.labels, dtype=np.float64)[:, None])
            loss = ag.mse_masked(out, target, all_rows)
        else:
            loss = ag.cross_entropy_masked(out, batch.labels, all_rows)
        return out, loss

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.config.to_dict(),
                        {name: t.data for name, t in self.parameters().items()})

    @classmethod
    def load(cls, path, rng: Rng | None = None) -> "MaskedAutoencoder":
        config_dict, tensors = load_checkpoint(path)
        config = ModelConfig.from_dict(config_dict)
        model = cls(config, rng or Rng(0))
        if "head.w" in tensors:
            model.ensure_task_head(tensors["head.w"].shape[1], Rng(0))
        params = model.parameters()
        missing = set(params) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, tensor in params.items():
            if tensors[name].shape != tensor.data.shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {tensor.data.shape}")
            tensor.data = np.ascontiguousarray(tensors[name])
        return model
