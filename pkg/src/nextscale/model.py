"""Scale-wise autoregressive predictor with block-causal attention,
a guidance-conditioned gating network, and additive conditioning on the
low-resolution latent.

Layout conventions: spatial tensors are (B, C, H, W); transformer
sequences are (B, L, width) where L is the sum of per-scale token
counts, blocks concatenated coarse to fine. A token in scale block k
attends to blocks 1..k (its own block included), never finer ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec as cd
from .ndcore import (
    ParamStore,
    Rng,
    Tensor,
    concat,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    sigmoid,
)
from .ndcore import tensor as T


@dataclass
class PredictorConfig:
    schedule: cd.ScaleSchedule
    vocab: int = 64
    embed_dim: int = 16
    depth: int = 4
    heads: int = 4
    width: int = 128
    mlp_ratio: float = 4.0
    mask_hidden: int = 32
    condition: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class AttentionRecord:
    """Post-softmax attention matrices captured during one forward pass."""

    layers: list  # depth entries of (B, heads, L, L)
    offsets: list[int]
    token_counts: list[int]
    schedule: cd.ScaleSchedule


def block_causal_mask(schedule: cd.ScaleSchedule) -> np.ndarray:
    """(L, L) boolean, True where the query's scale block may attend."""
    counts = schedule.token_counts()
    block_of = np.concatenate([np.full(n, i) for i, n in enumerate(counts)])
    return block_of[:, None] >= block_of[None, :]


class ScalePredictor:
    """Transformer over the flattened multi-scale token sequence."""

    def __init__(self, config: PredictorConfig, rng: Rng):
        self.config = config
        self.schedule = config.schedule
        self.offsets = config.schedule.offsets()
        self.counts = config.schedule.token_counts()
        self.L = config.schedule.total_tokens()
        self.allowed = block_causal_mask(config.schedule)
        self.params = ParamStore()
        self.record_attention = False
        self._last_record: AttentionRecord | None = None
        self._init_params(rng)

    # -- parameters -----------------------------------------------------------

    def _init_params(self, rng: Rng):
        cfg = self.config
        dt = cfg.np_dtype
        d, C, K = cfg.width, cfg.embed_dim, self.schedule.K
        add = self.params.add
        std = 0.02

        add("embed.word.w", rng.child(1).normal((C, d), std=std, dtype=dt))
        add("embed.word.b", np.zeros(d, dtype=dt))
        add("embed.start", rng.child(2).normal((d,), std=std, dtype=dt))
        add("embed.pos", rng.child(3).normal((self.L, d), std=std, dtype=dt))
        add("embed.lvl", rng.child(4).normal((K, d), std=std, dtype=dt))

        for i in range(cfg.depth):
            r = rng.child(10 + i)
            hid = int(cfg.mlp_ratio * d)
            add(f"blk{i}.ln1.g", np.ones(d, dtype=dt))
            add(f"blk{i}.ln1.b", np.zeros(d, dtype=dt))
            add(f"blk{i}.attn.qkv.w", r.child(0).normal((d, 3 * d), std=std, dtype=dt))
            add(f"blk{i}.attn.qkv.b", np.zeros(3 * d, dtype=dt))
            add(f"blk{i}.attn.proj.w", r.child(1).normal((d, d), std=std / np.sqrt(2 * cfg.depth), dtype=dt))
            add(f"blk{i}.attn.proj.b", np.zeros(d, dtype=dt))
            add(f"blk{i}.ln2.g", np.ones(d, dtype=dt))
            add(f"blk{i}.ln2.b", np.zeros(d, dtype=dt))
            add(f"blk{i}.mlp.fc1.w", r.child(2).normal((d, hid), std=std, dtype=dt))
            add(f"blk{i}.mlp.fc1.b", np.zeros(hid, dtype=dt))
            add(f"blk{i}.mlp.fc2.w", r.child(3).normal((hid, d), std=std / np.sqrt(2 * cfg.depth), dtype=dt))
            add(f"blk{i}.mlp.fc2.b", np.zeros(d, dtype=dt))

        add("head.ln.g", np.ones(d, dtype=dt))
        add("head.ln.b", np.zeros(d, dtype=dt))
        add("head.w", rng.child(5).normal((d, cfg.vocab), std=std, dtype=dt))
        add("head.b", np.zeros(cfg.vocab, dtype=dt))

        add("gate.fc1.w", rng.child(6).normal((C + 1, cfg.mask_hidden), std=0.2, dtype=dt))
        add("gate.fc1.b", np.zeros(cfg.mask_hidden, dtype=dt))
        add("gate.fc2.w", rng.child(7).normal((cfg.mask_hidden, 1), std=0.2, dtype=dt))
        add("gate.fc2.b", np.zeros(1, dtype=dt))
        add("gate.scale_bias", np.zeros(K, dtype=dt))

    # -- conditioning ---------------------------------------------------------

    def condition_encode(self, lr_image: np.ndarray, codec: cd.PatchCodec) -> np.ndarray:
        """LR pixels -> conditioning latent at the final scale resolution,
        via bilinear resize to the codec's native pixel size and the shared
        encoder. Returns (C, H_K, W_K) float."""
        h_k, w_k = self.schedule.final
        target_hw = (h_k * codec.patch, w_k * codec.patch)
        resized = cd.bilinear_resize(np.asarray(lr_image, dtype=np.float64), target_hw)
        c = codec.encode(resized)
        return c

    # -- gating ---------------------------------------------------------------

    def mask_generator(self, embed: Tensor, guidance: np.ndarray, scale_index: int) -> Tensor:
        """Per-position modulation mask in (0, 1).

        embed: (B, N_k, C) residual embedding at scale k (ground truth in
        teacher forcing, predicted at inference); guidance: per-position
        values in [0, 1], shaped (N_k,), (H_k, W_k), or batched (B, N_k).
        A two-layer MLP shared across positions and scales plus a
        per-scale bias feeds a sigmoid.
        """
        p = self.params
        b, n, c = embed.shape
        if c != self.config.embed_dim:
            raise T.ShapeError(f"mask_generator: embed channels {c} != {self.config.embed_dim}")
        g = np.asarray(guidance, dtype=embed.dtype)
        if g.size == n:
            g = np.broadcast_to(g.reshape(1, n, 1), (b, n, 1)).copy()
        elif g.size == b * n:
            g = g.reshape(b, n, 1)
        else:
            raise T.ShapeError(f"mask_generator: guidance size {g.shape} does not match {n} positions")
        x = concat([embed, Tensor(g)], axis=2)  # (B, N, C+1)
        h = gelu(matmul(x, p["gate.fc1.w"]) + p["gate.fc1.b"])
        logit = matmul(h, p["gate.fc2.w"]) + p["gate.fc2.b"]
        logit = logit + p["gate.scale_bias"][scale_index : scale_index + 1]
        return sigmoid(logit)  # (B, N, 1)

    @staticmethod
    def token_gate(embed: Tensor, mask: Tensor) -> Tensor:
        """Spatially adaptive gain: (1 + mask) * embed, mask broadcast
        over channels; amplification per position stays in (1, 2)."""
        if mask.shape[:2] != embed.shape[:2]:
            raise T.ShapeError(f"token_gate: mask {mask.shape} vs embed {embed.shape}")
        return (mask + 1.0) * embed

    # -- sequence construction -------------------------------------------------

    def _spatial(self, tokenized: Tensor, hw: tuple[int, int]) -> Tensor:
        b, n, c = tokenized.shape
        return tokenized.transpose(0, 2, 1).reshape(b, c, hw[0], hw[1])

    def _tokenized(self, spatial: Tensor) -> Tensor:
        b, c, h, w = spatial.shape
        return spatial.reshape(b, c, h * w).transpose(0, 2, 1)

    def _resize(self, x: Tensor, shape_out: tuple[int, int], mode: str) -> Tensor:
        if x.shape[-2:] == tuple(shape_out):
            return x
        rh, rw = cd.resize_matrices(x.shape[-2:], shape_out, mode)
        rh = Tensor(rh.astype(x.dtype))
        rwt = Tensor(rw.T.astype(x.dtype))
        return matmul(matmul(rh, x), rwt)

    def build_sequence(
        self,
        gated_embeds: list[Tensor],
        cond: np.ndarray | None,
        inject: dict | None = None,
    ) -> Tensor:
        """Assemble the transformer input for scale blocks 1..len(gated)+1.

        gated_embeds: per coarser scale m, the gated residual embedding in
        token layout (B, N_m, C). Block k receives the cumulative gated
        context of scales < k resized to (H_k, W_k), plus the conditioning
        latent resized likewise, projected to model width, plus learned
        position, scale, and (for block 1) start embeddings.

        ``inject`` optionally perturbs the assembled context entering one
        scale with Gaussian noise scaled by that context's RMS:
        {"scale": k0 (0-based), "sigma": float, "rng": Rng}. A sigma of
        zero must be passed as no injection at all; callers guarantee
        bit-identical outputs in that case.
        """
        p = self.params
        cfg = self.config
        n_blocks = len(gated_embeds) + 1
        if n_blocks > self.schedule.K:
            raise T.ShapeError(
                f"build_sequence: {len(gated_embeds)} context scales but schedule has K={self.schedule.K}"
            )
        batch = gated_embeds[0].shape[0] if gated_embeds else (1 if cond is None else self._cond_batch(cond))
        dt = cfg.np_dtype

        cond_b = None
        if cfg.condition:
            if cond is None:
                raise ValueError("build_sequence: conditioning enabled but no conditioning latent given")
            cond_b = np.asarray(cond, dtype=dt)
            if cond_b.ndim == 3:
                cond_b = np.broadcast_to(cond_b[None], (batch, *cond_b.shape))

        cum_full = None  # (B, C, H_K, W_K) cumulative gated context
        blocks = []
        for k in range(n_blocks):
            hw = self.schedule.resolutions[k]
            n_k = self.counts[k]
            parts = None
            if cum_full is not None:
                parts = self._resize(cum_full, hw, "area")
            if cond_b is not None:
                cond_k = cd.downsample(cond_b, hw).astype(dt)
                parts = Tensor(cond_k) if parts is None else parts + Tensor(cond_k)
            if parts is None:
                parts = Tensor(np.zeros((batch, cfg.embed_dim, *hw), dtype=dt))
            if inject is not None and inject.get("scale") == k:
                rms = float(np.sqrt((parts.data.astype(np.float64) ** 2).mean()))
                noise = (inject["sigma"] * rms) * inject["rng"].normal(parts.shape)
                parts = parts + Tensor(noise.astype(dt))

            tok = self._tokenized(parts)  # (B, N_k, C)
            x = matmul(tok, p["embed.word.w"]) + p["embed.word.b"]
            x = x + p["embed.pos"][self.offsets[k] : self.offsets[k] + n_k]
            x = x + p["embed.lvl"][k : k + 1]
            if k == 0:
                x = x + p["embed.start"]
            blocks.append(x)

            if k < len(gated_embeds):
                up = self._resize(
                    self._spatial(gated_embeds[k], hw), self.schedule.final, "bilinear"
                )
                cum_full = up if cum_full is None else cum_full + up

        return concat(blocks, axis=1)

    @staticmethod
    def _cond_batch(cond: np.ndarray) -> int:
        return cond.shape[0] if np.asarray(cond).ndim == 4 else 1

    # -- transformer ----------------------------------------------------------

    def forward(self, sequence: Tensor, n_blocks: int | None = None) -> list[Tensor]:
        """Run the backbone and return per-scale logits, a list of
        (B, N_k, vocab) tensors for the first ``n_blocks`` scales."""
        p = self.params
        cfg = self.config
        L = sequence.shape[1]
        if n_blocks is None:
            n_blocks = self._blocks_for_length(L)
        allowed = self.allowed[:L, :L]
        record = [] if self.record_attention else None

        x = sequence
        for i in range(cfg.depth):
            x = x + self._attention(layer_norm(x, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"]), i, allowed, record)
            h = layer_norm(x, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])
            h = gelu(matmul(h, p[f"blk{i}.mlp.fc1.w"]) + p[f"blk{i}.mlp.fc1.b"])
            h = matmul(h, p[f"blk{i}.mlp.fc2.w"]) + p[f"blk{i}.mlp.fc2.b"]
            x = x + h

        x = layer_norm(x, p["head.ln.g"], p["head.ln.b"])
        logits = matmul(x, p["head.w"]) + p["head.b"]

        if record is not None:
            self._last_record = AttentionRecord(
                layers=record,
                offsets=self.offsets[:n_blocks],
                token_counts=self.counts[:n_blocks],
                schedule=self.schedule,
            )
        return [
            logits[:, self.offsets[k] : self.offsets[k] + self.counts[k], :]
            for k in range(n_blocks)
        ]

    def _blocks_for_length(self, L: int) -> int:
        cum = 0
        for k, n in enumerate(self.counts):
            cum += n
            if cum == L:
                return k + 1
        raise T.ShapeError(f"sequence length {L} does not align with scale blocks {self.counts}")

    def _attention(self, x: Tensor, i: int, allowed: np.ndarray, record) -> Tensor:
        p = self.params
        cfg = self.config
        b, L, d = x.shape
        hd = d // cfg.heads
        qkv = matmul(x, p[f"blk{i}.attn.qkv.w"]) + p[f"blk{i}.attn.qkv.b"]
        q = qkv[:, :, :d].reshape(b, L, cfg.heads, hd).transpose(0, 2, 1, 3)
        k = qkv[:, :, d : 2 * d].reshape(b, L, cfg.heads, hd).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * d :].reshape(b, L, cfg.heads, hd).transpose(0, 2, 1, 3)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        att = masked_softmax(scores, allowed)
        if record is not None:
            record.append(att.data.copy())
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, L, d)
        return matmul(out, p[f"blk{i}.attn.proj.w"]) + p[f"blk{i}.attn.proj.b"]

    def take_attention_record(self) -> AttentionRecord:
        if self._last_record is None:
            raise RuntimeError("no attention record captured; set record_attention=True first")
        rec = self._last_record
        self._last_record = None
        return rec
