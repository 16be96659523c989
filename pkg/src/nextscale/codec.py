"""Toy latent codec and multi-scale residual quantization.

Images map to latents through a frozen linear patch embedding with a tied
transpose decoder; latents decompose into per-scale token maps by
quantizing the downsampled running residual, and reconstruct as the sum
of upsampled codebook lookups. Array conventions: images are
(channels, H, W) float, latents are (C, H, W) float, token maps are
(H, W) int64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .ndcore import Rng


class CodecError(ValueError):
    pass


# -- scale schedule -----------------------------------------------------------


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered latent resolutions (H_1,W_1) .. (H_K,W_K), coarse to fine."""

    resolutions: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise CodecError("schedule needs at least one scale")
        areas = [h * w for h, w in self.resolutions]
        if any(a2 <= a1 for a1, a2 in zip(areas, areas[1:])):
            raise CodecError(f"schedule areas must strictly increase, got {self.resolutions}")
        if any(h < 1 or w < 1 for h, w in self.resolutions):
            raise CodecError("scale resolutions must be positive")

    @classmethod
    def square(cls, sides) -> "ScaleSchedule":
        return cls(tuple((int(s), int(s)) for s in sides))

    @property
    def K(self) -> int:
        return len(self.resolutions)

    @property
    def final(self) -> tuple[int, int]:
        return self.resolutions[-1]

    def token_counts(self) -> list[int]:
        return [h * w for h, w in self.resolutions]

    def total_tokens(self) -> int:
        return sum(self.token_counts())

    def offsets(self) -> list[int]:
        """Start offset of each scale block in the flattened sequence."""
        out, cur = [], 0
        for n in self.token_counts():
            out.append(cur)
            cur += n
        return out


# -- codebook -----------------------------------------------------------------


@dataclass
class Codebook:
    """|V| embedding vectors of dimension C, shared by the quantizer,
    the predictor head and the consistency targets."""

    entries: np.ndarray  # (|V|, C)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise CodecError(f"codebook entries must be (|V|, C), got {self.entries.shape}")
        if not np.isfinite(self.entries).all():
            raise CodecError("codebook contains non-finite entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def lookup(self, tokens: np.ndarray) -> np.ndarray:
        """Token map (H, W) -> latent map (C, H, W)."""
        tokens = np.asarray(tokens)
        return self.entries[tokens].transpose(2, 0, 1).copy()


# -- resampling ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _area_matrix_1d(n_in: int, n_out: int) -> np.ndarray:
    """Area-average pooling weights (n_out, n_in). Overlaps are computed
    in integer units of 1/(n_in*n_out) cells, so rows sum to exactly 1
    whenever n_in is a power of two (all shipped schedules)."""
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * n_in, (i + 1) * n_in  # in units of 1/n_out
        j0, j1 = lo // n_out, (hi + n_out - 1) // n_out
        for j in range(j0, min(j1, n_in)):
            overlap = min(hi, (j + 1) * n_out) - max(lo, j * n_out)
            if overlap > 0:
                w[i, j] = overlap / n_in
    return w


@lru_cache(maxsize=None)
def _bilinear_matrix_1d(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation weights (n_out, n_in), half-pixel centers,
    clamped at the borders."""
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        if src <= 0:
            w[i, 0] = 1.0
        elif src >= n_in - 1:
            w[i, n_in - 1] = 1.0
        else:
            j = int(np.floor(src))
            frac = src - j
            w[i, j] = 1.0 - frac
            w[i, j + 1] = frac
    return w


def resize_matrices(shape_in: tuple[int, int], shape_out: tuple[int, int], mode: str):
    """Per-axis resize operators (R_h, R_w) so that out = R_h @ x @ R_w.T."""
    h_in, w_in = shape_in
    h_out, w_out = shape_out
    if mode == "area":
        if h_out > h_in or w_out > w_in:
            raise CodecError(f"downsample target {shape_out} exceeds source {shape_in}")
        return _area_matrix_1d(h_in, h_out), _area_matrix_1d(w_in, w_out)
    if mode == "bilinear":
        if h_out < h_in or w_out < w_in:
            raise CodecError(f"upsample target {shape_out} below source {shape_in}")
        return _bilinear_matrix_1d(h_in, h_out), _bilinear_matrix_1d(w_in, w_out)
    raise CodecError(f"unknown resize mode {mode!r}")


def _resize(x: np.ndarray, shape_out: tuple[int, int], mode: str) -> np.ndarray:
    if x.shape[-2:] == tuple(shape_out):
        return x
    rh, rw = resize_matrices(x.shape[-2:], shape_out, mode)
    rh = rh.astype(x.dtype, copy=False)
    rw = rw.astype(x.dtype, copy=False)
    return rh @ x @ rw.T


def downsample(x: np.ndarray, shape_out: tuple[int, int]) -> np.ndarray:
    """Area-average pooling to ``shape_out``; preserves constant maps."""
    return _resize(x, shape_out, "area")


def upsample(x: np.ndarray, shape_out: tuple[int, int]) -> np.ndarray:
    """Bilinear interpolation to ``shape_out``; preserves constant maps."""
    return _resize(x, shape_out, "bilinear")


def bilinear_resize(x: np.ndarray, shape_out: tuple[int, int]) -> np.ndarray:
    """Bilinear resize in either direction (pixel-space helper; the
    schedule-facing ``upsample``/``downsample`` keep their directional
    contracts)."""
    if x.shape[-2:] == tuple(shape_out):
        return x
    rh = _bilinear_matrix_1d(x.shape[-2], shape_out[0]).astype(x.dtype, copy=False)
    rw = _bilinear_matrix_1d(x.shape[-1], shape_out[1]).astype(x.dtype, copy=False)
    return rh @ x @ rw.T


# -- quantization -------------------------------------------------------------


def quantize(latent: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest codebook entry per position, squared Euclidean distance,
    ties broken by the lowest index. latent (C, H, W) -> tokens (H, W)."""
    if codebook.size < 1:
        raise CodecError("empty codebook")
    c, h, w = latent.shape
    if c != codebook.dim:
        raise CodecError(f"latent channels {c} != codebook dim {codebook.dim}")
    vecs = latent.reshape(c, h * w).T  # (N, C)
    d2 = ((vecs[:, None, :] - codebook.entries[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1).reshape(h, w)


def residual_decompose(f: np.ndarray, schedule: ScaleSchedule, codebook: Codebook) -> list[np.ndarray]:
    """Token maps r_1..r_K: at each scale the running residual against the
    accumulated full-resolution reconstruction is downsampled to that
    scale and quantized."""
    if f.shape[-2:] != schedule.final:
        raise CodecError(f"latent resolution {f.shape[-2:]} != schedule final {schedule.final}")
    base = np.zeros_like(f)
    tokens = []
    for h, w in schedule.resolutions:
        resid = downsample(f - base, (h, w))
        r = quantize(resid, codebook)
        tokens.append(r)
        base = base + upsample(codebook.lookup(r).astype(f.dtype), schedule.final)
    return tokens


def residual_decompose_per_scale(
    f: np.ndarray, schedule: ScaleSchedule, codebook: Codebook
) -> list[np.ndarray]:
    """Alternative residual ordering: the running residual is formed at
    each target scale directly, r_k = quantize(Down_k(f) - sum of coarser
    lookups upsampled straight to scale k). With this chain the partial
    reconstruction at scale k telescopes to Down_k(f) minus one
    quantization error, which keeps cumulative predictions aligned with
    the per-scale full-latent targets (the training target chain)."""
    if f.shape[-2:] != schedule.final:
        raise CodecError(f"latent resolution {f.shape[-2:]} != schedule final {schedule.final}")
    tokens: list[np.ndarray] = []
    lookups: list[np.ndarray] = []
    for k, (h, w) in enumerate(schedule.resolutions):
        resid = downsample(f, (h, w))
        for lm in lookups:
            resid = resid - upsample(lm, (h, w))
        r = quantize(resid, codebook)
        tokens.append(r)
        lookups.append(codebook.lookup(r).astype(f.dtype))
    return tokens


def reconstruct(
    tokens: list[np.ndarray],
    schedule: ScaleSchedule,
    codebook: Codebook,
    target_scale: int | None = None,
) -> np.ndarray:
    """Sum of codebook lookups for scales 1..len(tokens), each upsampled
    to the resolution of ``target_scale`` (1-based; defaults to the last
    provided scale)."""
    if not tokens:
        raise CodecError("reconstruct: no token maps given")
    if len(tokens) > schedule.K:
        raise CodecError("reconstruct: more token maps than scheduled scales")
    k = len(tokens) if target_scale is None else int(target_scale)
    if k < len(tokens):
        raise CodecError(f"reconstruct: target scale {k} does not cover {len(tokens)} token maps")
    shape_out = schedule.resolutions[k - 1]
    out = np.zeros((codebook.dim, *shape_out))
    for r, (h, w) in zip(tokens, schedule.resolutions):
        if r.shape != (h, w):
            raise CodecError(f"token map shape {r.shape} != scheduled {(h, w)}")
        out += upsample(codebook.lookup(r), shape_out)
    return out


def full_scale_targets(z: np.ndarray, schedule: ScaleSchedule, codebook: Codebook) -> list[np.ndarray]:
    """Ground-truth cumulative token maps: quantize the latent after
    area-downsampling to each scheduled resolution (identity at the
    final scale)."""
    if z.shape[-2:] != schedule.final:
        raise CodecError(f"latent resolution {z.shape[-2:]} != schedule final {schedule.final}")
    return [quantize(downsample(z, (h, w)), codebook) for h, w in schedule.resolutions]


# -- codebook fitting ---------------------------------------------------------


def fit_codebook(latents, size: int, rng: Rng, iters: int = 25) -> Codebook:
    """k-means over all spatial vectors of the given latent maps,
    k-means++ init, Lloyd iterations capped at ``iters``. Deterministic
    given the rng state."""
    vecs = np.concatenate([np.asarray(lm).reshape(lm.shape[0], -1).T for lm in latents], axis=0)
    vecs = vecs.astype(np.float64)
    distinct = np.unique(vecs, axis=0)
    if distinct.shape[0] < size:
        raise CodecError(
            f"need at least {size} distinct latent vectors to fit a codebook, got {distinct.shape[0]}"
        )

    centers = np.empty((size, vecs.shape[1]))
    first = int(rng.integers(0, vecs.shape[0]))
    centers[0] = vecs[first]
    d2 = ((vecs - centers[0]) ** 2).sum(axis=1)
    for i in range(1, size):
        pick = rng.choice_weighted(d2)
        centers[i] = vecs[pick]
        d2 = np.minimum(d2, ((vecs - centers[i]) ** 2).sum(axis=1))

    for _ in range(iters):
        dist = ((vecs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        assign = dist.argmin(axis=1)
        new_centers = centers.copy()
        changed = False
        for j in range(size):
            mask = assign == j
            if mask.any():
                m = vecs[mask].mean(axis=0)
                if not np.array_equal(m, new_centers[j]):
                    changed = True
                new_centers[j] = m
        centers = new_centers
        if not changed:
            break
    return Codebook(centers)


def lloyd_refine(vecs: np.ndarray, centers: np.ndarray, iters: int = 30) -> np.ndarray:
    """Lloyd iterations warm-started from ``centers``; empty clusters keep
    their previous center. Deterministic."""
    vecs = np.asarray(vecs, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).copy()
    for _ in range(iters):
        d2 = ((vecs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            sel = assign == j
            if sel.any():
                new[j] = vecs[sel].mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


# -- linear patch codec ---------------------------------------------------------


@dataclass
class PatchCodec:
    """Linear patch embedding with a tied transpose decoder.

    ``weight`` has orthonormal rows, so when ``dim`` equals the flattened
    patch size the decoder is the exact inverse of the encoder.
    """

    patch: int
    in_channels: int
    dim: int
    weight: np.ndarray  # (dim, in_channels * patch * patch)
    bias: np.ndarray = field(default=None)  # (dim,), encoder bias
    out_bias: float = 0.0

    def __post_init__(self):
        d = self.in_channels * self.patch * self.patch
        if self.dim > d:
            raise CodecError(f"latent dim {self.dim} exceeds patch size {d}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.shape != (self.dim, d):
            raise CodecError(f"codec weight shape {self.weight.shape} != {(self.dim, d)}")
        if self.bias is None:
            self.bias = np.zeros(self.dim)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @classmethod
    def orthogonal(cls, rng: Rng, patch: int = 4, in_channels: int = 1, dim: int = 16) -> "PatchCodec":
        d = in_channels * patch * patch
        if dim > d:
            raise CodecError(f"latent dim {dim} exceeds patch size {d}")
        g = rng.normal((d, d))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity for determinism
        return cls(patch=patch, in_channels=in_channels, dim=dim, weight=q[:dim].copy())

    def latent_shape(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        return image_hw[0] // self.patch, image_hw[1] // self.patch

    def _patches(self, image: np.ndarray) -> np.ndarray:
        c, h, w = image.shape
        p = self.patch
        return (
            image.reshape(c, h // p, p, w // p, p)
            .transpose(1, 3, 0, 2, 4)
            .reshape((h // p) * (w // p), c * p * p)
        )

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(in_channels, H, W) pixels -> (dim, H/patch, W/patch) latent."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.in_channels:
            raise CodecError(f"expected ({self.in_channels}, H, W) image, got {image.shape}")
        c, h, w = image.shape
        if h % self.patch or w % self.patch:
            raise CodecError(f"image size {(h, w)} not divisible by patch {self.patch}")
        z = self._patches(image) @ self.weight.T + self.bias
        hp, wp = h // self.patch, w // self.patch
        return z.reshape(hp, wp, self.dim).transpose(2, 0, 1)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """(dim, h, w) latent -> (in_channels, h*patch, w*patch) pixels."""
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[0] != self.dim:
            raise CodecError(f"expected ({self.dim}, h, w) latent, got {latent.shape}")
        _, hp, wp = latent.shape
        p = self.patch
        flat = latent.reshape(self.dim, hp * wp).T @ self.weight + self.out_bias
        img = (
            flat.reshape(hp, wp, self.in_channels, p, p)
            .transpose(2, 0, 3, 1, 4)
            .reshape(self.in_channels, hp * p, wp * p)
        )
        return img

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "codec.weight": self.weight,
            "codec.bias": self.bias,
            "codec.meta": np.array([self.patch, self.in_channels, self.dim, self.out_bias]),
        }

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray]) -> "PatchCodec":
        meta = arrays["codec.meta"]
        return cls(
            patch=int(meta[0]),
            in_channels=int(meta[1]),
            dim=int(meta[2]),
            weight=arrays["codec.weight"],
            bias=arrays["codec.bias"],
            out_bias=float(meta[3]),
        )
