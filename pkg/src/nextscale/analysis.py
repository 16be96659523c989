"""Diagnostics over trained checkpoints: per-scale cumulative prediction
error, perturbation-injection robustness, Canny edge IoU, attention
locality statistics, and the closed-form generation cost model with an
empirical cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec as cd
from . import data as dt
from . import guidance as gd
from .model import AttentionRecord
from .ndcore import Rng, Tensor, no_grad


class AnalysisError(ValueError):
    pass


# -- per-scale prediction error ---------------------------------------------------


@dataclass
class ScaleErrorProfile:
    """Mean squared cumulative-latent error per scale, teacher-forced."""

    mse: list[float]
    sample_count: int

    def rows(self) -> list[list]:
        return [[k + 1, v, self.sample_count] for k, v in enumerate(self.mse)]

    HEADER = ("scale", "cumulative_latent_mse", "samples")


def per_scale_mse(bundle, hr_images: list[np.ndarray], lr_images: list[np.ndarray]) -> ScaleErrorProfile:
    """Teacher-forced forward per image; at each scale, the hard-token
    cumulative latent is compared (MSE per element) to the embedded
    full-scale target, averaged over the dataset."""
    if not hr_images:
        raise AnalysisError("per_scale_mse: empty dataset")
    model, codec, book, sched = bundle.model, bundle.codec, bundle.codebook, bundle.schedule
    K = sched.K
    totals = np.zeros(K)
    dt32 = model.config.np_dtype
    entries32 = book.entries.astype(dt32)
    with no_grad():
        for hr, lr in zip(hr_images, lr_images):
            z = codec.encode(hr)
            r_gt = cd.residual_decompose_per_scale(z, sched, book)
            u_gt = cd.full_scale_targets(z, sched, book)
            cond = model.condition_encode(lr, codec).astype(dt32)
            pyr = gd.guidance_pyramid(gd.laplacian_magnitude(lr), sched)
            gated = []
            for k, toks in enumerate(r_gt[:-1]):
                emb = Tensor(entries32[toks].reshape(1, -1, book.dim))
                mask = model.mask_generator(emb, pyr[k].reshape(-1).astype(dt32)[None], k)
                gated.append(model.token_gate(emb, mask))
            logits = model.forward(model.build_sequence(gated, cond[None]))
            pred_tokens = [
                lg.data[0].argmax(axis=-1).reshape(sched.resolutions[k])
                for k, lg in enumerate(logits)
            ]
            for k in range(K):
                cum = cd.reconstruct(pred_tokens[: k + 1], sched, book, target_scale=k + 1)
                ref = book.lookup(u_gt[k])
                totals[k] += float(((cum - ref) ** 2).mean())
    return ScaleErrorProfile(mse=list(totals / len(hr_images)), sample_count=len(hr_images))


# -- perturbation robustness --------------------------------------------------------


@dataclass
class PerturbationReport:
    """Output degradation when the context entering one scale is
    perturbed during inference; a zero noise level degrades nothing."""

    scales: list[int]
    sigmas: list[float]
    latent_mse: dict = field(default_factory=dict)   # (scale, sigma) -> float
    image_psnr: dict = field(default_factory=dict)   # (scale, sigma) -> float vs unperturbed

    HEADER = ("scale", "sigma", "latent_mse", "image_psnr_vs_clean")

    def rows(self) -> list[list]:
        return [
            [s, g, self.latent_mse[(s, g)], self.image_psnr[(s, g)]]
            for s in self.scales
            for g in self.sigmas
        ]


def perturbation_probe(
    bundle,
    lr_images: list[np.ndarray],
    scales: list[int],
    sigmas: list[float],
    rng: Rng,
    point: str = "context",
    draws: int = 1,
) -> PerturbationReport:
    """Run inference with Gaussian noise injected into the context
    entering each probed scale; degradation is measured against the
    unperturbed run of the same checkpoint and inputs, averaged over
    ``draws`` independent noise draws per image."""
    from .pipeline import infer

    K = bundle.schedule.K
    for s in scales:
        if not 1 <= s <= K:
            raise AnalysisError(f"perturbation_probe: scale {s} outside 1..{K}")
    report = PerturbationReport(scales=list(scales), sigmas=list(sigmas))
    baselines = [infer(bundle, lr) for lr in lr_images]
    for s in scales:
        for sig in sigmas:
            mses, psnrs = [], []
            for j, lr in enumerate(lr_images):
                base = baselines[j]
                for d in range(draws if sig != 0.0 else 1):
                    if sig == 0.0:
                        res = infer(bundle, lr)
                    else:
                        res = infer(
                            bundle, lr,
                            inject={
                                "scale": s, "sigma": sig, "point": point,
                                "rng": rng.child(1000 * s + j).child(d),
                            },
                        )
                    mses.append(float(((res.latent - base.latent) ** 2).mean()))
                    psnrs.append(dt.psnr(res.image, base.image))
            report.latent_mse[(s, sig)] = float(np.mean(mses))
            report.image_psnr[(s, sig)] = float(np.mean(psnrs))
    return report


# -- edge IoU ------------------------------------------------------------------------


@dataclass(frozen=True)
class CannyParams:
    blur_sigma: float = 1.0
    low_ratio: float = 0.1
    high_ratio: float = 0.3


def canny_edges(image: np.ndarray, params: CannyParams = CannyParams()) -> np.ndarray:
    """Binary edge mask: Gaussian blur, Sobel gradients, non-maximum
    suppression along the quantized gradient direction, then hysteresis
    with thresholds relative to the maximum suppressed magnitude."""
    gray = gd.to_luminance(image)
    gray = dt.gaussian_blur(gray, params.blur_sigma)
    p = np.pad(gray, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    mag = np.hypot(gx, gy)
    if mag.max() == 0:
        return np.zeros_like(mag, dtype=bool)

    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    pm = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    nms = np.zeros_like(mag)
    # neighbor offsets per direction bin: 0, 45, 90, 135 degrees
    bins = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1), (0, -1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1), (-1, -1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0), (-1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1), (-1, 1)),
    ]
    yy, xx = np.mgrid[0:h, 0:w]
    for sel, (dy1, dx1), (dy2, dx2) in bins:
        n1 = pm[yy + 1 + dy1, xx + 1 + dx1]
        n2 = pm[yy + 1 + dy2, xx + 1 + dx2]
        keep = sel & (mag >= n1) & (mag >= n2)
        nms[keep] = mag[keep]

    high = params.high_ratio * nms.max()
    low = params.low_ratio * nms.max()
    strong = nms >= high
    weak = nms >= low
    # hysteresis: grow strong edges through weak pixels (8-connectivity)
    mask = strong.copy()
    frontier = list(zip(*np.nonzero(strong)))
    while frontier:
        y, x = frontier.pop()
        for ddy in (-1, 0, 1):
            for ddx in (-1, 0, 1):
                ny, nx = y + ddy, x + ddx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not mask[ny, nx]:
                    mask[ny, nx] = True
                    frontier.append((ny, nx))
    return mask


def edge_iou(pred: np.ndarray, gt: np.ndarray, params: CannyParams = CannyParams()) -> float:
    """Intersection over union of the Canny edge masks of two images;
    defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise AnalysisError(f"edge_iou: shape mismatch {pred.shape} vs {gt.shape}")
    a = canny_edges(pred, params)
    b = canny_edges(gt, params)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# -- attention locality ---------------------------------------------------------------


def _grid_coords(schedule: cd.ScaleSchedule) -> np.ndarray:
    """Normalized (y, x) cell-center coordinates of every token in the
    flattened multi-scale sequence, in [0, 1]^2."""
    coords = []
    for h, w in schedule.resolutions:
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        coords.append(np.stack([gy.ravel(), gx.ravel()], axis=1))
    return np.concatenate(coords, axis=0)


def attention_locality(record: AttentionRecord, schedule: cd.ScaleSchedule) -> np.ndarray:
    """Mean attention distance per (layer, head, scale block).

    For a query in block k, every key is mapped to normalized [0, 1]^2
    coordinates and the offset is scaled by the query block's grid size
    (H_k, W_k), so same-block keys sit at unit spacing and cross-block
    keys are comparable. Returns (layers, heads, blocks)."""
    L = sum(record.token_counts)
    coords = _grid_coords(schedule)[:L]
    n_layers = len(record.layers)
    n_heads = record.layers[0].shape[1]
    n_blocks = len(record.token_counts)
    if record.layers[0].shape[-1] != L:
        raise AnalysisError(
            f"attention_locality: record width {record.layers[0].shape[-1]} != schedule tokens {L}"
        )
    out = np.zeros((n_layers, n_heads, n_blocks))
    for li, att in enumerate(record.layers):
        att_mean = att.mean(axis=0)  # average over batch: (heads, L, L)
        for bi in range(n_blocks):
            off = record.offsets[bi]
            n = record.token_counts[bi]
            hk, wk = schedule.resolutions[bi]
            q = coords[off : off + n]  # (n, 2)
            diff = q[:, None, :] - coords[None, :L, :]
            dist = np.hypot(diff[..., 0] * hk, diff[..., 1] * wk)  # (n, L)
            w_att = att_mean[:, off : off + n, :L]  # (heads, n, L)
            out[li, :, bi] = (w_att * dist[None]).sum(axis=-1).mean(axis=-1)
    return out


# -- cost model ------------------------------------------------------------------------


@dataclass
class CostModel:
    ratio: int
    steps: int
    tokens_per_step: list[int]
    cost_per_step: list[int]
    total_cost: int
    empirical_tokens: list[int] | None = None

    HEADER = ("step", "side", "cumulative_tokens", "step_cost")

    def rows(self) -> list[list]:
        return [
            [k + 1, self.ratio ** k, self.tokens_per_step[k], self.cost_per_step[k]]
            for k in range(self.steps)
        ]


def cost_model(a: int, K: int) -> CostModel:
    """Closed-form generation cost for a uniform-ratio schedule with
    side a^(k-1) at step k: cumulative tokens (a^(2k)-1)/(a^2-1) and
    squared step cost, exact integers."""
    if a <= 1:
        raise AnalysisError(f"cost_model: ratio must exceed 1, got {a}")
    if K < 1:
        raise AnalysisError(f"cost_model: need at least one step, got {K}")
    tokens = [(a ** (2 * k) - 1) // (a * a - 1) for k in range(1, K + 1)]
    costs = [t * t for t in tokens]
    return CostModel(
        ratio=a, steps=K, tokens_per_step=tokens, cost_per_step=costs, total_cost=sum(costs)
    )


def measure_attention_tokens(a: int, K: int, seed: int = 0) -> list[int]:
    """Empirical cross-check of the cost model's token counts: run a real
    staged forward pass with a uniform-ratio schedule and count the key
    columns each step's attention actually scores."""
    from .model import PredictorConfig, ScalePredictor

    sched = cd.ScaleSchedule.square([a ** k for k in range(K)])
    cfg = PredictorConfig(
        schedule=sched, vocab=8, embed_dim=4, depth=1, heads=1, width=8,
        mask_hidden=4, condition=True, dtype="float64",
    )
    rng = Rng(seed)
    model = ScalePredictor(cfg, rng)
    book = cd.Codebook(rng.normal((8, 4)))
    cond = rng.normal((4, *sched.final))
    counts: list[int] = []
    gated = []
    with no_grad():
        for k, (h, w) in enumerate(sched.resolutions):
            model.record_attention = True
            seq = model.build_sequence(gated, cond[None])
            logits = model.forward(seq)[k]
            rec = model.take_attention_record()
            model.record_attention = False
            counts.append(rec.layers[0].shape[-1])
            toks = logits.data[0].argmax(axis=-1)
            if k < sched.K - 1:
                emb = Tensor(book.entries[toks].reshape(1, h * w, 4))
                guid = np.zeros(h * w)
                mask = model.mask_generator(emb, guid[None], k)
                gated.append(model.token_gate(emb, mask))
    return counts


def loglog_slope(xs: list[float], ys: list[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())
