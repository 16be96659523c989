"""Teacher-forced training, scale-by-scale autoregressive inference,
codebook fitting, and checkpoint plumbing.

Training follows the scale-wise teacher-forcing recipe: ground-truth
residual embeddings are gated by the guidance mask and form the context
for the next scale; one forward pass yields every scale's logits under
the block-causal mask; the token cross-entropy and the cumulative
consistency loss are optimized jointly with AdamW under cosine decay.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import codec as cd
from . import data as dt
from . import guidance as gd
from . import losses as ls
from .config import Config
from .model import PredictorConfig, ScalePredictor
from .ndcore import Rng, Tensor, no_grad


class PipelineError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Typed view of the flat config keys the training loop consumes."""

    steps: int
    batch: int
    lr: float
    weight_decay: float
    cosine: bool
    lam: float
    warmup_steps: int
    seed: int
    schedule: cd.ScaleSchedule
    checkpoint_every: int
    dtype: str
    cumulative: str
    stop_gradient: bool
    pixel_space: bool
    per_step_degrade: bool
    degrade_factor: int
    blur_range: tuple[float, float]
    noise_range: tuple[float, float]

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainConfig":
        if cfg["loss.cumulative"] not in ("ste", "soft"):
            raise ValueError(f"loss.cumulative must be 'ste' or 'soft', got {cfg['loss.cumulative']!r}")
        return cls(
            steps=cfg["train.steps"],
            batch=cfg["train.batch"],
            lr=cfg["train.lr"],
            weight_decay=cfg["train.weight_decay"],
            cosine=cfg["train.cosine"],
            lam=cfg["loss.lambda"],
            warmup_steps=cfg["loss.warmup_steps"],
            seed=cfg["train.seed"],
            schedule=cd.ScaleSchedule.square(cfg["schedule"]),
            checkpoint_every=cfg["train.checkpoint_every"],
            dtype=cfg["train.dtype"],
            cumulative=cfg["loss.cumulative"],
            stop_gradient=cfg["loss.stop_gradient"],
            pixel_space=cfg["loss.pixel_space"],
            per_step_degrade=cfg["degrade.per_step"],
            degrade_factor=cfg["degrade.factor"],
            blur_range=(cfg["degrade.blur_min"], cfg["degrade.blur_max"]),
            noise_range=(cfg["degrade.noise_min"], cfg["degrade.noise_max"]),
        )


# -- optimizer -------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D parameters
    (biases, norm gains, per-scale offsets)."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.params.step += 1
        t = self.params.step
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            upd = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and p.data.ndim > 1:
                upd += self.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from base to ~0 over ``total`` steps (step is 0-based)."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + np.cos(np.pi * step / total))


# -- codebook fitting -------------------------------------------------------------


def fit_pipeline_codebook(
    latents: list[np.ndarray],
    schedule: cd.ScaleSchedule,
    size: int,
    rng: Rng,
    iters: int = 30,
    polish_rounds: int = 1,
) -> cd.Codebook:
    """Shared codebook fit for the residual decomposition.

    Entries are allocated stage by stage (budget proportional to token
    count): each stage's running residuals are clustered with k-means and
    frozen before the next stage quantizes against the union, so fine
    stages get entries matched to what they will actually see. A final
    warm-started Lloyd polish over the full residual population keeps the
    variant with the lowest reconstruction error. Entries are padded by
    repeating the first entry if fewer distinct vectors exist than
    requested; padded entries are never selected by the lowest-index
    tie-break.
    """
    counts = np.array(schedule.token_counts(), dtype=np.float64)
    budgets = np.maximum(1, np.round(size * counts / counts.sum()).astype(int))
    while budgets.sum() > size:
        budgets[int(np.argmax(budgets))] -= 1

    latents = [np.asarray(z, dtype=np.float64) for z in latents]

    def stage_residuals(book: cd.Codebook | None, entries_so_far: list[np.ndarray]):
        """Per-scale residual maps for every latent, following the same
        per-scale chain the training targets use. When ``book`` is None the
        chain quantizes against the union built so far (cascade mode),
        yielding each stage's population just before its entries exist."""
        residuals_per_stage: list[list[np.ndarray]] = [[] for _ in schedule.resolutions]
        for z in latents:
            lookups: list[np.ndarray] = []
            for si, (h, w) in enumerate(schedule.resolutions):
                resid = cd.downsample(z, (h, w))
                for lm in lookups:
                    resid = resid - cd.upsample(lm, (h, w))
                residuals_per_stage[si].append(resid)
                quant_book = book if book is not None else cd.Codebook(
                    np.concatenate(entries_so_far, axis=0)
                )
                toks = cd.quantize(resid, quant_book)
                lookups.append(quant_book.lookup(toks))
        return residuals_per_stage

    entries: list[np.ndarray] = []
    carry = int(size - budgets.sum())
    per_image_lookups: list[list[np.ndarray]] = [[] for _ in latents]
    for si, (h, w) in enumerate(schedule.resolutions):
        downs = []
        for z, lookups in zip(latents, per_image_lookups):
            resid = cd.downsample(z, (h, w))
            for lm in lookups:
                resid = resid - cd.upsample(lm, (h, w))
            downs.append(resid)
        vecs = np.concatenate([m.reshape(m.shape[0], -1).T for m in downs], axis=0)
        n_distinct = np.unique(vecs, axis=0).shape[0]
        want = int(budgets[si]) + carry
        got = min(want, n_distinct)
        carry = want - got
        stage = cd.fit_codebook(downs, got, rng.child(si), iters=iters)
        entries.append(stage.entries)
        union = cd.Codebook(np.concatenate(entries, axis=0))
        for lookups, m in zip(per_image_lookups, downs):
            toks = cd.quantize(m, union)
            lookups.append(union.lookup(toks))

    merged = np.concatenate(entries, axis=0)
    if merged.shape[0] < size:
        merged = np.concatenate(
            [merged, np.repeat(merged[:1], size - merged.shape[0], axis=0)], axis=0
        )
    book = cd.Codebook(merged[:size])

    def recon_err(b: cd.Codebook) -> float:
        return float(
            sum(
                ((cd.reconstruct(cd.residual_decompose_per_scale(z, schedule, b), schedule, b) - z) ** 2).mean()
                for z in latents
            )
        )

    best, best_err = book, recon_err(book)
    for _ in range(polish_rounds):
        stages = stage_residuals(book, [])
        pop = np.concatenate(
            [m.reshape(m.shape[0], -1).T for maps in stages for m in maps], axis=0
        )
        book = cd.Codebook(cd.lloyd_refine(pop, book.entries, iters=iters))
        err = recon_err(book)
        if err < best_err:
            best, best_err = book, err
    return best


# -- bundle -----------------------------------------------------------------------


@dataclass
class Bundle:
    """Everything needed to run inference or analysis: the predictor, the
    frozen codec and codebook, and the config they were built under."""

    config: Config
    codec: cd.PatchCodec
    codebook: cd.Codebook
    model: ScalePredictor
    schedule: cd.ScaleSchedule
    step: int = 0
    rng_state: dict = field(default_factory=lambda: Rng(0).state())

    def save(self, path) -> None:
        buffers = dict(self.codec.state_arrays())
        buffers["codebook.entries"] = self.codebook.entries
        ckpt.save(
            path,
            step=self.step,
            rng_state=self.rng_state,
            digest=self.config.digest(),
            config_text=self.config.canonical_text(),
            buffers=buffers,
            params=self.model.params.state_arrays(),
        )

    @classmethod
    def load(cls, path, config: Config | None = None) -> "Bundle":
        blob = ckpt.load(path, expected_digest=config.digest() if config else None)
        cfg = Config.from_text(blob["config_text"]) if config is None else config
        codec = cd.PatchCodec.from_state(blob["buffers"])
        codebook = cd.Codebook(blob["buffers"]["codebook.entries"])
        model = build_model(cfg)
        model.params.load_arrays(blob["params"])
        model.params.step = blob["step"]
        return cls(
            config=cfg,
            codec=codec,
            codebook=codebook,
            model=model,
            schedule=model.schedule,
            step=blob["step"],
            rng_state=blob["rng_state"],
        )


def build_model(cfg: Config, rng: Rng | None = None) -> ScalePredictor:
    pcfg = PredictorConfig(
        schedule=cd.ScaleSchedule.square(cfg["schedule"]),
        vocab=cfg["codebook.size"],
        embed_dim=cfg["codec.dim"],
        depth=cfg["model.depth"],
        heads=cfg["model.heads"],
        width=cfg["model.width"],
        mlp_ratio=cfg["model.mlp_ratio"],
        mask_hidden=cfg["model.mask_hidden"],
        condition=cfg["model.condition"],
        dtype=cfg["train.dtype"],
    )
    return ScalePredictor(pcfg, rng if rng is not None else Rng(0).child(90))


# -- dataset preparation ------------------------------------------------------------


@dataclass
class PreparedData:
    """Per-image constants precomputed once before the training loop."""

    names: list[str]
    hr: list[np.ndarray]
    lr: list[np.ndarray]
    cond: list[np.ndarray]                # (C, H_K, W_K) float32
    guidance: list[list[np.ndarray]]      # per image, per scale (H_k*W_k,) float32
    r_tokens: list[list[np.ndarray]]      # residual target tokens per scale (H_k, W_k)
    u_tokens: list[list[np.ndarray]]      # full-scale target tokens per scale
    r_embed: list[list[np.ndarray]]       # residual embeddings (N_k, C) float32


def prepare_data(cfg: Config, codec: cd.PatchCodec, codebook: cd.Codebook,
                 model: ScalePredictor, hr_images: list[np.ndarray],
                 names: list[str], degrade_rng: Rng) -> PreparedData:
    sched = model.schedule
    dt32 = model.config.np_dtype
    entries32 = codebook.entries.astype(dt32)
    out = PreparedData(names=names, hr=[], lr=[], cond=[], guidance=[],
                       r_tokens=[], u_tokens=[], r_embed=[])
    for i, hr in enumerate(hr_images):
        lr = dt.degrade(
            hr, degrade_rng.child(i),
            factor=cfg["degrade.factor"],
            blur_range=(cfg["degrade.blur_min"], cfg["degrade.blur_max"]),
            noise_range=(cfg["degrade.noise_min"], cfg["degrade.noise_max"]),
        )
        z = codec.encode(hr)
        c = model.condition_encode(lr, codec)
        s = gd.laplacian_magnitude(lr)
        pyr = gd.guidance_pyramid(s, sched)
        r_toks = cd.residual_decompose_per_scale(z, sched, codebook)
        u_toks = cd.full_scale_targets(z, sched, codebook)
        out.hr.append(hr)
        out.lr.append(lr)
        out.cond.append(c.astype(dt32))
        out.guidance.append([g.reshape(-1).astype(dt32) for g in pyr])
        out.r_tokens.append(r_toks)
        out.u_tokens.append(u_toks)
        out.r_embed.append([entries32[t].reshape(-1, codebook.dim) for t in r_toks])
    return out


# -- training ------------------------------------------------------------------------


def train_step(
    model: ScalePredictor,
    codec: cd.PatchCodec,
    codebook: cd.Codebook,
    prepared: PreparedData,
    batch_idx: np.ndarray,
    tcfg: TrainConfig,
    optimizer: AdamW,
    lr_now: float,
    step_rng: Rng | None = None,
    lam_now: float | None = None,
) -> ls.LossBreakdown:
    """One teacher-forced update over the batch; returns the loss report.

    With per-step degradation enabled, ``step_rng`` drives fresh blur and
    noise draws for this step's conditioning inputs; targets always come
    from the clean HR latents.
    """
    sched = model.schedule
    K = sched.K
    dt32 = model.config.np_dtype
    lam_now = tcfg.lam if lam_now is None else lam_now

    if tcfg.per_step_degrade:
        if step_rng is None:
            raise PipelineError("per-step degradation requires a step rng")
        conds, guids = [], []
        for slot, i in enumerate(batch_idx):
            lr_img = dt.degrade(
                prepared.hr[i], step_rng.child(slot), tcfg.degrade_factor,
                tcfg.blur_range, tcfg.noise_range,
            )
            conds.append(model.condition_encode(lr_img, codec).astype(dt32))
            pyr = gd.guidance_pyramid(gd.laplacian_magnitude(lr_img), sched)
            guids.append([g.reshape(-1).astype(dt32) for g in pyr])
        cond = np.stack(conds) if model.config.condition else None
        guidance_of = lambda k: np.stack([g[k] for g in guids])
    else:
        cond = np.stack([prepared.cond[i] for i in batch_idx]) if model.config.condition else None
        guidance_of = lambda k: np.stack([prepared.guidance[i][k] for i in batch_idx])

    r_targets = [
        np.stack([prepared.r_tokens[i][k].reshape(-1) for i in batch_idx]) for k in range(K)
    ]
    u_targets = [
        np.stack([prepared.u_tokens[i][k] for i in batch_idx]) for k in range(K)
    ]

    gated = []
    for k in range(K - 1):
        emb = Tensor(np.stack([prepared.r_embed[i][k] for i in batch_idx]))
        mask = model.mask_generator(emb, guidance_of(k), k)
        gated.append(model.token_gate(emb, mask))

    seq = model.build_sequence(gated, cond)
    logits = model.forward(seq)

    ce_mean, per_ce, ce_sum = ls.token_cross_entropy(logits, r_targets)
    probs = ls.soft_probs(logits, stop_gradient=tcfg.stop_gradient or lam_now == 0.0)
    cums = [ls.cumulative_prediction(probs, codebook, sched, k + 1) for k in range(K)]
    if tcfg.cumulative == "ste":
        pred_tokens = [lg.data.argmax(axis=-1) for lg in logits]
        hard = _hard_cumulatives(pred_tokens, codebook, sched, model.config.np_dtype)
        cums = ls.straight_through_cumulative(cums, hard)
    if tcfg.pixel_space:
        cons_total, per_cons = _pixel_consistency(cums, u_targets, codec, codebook, model)
    else:
        cons_total, per_cons = ls.consistency_loss(cums, u_targets, codebook)
    total = ls.total_loss(ce_mean, cons_total, lam_now)

    report = ls.breakdown(ce_mean, per_ce, ce_sum, cons_total, per_cons, lam_now)

    model.params.zero_grad()
    total.backward()
    optimizer.step(lr=lr_now)
    return report


def _hard_cumulatives(pred_tokens, codebook, schedule, dtype):
    """Cumulative latents of the argmax tokens, per scale, batched:
    the direct upsample-and-sum mirror of the soft cumulative."""
    embeds = []
    out = []
    for k, (h, w) in enumerate(schedule.resolutions):
        b = pred_tokens[k].shape[0]
        e = codebook.entries[pred_tokens[k].reshape(b, h, w)].transpose(0, 3, 1, 2).astype(dtype)
        embeds.append(e)
        cum = None
        for em in embeds:
            up = cd.upsample(em, (h, w))
            cum = up if cum is None else cum + up
        out.append(cum)
    return out


def _pixel_consistency(cums, u_targets, codec, codebook, model):
    """Optional pixel-space variant of the consistency loss: compare the
    linearly decoded patches instead of latent vectors (untuned)."""
    from .ndcore import matmul

    dt32 = model.config.np_dtype
    w_dec = Tensor(codec.weight.astype(dt32))  # (C, patch_pixels)
    per = []
    total = None
    for cum, toks in zip(cums, u_targets):
        pred_pix = matmul(model._tokenized(cum), w_dec)
        ref = codebook.entries[toks].reshape(toks.shape[0], -1, codebook.dim)
        ref_pix = ref @ codec.weight
        d = pred_pix - Tensor(ref_pix.astype(dt32))
        term = (d * d).sum() * (1.0 / d.data.size)
        per.append(term)
        total = term if total is None else total + term
    return total, per


METRIC_BASE = ("step", "lr", "ce", "consistency", "total", "ce_sum")


def metric_header(K: int) -> list[str]:
    return list(METRIC_BASE) + [f"ce_s{k+1}" for k in range(K)] + [
        f"cons_s{k+1}" for k in range(K)
    ]


def train(cfg: Config, out_dir, log=print) -> Bundle:
    """Full training run: fit codec and codebook, train the predictor,
    write metrics.csv and checkpoints under ``out_dir``."""
    cfg.validate_for_training()
    tcfg = TrainConfig.from_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    root = Rng(tcfg.seed)
    hr_images, names = dt.load_folder(cfg["data.dir"], cfg["data.channels"])
    for im, name in zip(hr_images, names):
        if im.shape[1:] != (cfg["data.hr_size"], cfg["data.hr_size"]):
            raise PipelineError(f"{name}: expected {cfg['data.hr_size']}px square HR image, got {im.shape[1:]}")

    codec = cd.PatchCodec.orthogonal(
        root.child(1), patch=cfg["codec.patch"], in_channels=cfg["data.channels"], dim=cfg["codec.dim"]
    )
    latents = [codec.encode(im) for im in hr_images]
    codebook = fit_pipeline_codebook(
        latents, tcfg.schedule, cfg["codebook.size"], root.child(2),
        iters=cfg["codebook.iters"], polish_rounds=cfg["codebook.polish"],
    )
    model = build_model(cfg, root.child(3))
    prepared = prepare_data(cfg, codec, codebook, model, hr_images, names, root.child(4))

    optimizer = AdamW(model.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sampler = root.child(5)
    degrade_root = root.child(6)
    bundle = Bundle(cfg, codec, codebook, model, tcfg.schedule)

    t0 = time.perf_counter()
    rows = []
    for step in range(tcfg.steps):
        idx = sampler.integers(0, len(hr_images), (tcfg.batch,))
        lr_now = cosine_lr(tcfg.lr, step, tcfg.steps) if tcfg.cosine else tcfg.lr
        step_rng = degrade_root.child(step) if tcfg.per_step_degrade else None
        lam_now = tcfg.lam
        if tcfg.warmup_steps > 0:
            lam_now = tcfg.lam * min(1.0, (step + 1) / tcfg.warmup_steps)
        try:
            report = train_step(model, codec, codebook, prepared, idx, tcfg, optimizer,
                                lr_now, step_rng=step_rng, lam_now=lam_now)
        except FloatingPointError as e:
            raise FloatingPointError(
                f"aborting at step {step} (lr {lr_now:.3e}, batch {list(idx)}): {e}"
            ) from e
        rows.append(
            [step, f"{lr_now:.8e}", f"{report.ce:.8e}", f"{report.consistency:.8e}",
             f"{report.total:.8e}", f"{report.ce_sum:.8e}"]
            + [f"{v:.8e}" for v in report.per_scale_ce]
            + [f"{v:.8e}" for v in report.per_scale_consistency]
        )
        if (step + 1) % max(1, tcfg.steps // 10) == 0:
            log(f"step {step + 1}/{tcfg.steps}  ce {report.ce:.4f}  consistency {report.consistency:.5f}")
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0 and step + 1 < tcfg.steps:
            bundle.step = step + 1
            bundle.rng_state = sampler.state()
            bundle.save(out / f"checkpoint_{step + 1:06d}.avar")

    bundle.step = tcfg.steps
    bundle.rng_state = sampler.state()
    bundle.save(out / "model.avar")

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metric_header(tcfg.schedule.K))
        w.writerows(rows)
    log(f"trained {tcfg.steps} steps in {time.perf_counter() - t0:.1f}s -> {out / 'model.avar'}")
    return bundle


# -- inference -----------------------------------------------------------------------


@dataclass
class InferResult:
    image: np.ndarray                 # (C, H, W) in [0, 1]
    tokens: list[np.ndarray]          # predicted token maps per scale
    latent: np.ndarray                # final reconstructed latent
    scale_seconds: list[float]


def infer(
    bundle: Bundle,
    lr_image: np.ndarray,
    mode: str = "greedy",
    top_k: int = 0,
    rng: Rng | None = None,
    inject: dict | None = None,
) -> InferResult:
    """Scale-by-scale autoregressive reconstruction of the SR image.

    Greedy argmax by default; ``mode="sample"`` draws from the top-k
    logits and requires an rng. ``inject`` optionally perturbs the
    context entering one scale: {"scale": 1-based int, "sigma": float,
    "rng": Rng, "point": "context"|"pre_gate"}.
    """
    model, codec, codebook, sched = bundle.model, bundle.codec, bundle.codebook, bundle.schedule
    cfg = bundle.config
    expected = (cfg["data.hr_size"] // cfg["degrade.factor"],) * 2
    lr_image = np.asarray(lr_image, dtype=np.float64)
    if lr_image.shape[1:] != expected:
        raise PipelineError(f"expected LR of shape {expected}, got {lr_image.shape[1:]}")
    if mode not in ("greedy", "sample"):
        raise PipelineError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise PipelineError("sampling mode requires an rng")

    dt32 = model.config.np_dtype
    entries32 = codebook.entries.astype(dt32)
    cond = model.condition_encode(lr_image, codec).astype(dt32)
    pyr = [g.reshape(-1).astype(dt32) for g in gd.guidance_pyramid(gd.laplacian_magnitude(lr_image), sched)]

    inj = None
    if inject is not None and inject.get("sigma", 0.0) != 0.0:
        inj = {
            "scale": int(inject["scale"]) - 1,
            "sigma": float(inject["sigma"]),
            "rng": inject["rng"],
            "point": inject.get("point", "context"),
        }

    tokens: list[np.ndarray] = []
    gated: list[Tensor] = []
    times: list[float] = []
    with no_grad():
        for k, (h, w) in enumerate(sched.resolutions):
            t0 = time.perf_counter()
            seq_inject = None
            if inj is not None and inj["point"] == "context" and inj["scale"] == k:
                seq_inject = {"scale": k, "sigma": inj["sigma"], "rng": inj["rng"]}
            seq = model.build_sequence(gated, cond[None], inject=seq_inject)
            logits = model.forward(seq)[k].data[0]  # (N_k, vocab)
            if mode == "greedy":
                pick = logits.argmax(axis=-1)
            else:
                kk = top_k if top_k > 0 else logits.shape[-1]
                pick = _top_k_sample(logits, kk, rng)
            tokens.append(pick.reshape(h, w).astype(np.int64))

            emb_np = entries32[pick].reshape(1, h * w, codebook.dim)
            if inj is not None and inj["point"] == "pre_gate" and inj["scale"] == k:
                rms = float(np.sqrt((emb_np.astype(np.float64) ** 2).mean()))
                emb_np = emb_np + (inj["sigma"] * rms) * inj["rng"].normal(emb_np.shape).astype(dt32)
            if k < sched.K - 1:
                emb = Tensor(emb_np)
                mask = model.mask_generator(emb, pyr[k][None], k)
                gated.append(model.token_gate(emb, mask))
            times.append(time.perf_counter() - t0)

    latent = cd.reconstruct(tokens, sched, codebook)
    image = np.clip(codec.decode(latent), 0.0, 1.0)
    return InferResult(image=image, tokens=tokens, latent=latent, scale_seconds=times)


def _top_k_sample(logits: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    out = np.empty(logits.shape[0], dtype=np.int64)
    for i, row in enumerate(logits):
        top = np.argsort(row)[::-1][:k]
        z = row[top] - row[top].max()
        p = np.exp(z)
        p /= p.sum()
        out[i] = top[rng.choice_weighted(p)]
    return out
