"""Acceptance suite: one test per criterion, each printing a PASS line
with its measured numbers. Heavy fixtures (trained models) are module
scoped; every randomized piece is seeded, so reruns are reproducible on
a fixed thread count.
"""

import csv
import time

import numpy as np
import pytest

from nextscale import analysis as an
from nextscale import codec as cd
from nextscale import data as dt
from nextscale import guidance as gd
from nextscale import losses as ls
from nextscale import pipeline as pl
from nextscale.config import Config
from nextscale.model import AttentionRecord, PredictorConfig, ScalePredictor
from nextscale.ndcore import ParamStore, Rng, Tensor, finite_diff_check, no_grad

SCHEDULE8 = cd.ScaleSchedule.square([1, 2, 3, 4, 6, 8])


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"\n[criterion {criterion:02d}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


# -- criterion 1: quantizer oracle equivalence ---------------------------------


def test_criterion_01_quantizer_matches_exhaustive_scan():
    t0 = time.perf_counter()
    rng = Rng(101)
    book = cd.Codebook(rng.normal((64, 16)))
    vecs = rng.normal((1000, 16))
    latent = vecs.T.reshape(16, 1000, 1)
    got = cd.quantize(latent, book).reshape(-1)

    want = np.empty(1000, dtype=np.int64)
    for i, v in enumerate(vecs):
        best, best_d = 0, np.inf
        for j, e in enumerate(book.entries):
            d = np.sum((v - e) ** 2)
            if d < best_d:
                best, best_d = j, d
        want[i] = best
    elapsed = time.perf_counter() - t0
    mismatches = int((got != want).sum())
    report(1, mismatches == 0 and elapsed < 5.0,
           f"{mismatches} mismatches on 1000 vectors, |V|=64, {elapsed:.2f}s")


# -- criterion 2: telescoping monotonicity --------------------------------------


def test_criterion_02_telescoping_monotonicity():
    t0 = time.perf_counter()
    rng = Rng(202)
    latents = []
    for i in range(100):
        r = rng.child(i)
        latents.append(cd.upsample(r.normal((16, 4, 4)), (8, 8)) + 0.3 * r.normal((16, 8, 8)))
    book = cd.fit_codebook(latents, 64, rng.child(777), iters=20)
    worst_rise = -np.inf
    for f in latents:
        toks = cd.residual_decompose(f, SCHEDULE8, book)
        errs = [
            np.linalg.norm(f - cd.reconstruct(toks[: k + 1], SCHEDULE8, book, SCHEDULE8.K))
            for k in range(SCHEDULE8.K)
        ]
        for a, b in zip(errs, errs[1:]):
            worst_rise = max(worst_rise, b - a)
    elapsed = time.perf_counter() - t0
    report(2, worst_rise <= 1e-6 and elapsed < 10.0,
           f"worst error rise {worst_rise:.3g} (slack 1e-6) over 100 latents, {elapsed:.2f}s")


# -- criterion 3: gradient integrity ---------------------------------------------


def test_criterion_03_gradient_integrity():
    t0 = time.perf_counter()
    results = {}

    sched = cd.ScaleSchedule.square([1, 2])
    cfg = PredictorConfig(schedule=sched, vocab=4, embed_dim=2, depth=2, heads=2,
                          width=16, mlp_ratio=2.0, mask_hidden=4, dtype="float64")
    model = ScalePredictor(cfg, Rng(303))
    rng = Rng(304)
    book = cd.Codebook(rng.normal((4, 2)))
    cond = rng.normal((1, 2, 2, 2))
    guid = [rng.uniform((1, h * w)) for h, w in sched.resolutions]
    toks = [rng.integers(0, 4, (1, h, w)) for h, w in sched.resolutions]
    emb0 = rng.normal((1, 4, 2))

    # gate-only view: the mask/gate losses touch no transformer weights,
    # so their sweeps cover just the gate parameters
    gate_params = ParamStore()
    for name, tensor in model.params.items():
        if name.startswith("gate."):
            gate_params._params[name] = tensor

    def f_mask(params):
        mask = model.mask_generator(Tensor(emb0), guid[1], 1)
        return (mask * mask).sum() * 1e-3

    def f_gate(params):
        emb = Tensor(emb0)
        mask = model.mask_generator(emb, guid[1], 1)
        gated = model.token_gate(emb, mask)
        return (gated * gated).sum() * 1e-3

    def forward_logits():
        gated = []
        for k, (h, w) in enumerate(sched.resolutions[:-1]):
            emb = Tensor(book.entries[toks[k]].reshape(1, h * w, 2))
            mask = model.mask_generator(emb, guid[k], k)
            gated.append(model.token_gate(emb, mask))
        return model.forward(model.build_sequence(gated, cond))

    def f_transformer(params):
        logits = forward_logits()
        return sum((lg * lg).sum() for lg in logits) * 1e-4

    def f_ce(params):
        ce, _, _ = ls.token_cross_entropy(forward_logits(), [t.reshape(1, -1) for t in toks])
        return ce * 1e-3

    def f_consistency(params):
        probs = ls.soft_probs(forward_logits())
        cums = [ls.cumulative_prediction(probs, book, sched, k + 1) for k in range(2)]
        total, _ = ls.consistency_loss(cums, toks, book)
        return total * 1e-3

    for name, fn, ps in (("mask_generator", f_mask, gate_params),
                         ("token_gate", f_gate, gate_params),
                         ("transformer", f_transformer, model.params),
                         ("ce", f_ce, model.params),
                         ("consistency", f_consistency, model.params)):
        results[name] = finite_diff_check(fn, ps, 1e-5)

    elapsed = time.perf_counter() - t0
    worst = max(results.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in results.items())
    report(3, worst < 1e-4 and elapsed < 120.0, f"{detail} ({elapsed:.1f}s)")


# -- criterion 4: block causality -------------------------------------------------


def test_criterion_04_block_causality_exact():
    t0 = time.perf_counter()
    sched = cd.ScaleSchedule.square([1, 2, 3, 4])
    cfg = PredictorConfig(schedule=sched, vocab=16, embed_dim=4, depth=2, heads=2,
                          width=32, mask_hidden=8, dtype="float32")
    model = ScalePredictor(cfg, Rng(404))
    rng = Rng(405)
    book = cd.Codebook(rng.normal((16, 4)))
    cond = rng.normal((2, 4, 4, 4), dtype=np.float32)
    gated = []
    for k, (h, w) in enumerate(sched.resolutions[:-1]):
        emb = Tensor(book.entries[rng.integers(0, 16, (2, h, w))].reshape(2, h * w, 4).astype(np.float32))
        mask = model.mask_generator(emb, rng.uniform((2, h * w), dtype=np.float32), k)
        gated.append(model.token_gate(emb, mask))
    with no_grad():
        seq = model.build_sequence(gated, cond)
        base = model.forward(seq)
        offsets = sched.offsets()
        checked = 0
        for k in range(sched.K - 1):
            cut = offsets[k + 1]
            for trial in range(20):
                perturbed = seq.data.copy()
                perturbed[:, cut:, :] += Rng(1000 + 97 * k + trial).normal(
                    perturbed[:, cut:, :].shape, dtype=np.float32) * 8
                out = model.forward(Tensor(perturbed))
                for j in range(k + 1):
                    assert np.array_equal(base[j].data, out[j].data), (k, trial, j)
                    checked += 1
    elapsed = time.perf_counter() - t0
    report(4, elapsed < 30.0,
           f"{checked} earlier-block logit comparisons bit-identical under future perturbations, {elapsed:.1f}s")


# -- criterion 5: loss identities ---------------------------------------------------


def test_criterion_05_loss_identities():
    rng = Rng(505)
    # uniform CE == ln(64)
    logits = [Tensor(np.zeros((1, h * w, 64))) for h, w in SCHEDULE8.resolutions]
    targets = [np.zeros((1, h * w), dtype=int) for h, w in SCHEDULE8.resolutions]
    mean, _, _ = ls.token_cross_entropy(logits, targets)
    ce_gap = abs(float(mean.data) - np.log(64))

    # one-hot cumulative == hard reconstruction, bit for bit
    book = cd.Codebook(rng.normal((64, 16)))
    toks = [rng.integers(0, 64, (h, w)) for h, w in SCHEDULE8.resolutions]
    probs = []
    for t, (h, w) in zip(toks, SCHEDULE8.resolutions):
        p = np.zeros((1, h * w, 64))
        p[0, np.arange(h * w), t.reshape(-1)] = 1.0
        probs.append(Tensor(p))
    bit_exact = all(
        np.array_equal(
            ls.cumulative_prediction(probs, book, SCHEDULE8, k).data[0],
            cd.reconstruct(toks[:k], SCHEDULE8, book, target_scale=k),
        )
        for k in range(1, SCHEDULE8.K + 1)
    )

    # total == ce + weight * consistency, exactly, for the swept weights
    ce = Tensor(np.float64(1.375))
    cons = Tensor(np.float64(0.625))
    exact = all(
        float(ls.total_loss(ce, cons, lam).data) == 1.375 + lam * 0.625
        for lam in (0.0, 0.5, 1.0, 2.0)
    )
    report(5, ce_gap < 1e-6 and bit_exact and exact,
           f"uniform CE gap {ce_gap:.2e}, one-hot collapse bit-exact={bit_exact}, "
           f"total identity exact for lambda in {{0, 0.5, 1, 2}}={exact}")


# -- criteria 6..8, 11: trained runs -----------------------------------------------


@pytest.fixture(scope="module")
def memorization_run(tmp_path_factory):
    """Criterion 6 setup: 4 toy HR images, seed 7, shipped defaults."""
    root = tmp_path_factory.mktemp("memorization")
    dt.make_toyset(4, 64, 7, root / "toys")
    cfg = Config({"data.dir": str(root / "toys"), "train.seed": 7})
    t0 = time.perf_counter()
    bundle = pl.train(cfg, root / "run", log=lambda *a: None)
    train_seconds = time.perf_counter() - t0
    return bundle, root, train_seconds


def test_criterion_06_memorization_fitness(memorization_run):
    bundle, root, train_seconds = memorization_run
    with open(root / "run" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    ce_halved = float(rows[499]["ce"]) <= 0.5 * float(rows[0]["ce"])
    assert ce_halved, "loss must drop by >= 50% within 500 steps at defaults"

    imgs, names = dt.load_folder(root / "toys")
    droot = Rng(7).child(4)
    min_acc, min_psnr = np.inf, np.inf
    for i, hr in enumerate(imgs):
        lr = dt.degrade(hr, droot.child(i), 4, (0.2, 1.5), (0.0, 0.05))
        res = pl.infer(bundle, lr)
        z = bundle.codec.encode(hr)
        r_gt = cd.residual_decompose_per_scale(z, bundle.schedule, bundle.codebook)
        for p, g in zip(res.tokens, r_gt):
            min_acc = min(min_acc, float((p == g).mean()))
        min_psnr = min(min_psnr, dt.psnr(res.image, hr))
    nominal = min_acc >= 0.90 and min_psnr >= 30.0
    # thresholds re-baselined once with the shipped seed (observed: token
    # accuracy 1.0 at every scale, min PSNR 75.0 dB) and frozen with margin
    frozen = min_acc >= 0.999 and min_psnr >= 60.0
    report(6, nominal and frozen and train_seconds < 600.0,
           f"min per-scale token accuracy {min_acc:.4f} (>=0.90 nominal, >=0.999 frozen), "
           f"min PSNR {min_psnr:.1f} dB (>=30 nominal, >=60 frozen), train {train_seconds:.0f}s < 600s")


@pytest.fixture(scope="module")
def paired_runs(tmp_path_factory):
    """Criteria 7/8 setup: identical seed/data, consistency weight 1 vs 0,
    degradations resampled per step (the regime where the full-scale
    supervision has something to stabilize)."""
    root = tmp_path_factory.mktemp("paired")
    dt.make_toyset(16, 64, 7, root / "toys")
    bundles = {}
    for lam in (1.0, 0.0):
        cfg = Config({
            "data.dir": str(root / "toys"), "train.seed": 7, "train.steps": 1200,
            "loss.lambda": lam, "model.depth": 2, "model.width": 64,
            "degrade.per_step": True, "train.checkpoint_every": 0,
        })
        bundles[lam] = pl.train(cfg, root / f"run_lam{lam:g}", log=lambda *a: None)
    imgs, _ = dt.load_folder(root / "toys")
    droot = Rng(7).child(4)
    lrs = [dt.degrade(im, droot.child(i), 4) for i, im in enumerate(imgs)]
    return bundles, imgs, lrs


def test_criterion_07_consistency_training_lowers_coarse_error(paired_runs):
    bundles, imgs, lrs = paired_runs
    half = SCHEDULE8.K // 2
    mse = {
        lam: an.per_scale_mse(bundles[lam], imgs, lrs).mse for lam in (1.0, 0.0)
    }
    m1 = float(np.mean(mse[1.0][:half]))
    m0 = float(np.mean(mse[0.0][:half]))
    report(7, m1 < m0,
           f"coarse-half cumulative MSE {m1:.5f} (weight 1) vs {m0:.5f} (weight 0), strictly lower={m1 < m0}")


def test_criterion_08_perturbation_robustness(paired_runs):
    bundles, imgs, lrs = paired_runs
    scales = [1, 2, 3]
    deg = {}
    for lam in (1.0, 0.0):
        rep = an.perturbation_probe(bundles[lam], lrs, scales, [0.0, 0.5], Rng(808),
                                    point="pre_gate", draws=4)
        assert all(rep.latent_mse[(s, 0.0)] == 0.0 for s in scales), "sigma=0 must degrade nothing"
        deg[lam] = [rep.latent_mse[(s, 0.5)] for s in scales]
    agg1 = float(np.mean(deg[1.0]))
    agg0 = float(np.mean(deg[0.0]))
    report(8, agg1 <= agg0,
           f"sigma=0.5 mean latent-MSE degradation over scales {scales}: "
           f"weight1 {agg1:.5f} (per-scale {['%.4f' % v for v in deg[1.0]]}) <= "
           f"weight0 {agg0:.5f} (per-scale {['%.4f' % v for v in deg[0.0]]}); sigma=0 exact no-op")


# -- criterion 9: complexity claim ---------------------------------------------------


def test_criterion_09_cost_model_quartic_and_empirical_match():
    t0 = time.perf_counter()
    models = [an.cost_model(2, k) for k in range(3, 8)]
    slope = an.loglog_slope(
        [m.ratio ** (m.steps - 1) for m in models], [m.total_cost for m in models]
    )
    counts = an.measure_attention_tokens(2, 3)
    analytic = an.cost_model(2, 3).tokens_per_step
    elapsed = time.perf_counter() - t0
    report(9, 3.5 <= slope <= 4.5 and counts == analytic and elapsed < 60.0,
           f"log-log slope {slope:.3f} in [3.5, 4.5]; empirical tokens {counts} == analytic {analytic}; {elapsed:.1f}s")


# -- criterion 10: metric fixtures ----------------------------------------------------


def test_criterion_10_metric_fixtures():
    img = dt.toy_image(Rng(10).child(101), "strokes", 32)
    iou_same = an.edge_iou(img, img)

    pred = np.full((1, 16, 16), 0.5)
    gt = np.zeros((1, 16, 16))
    gt[0, :, 8:] = 1.0
    iou_disjoint = an.edge_iou(pred, gt)

    sched = cd.ScaleSchedule.square([1, 2])
    L = sched.total_tokens()
    att = np.eye(L)[None, None]
    rec = AttentionRecord(layers=[att], offsets=sched.offsets(),
                          token_counts=sched.token_counts(), schedule=sched)
    loc = an.attention_locality(rec, sched)
    report(10, iou_same == 1.0 and iou_disjoint == 0.0 and (loc == 0.0).all(),
           f"edge IoU identical={iou_same}, disjoint={iou_disjoint}, one-hot self-attention distance max={loc.max()}")


# -- criterion 11: reproducibility -----------------------------------------------------


def test_criterion_11_reproducibility(tmp_path):
    dt.make_toyset(4, 64, 7, tmp_path / "toys")
    values = {
        "data.dir": str(tmp_path / "toys"), "train.seed": 7, "train.steps": 6,
        "train.batch": 2, "model.depth": 2, "model.width": 32, "model.heads": 2,
        "codebook.iters": 8, "codebook.polish": 0, "train.checkpoint_every": 0,
    }
    pl.train(Config(dict(values)), tmp_path / "r1", log=lambda *a: None)
    pl.train(Config(dict(values)), tmp_path / "r2", log=lambda *a: None)
    csv_identical = (tmp_path / "r1" / "metrics.csv").read_bytes() == (
        tmp_path / "r2" / "metrics.csv"
    ).read_bytes()

    bundle = pl.Bundle.load(tmp_path / "r1" / "model.avar")
    imgs, _ = dt.load_folder(tmp_path / "toys")
    lr = dt.degrade(imgs[0], Rng(7).child(4).child(0), 4)
    before = pl.infer(bundle, lr)
    reloaded = pl.Bundle.load(tmp_path / "r1" / "model.avar")
    after = pl.infer(reloaded, lr)
    forward_exact = np.array_equal(before.image, after.image) and all(
        np.array_equal(a, b) for a, b in zip(before.tokens, after.tokens)
    )
    report(11, csv_identical and forward_exact,
           f"metrics CSVs byte-identical={csv_identical}, checkpoint reload forward bit-exact={forward_exact}")
