"""Command-line interface.

Verbs: make-toyset, train, infer, eval, probe, bench, dump-guidance.
Every randomized verb takes an explicit --seed (no wall-clock seeding),
every failure exits nonzero with a one-line cause, and --threads 1 pins
the math libraries to a single thread for bit-reproducible runs. Heavy
imports happen after thread pinning, inside the verb handlers.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_threads(argv: list[str]) -> None:
    """Set thread env vars from --threads before numpy is imported."""
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
        else:
            continue
        for var in _THREAD_VARS:
            os.environ[var] = str(int(n))
        return


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help="thread count for math libraries (1 guarantees determinism)")
    if seed:
        p.add_argument("--seed", type=int, required=False, default=None,
                       help="explicit random seed (required for randomized verbs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nextscale",
        description="Next-scale visual autoregression at desk scale: "
                    "training, inference, and diagnostics on toy images.",
    )
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-toyset", help="generate a synthetic HR image folder")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    _add_common(p)
    p.set_defaults(func=cmd_make_toyset)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="config file of 'section.key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one LR image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="LR image (.pgm or .png)")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--top-k", type=int, default=0, help="top-k for sampling mode")
    p.add_argument("--dump-tokens", action="store_true",
                   help="also write the predicted token index grids as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an HR folder, or compare edge maps")
    p.add_argument("--checkpoint", help="trained checkpoint (omit for --edge-iou folder mode)")
    p.add_argument("--data", help="HR image folder (degraded internally with --seed)")
    p.add_argument("--edge-iou", action="store_true", help="report Canny edge IoU")
    p.add_argument("--pred", help="folder of predictions (edge-IoU folder mode)")
    p.add_argument("--gt", help="folder of references (edge-IoU folder mode)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="diagnostics on a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="HR image folder")
    p.add_argument("--out", required=True)
    p.add_argument("--attention", action="store_true", help="dump attention record and locality stats")
    p.add_argument("--per-scale-mse", action="store_true", help="teacher-forced cumulative error per scale")
    p.add_argument("--perturb", action="store_true", help="noise-injection robustness probe")
    p.add_argument("--scales", default="1,2,3", help="scales to inject (comma list, 1-based)")
    p.add_argument("--sigmas", default="0,0.25,0.5", help="noise levels (comma list)")
    p.add_argument("--inject-point", choices=("context", "pre_gate"), default="context")
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", help="generation cost model for uniform-ratio schedules")
    p.add_argument("--a", type=int, required=True, help="resolution ratio between steps")
    p.add_argument("--k", type=int, required=True, help="number of autoregressive steps")
    p.add_argument("--k-range", default=None, metavar="KMIN,KMAX",
                   help="also emit totals over a K range plus the log-log slope")
    p.add_argument("--empirical", action="store_true",
                   help="cross-check token counts against a real forward pass")
    p.add_argument("--out", default=None, help="optional directory for cost CSV and figure")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-guidance", help="write the Laplacian guidance pyramid as PGM files")
    p.add_argument("--input", required=True, help="image to analyze")
    p.add_argument("--schedule", default=None, help="comma list of square scale sides")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_dump_guidance)

    return ap


def _require_seed(args) -> int:
    if args.seed is None:
        raise SystemExit("error: this verb is randomized and requires an explicit --seed")
    return args.seed


# -- verb handlers ---------------------------------------------------------------


def cmd_make_toyset(args) -> int:
    from . import data as dt

    seed = _require_seed(args)
    manifest = dt.make_toyset(args.n, args.size, seed, args.out, fmt=args.format)
    print(f"wrote {args.n} images and {manifest}")
    return 0


def _load_config(args):
    from .config import Config

    cfg = Config.from_file(args.config) if args.config else Config()
    cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def cmd_train(args) -> int:
    from . import pipeline as pl

    cfg = _load_config(args)
    bundle = pl.train(cfg, args.out)
    from . import report

    report.training_curves(Path(args.out) / "metrics.csv", Path(args.out) / "metrics.png")
    print(f"checkpoint: {Path(args.out) / 'model.avar'} (step {bundle.step})")
    return 0


def cmd_infer(args) -> int:
    import numpy as np

    from . import data as dt
    from . import pipeline as pl
    from . import report
    from .ndcore import Rng

    bundle = pl.Bundle.load(args.checkpoint)
    lr = dt.load_image(args.input, channels=bundle.config["data.channels"])
    rng = None
    if args.mode == "sample":
        rng = Rng(_require_seed(args))
    res = pl.infer(bundle, lr, mode=args.mode, top_k=args.top_k, rng=rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    sr_path = out / f"{stem}_sr.pgm" if lr.shape[0] == 1 else out / f"{stem}_sr.png"
    dt.save_image(sr_path, res.image)
    for k, seconds in enumerate(res.scale_seconds):
        h, w = bundle.schedule.resolutions[k]
        print(f"scale {k + 1} ({h}x{w}): {seconds * 1000:.1f} ms")
    if args.dump_tokens:
        for k, toks in enumerate(res.tokens):
            report.write_csv(out / f"{stem}_tokens_s{k + 1}.csv",
                             [f"c{j}" for j in range(toks.shape[1])], toks.tolist())
    print(f"wrote {sr_path}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import analysis as an
    from . import data as dt
    from . import report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.edge_iou and args.pred and args.gt:
        preds, pnames = dt.load_folder(args.pred)
        gts, gnames = dt.load_folder(args.gt)
        if len(preds) != len(gts):
            raise SystemExit(f"error: {len(preds)} predictions vs {len(gts)} references")
        rows = [
            [pn, gn, an.edge_iou(p, g)]
            for (p, pn), (g, gn) in zip(zip(preds, pnames), zip(gts, gnames))
        ]
        report.write_csv(out / "edge_iou.csv", ("pred", "gt", "edge_iou"), rows)
        avg = float(np.mean([r[2] for r in rows]))
        print(f"edge IoU average {avg:.6f} over {len(rows)} pairs")
        return 0

    if not (args.checkpoint and args.data):
        raise SystemExit("error: eval needs --checkpoint and --data (or --edge-iou with --pred/--gt)")

    from . import codec as cd
    from . import pipeline as pl
    from .ndcore import Rng

    seed = _require_seed(args)
    bundle = pl.Bundle.load(args.checkpoint)
    cfg = bundle.config
    hrs, names = dt.load_folder(args.data, cfg["data.channels"])
    degrade_rng = Rng(seed)
    rows = []
    fig_rows = []
    for i, (hr, name) in enumerate(zip(hrs, names)):
        lr = dt.degrade(
            hr, degrade_rng.child(i), cfg["degrade.factor"],
            (cfg["degrade.blur_min"], cfg["degrade.blur_max"]),
            (cfg["degrade.noise_min"], cfg["degrade.noise_max"]),
        )
        res = pl.infer(bundle, lr)
        z = bundle.codec.encode(hr)
        r_gt = cd.residual_decompose_per_scale(z, bundle.schedule, bundle.codebook)
        accs = [float((p == g).mean()) for p, g in zip(res.tokens, r_gt)]
        p = dt.psnr(res.image, hr)
        iou = an.edge_iou(res.image, hr) if args.edge_iou else ""
        dt.save_image(out / f"{Path(name).stem}_sr.pgm", res.image)
        rows.append([name, f"{p:.4f}", iou] + [f"{a:.4f}" for a in accs])
        fig_rows.append((name, p, iou if iou != "" else 0.0))
    header = ["image", "psnr_db", "edge_iou"] + [
        f"token_acc_s{k + 1}" for k in range(bundle.schedule.K)
    ]
    report.write_csv(out / "eval.csv", header, rows)
    report.eval_summary_figure(fig_rows, out / "eval.png")
    print(f"evaluated {len(rows)} images -> {out / 'eval.csv'}")
    return 0


def cmd_probe(args) -> int:
    import numpy as np

    from . import analysis as an
    from . import data as dt
    from . import guidance as gd
    from . import pipeline as pl
    from . import report
    from .ndcore import Rng, Tensor, no_grad

    seed = _require_seed(args)
    bundle = pl.Bundle.load(args.checkpoint)
    cfg = bundle.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hrs, names = dt.load_folder(args.data, cfg["data.channels"])
    degrade_rng = Rng(seed)
    lrs = [
        dt.degrade(
            hr, degrade_rng.child(i), cfg["degrade.factor"],
            (cfg["degrade.blur_min"], cfg["degrade.blur_max"]),
            (cfg["degrade.noise_min"], cfg["degrade.noise_max"]),
        )
        for i, hr in enumerate(hrs)
    ]
    did = []

    if args.per_scale_mse:
        profile = an.per_scale_mse(bundle, hrs, lrs)
        report.write_csv(out / "per_scale_mse.csv", an.ScaleErrorProfile.HEADER, profile.rows())
        report.scale_profile_figure(profile, cfg["schedule"], out / "per_scale_mse.png")
        did.append("per-scale-mse")

    if args.perturb:
        scales = [int(s) for s in str(args.scales).split(",") if s]
        sigmas = [float(s) for s in str(args.sigmas).split(",") if s]
        rep = an.perturbation_probe(bundle, lrs, scales, sigmas, Rng(seed).child(7),
                                    point=args.inject_point)
        report.write_csv(out / "perturbation.csv", an.PerturbationReport.HEADER, rep.rows())
        report.perturbation_figure(rep, out / "perturbation.png")
        did.append("perturb")

    if args.attention:
        model = bundle.model
        sched = bundle.schedule
        hr, lr = hrs[0], lrs[0]
        from . import codec as cd

        z = bundle.codec.encode(hr)
        r_gt = cd.residual_decompose_per_scale(z, sched, bundle.codebook)
        dt32 = model.config.np_dtype
        entries32 = bundle.codebook.entries.astype(dt32)
        cond = model.condition_encode(lr, bundle.codec).astype(dt32)
        pyr = gd.guidance_pyramid(gd.laplacian_magnitude(lr), sched)
        gated = []
        with no_grad():
            for k, toks in enumerate(r_gt[:-1]):
                emb = Tensor(entries32[toks].reshape(1, -1, bundle.codebook.dim))
                mask = model.mask_generator(emb, pyr[k].reshape(-1).astype(dt32)[None], k)
                gated.append(model.token_gate(emb, mask))
            model.record_attention = True
            model.forward(model.build_sequence(gated, cond[None]))
            rec = model.take_attention_record()
            model.record_attention = False
        rows = []
        for li, att in enumerate(rec.layers):
            a = att[0]
            for hi in range(a.shape[0]):
                nz = np.nonzero(a[hi])
                for q, kk in zip(*nz):
                    rows.append([li, hi, int(q), int(kk), f"{a[hi, q, kk]:.8e}"])
        report.write_csv(out / "attention.csv", ("layer", "head", "query", "key", "weight"), rows)
        dist = an.attention_locality(rec, sched)
        loc_rows = [
            [li, hi, bi + 1, f"{dist[li, hi, bi]:.6f}"]
            for li in range(dist.shape[0])
            for hi in range(dist.shape[1])
            for bi in range(dist.shape[2])
        ]
        report.write_csv(out / "attention_locality.csv",
                         ("layer", "head", "scale", "mean_distance"), loc_rows)
        report.locality_figure(dist, out / "attention_locality.png")
        did.append("attention")

    if not did:
        raise SystemExit("error: probe needs at least one of --attention, --per-scale-mse, --perturb")
    print(f"probe wrote {', '.join(did)} under {out}")
    return 0


def cmd_bench(args) -> int:
    from . import analysis as an
    from . import report

    model = an.cost_model(args.a, args.k)
    for k in range(model.steps):
        print(
            f"step {k + 1}: side {model.ratio ** k}, cumulative tokens "
            f"{model.tokens_per_step[k]}, cost {model.cost_per_step[k]}"
        )
    print(f"total cost {model.total_cost}")
    if args.empirical:
        counts = an.measure_attention_tokens(args.a, args.k)
        match = counts == model.tokens_per_step
        print(f"empirical attention tokens {counts} match={match}")
        if not match:
            raise SystemExit("error: empirical token counts diverge from the closed form")
    models = [model]
    if args.k_range:
        kmin, kmax = (int(x) for x in args.k_range.split(","))
        models = [an.cost_model(args.a, k) for k in range(kmin, kmax + 1)]
        slope = an.loglog_slope(
            [m.ratio ** (m.steps - 1) for m in models], [m.total_cost for m in models]
        )
        print(f"log-log slope of total cost vs final side over K={kmin}..{kmax}: {slope:.3f}")
    if args.out:
        out = Path(args.out)
        rows = [r for m in models for r in [[m.steps] + rr for rr in m.rows()]]
        report.write_csv(out / "cost_model.csv", ("K",) + an.CostModel.HEADER, rows)
        report.cost_figure(models, out / "cost_model.png")
        print(f"wrote {out / 'cost_model.csv'}")
    return 0


def cmd_dump_guidance(args) -> int:
    import numpy as np

    from . import codec as cd
    from . import data as dt
    from . import guidance as gd
    from .config import DEFAULTS

    sides = (
        [int(s) for s in args.schedule.split(",")] if args.schedule else list(DEFAULTS["schedule"])
    )
    img = dt.load_image(args.input)
    s = gd.laplacian_magnitude(img)
    sched = cd.ScaleSchedule.square(sides)
    pyr = gd.guidance_pyramid(s, sched)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dt.save_pgm(out / "laplacian_magnitude.pgm", gd.minmax_normalize(s))
    for k, g in enumerate(pyr):
        h, w = sched.resolutions[k]
        dt.save_pgm(out / f"guidance_s{k + 1}_{h}x{w}.pgm", g)
    print(f"wrote {len(pyr) + 1} maps under {out}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 1
        return int(e.code or 0)
    except Exception as e:  # one-line cause, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
