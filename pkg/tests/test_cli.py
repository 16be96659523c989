import csv
import sys

import numpy as np
import pytest

from nextscale import data as dt
from nextscale.cli import build_parser, main


def run_cli(*args) -> int:
    return main(list(args))


@pytest.fixture(scope="module")
def toyset(tmp_path_factory):
    folder = tmp_path_factory.mktemp("toys")
    dt.make_toyset(4, 64, 7, folder)
    return folder


@pytest.fixture(scope="module")
def run_dir(toyset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run_cli(
        "train", "--out", str(out), "--seed", "7",
        "--set", f"data.dir={toyset}",
        "--set", "train.steps=12", "--set", "train.batch=4",
        "--set", "model.depth=2", "--set", "model.width=32", "--set", "model.heads=2",
        "--set", "codebook.iters=8", "--set", "codebook.polish=0",
        "--set", "train.checkpoint_every=0",
    )
    assert code == 0
    return out


def test_every_verb_has_help():
    parser = build_parser()
    for verb in ("make-toyset", "train", "infer", "eval", "probe", "bench", "dump-guidance"):
        with pytest.raises(SystemExit) as e:
            parser.parse_args([verb, "--help"])
        assert e.value.code == 0


def test_unknown_verb_rejected(capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(["frobnicate"])
    assert e.value.code != 0


def test_make_toyset_deterministic(tmp_path):
    assert run_cli("make-toyset", "--n", "3", "--size", "32", "--seed", "5", "--out", str(tmp_path / "a")) == 0
    assert run_cli("make-toyset", "--n", "3", "--size", "32", "--seed", "5", "--out", str(tmp_path / "b")) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 4  # 3 images + manifest
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_make_toyset_requires_seed(capsys):
    assert run_cli("make-toyset", "--n", "1", "--out", "/tmp/x") == 1
    assert "seed" in capsys.readouterr().err


def test_bench_prints_total_cost_467(capsys):
    assert run_cli("bench", "--a", "2", "--k", "3") == 0
    out = capsys.readouterr().out
    assert "total cost 467" in out


def test_bench_empirical_and_range(capsys, tmp_path):
    assert run_cli("bench", "--a", "2", "--k", "3", "--empirical",
                   "--k-range", "3,7", "--out", str(tmp_path)) == 0
    out = capsys.readouterr().out
    assert "match=True" in out
    assert "slope" in out
    assert (tmp_path / "cost_model.csv").exists()
    assert (tmp_path / "cost_model.png").exists()


def test_train_then_infer_writes_4x_output(run_dir, toyset, tmp_path):
    imgs, names = dt.load_folder(toyset)
    from nextscale.ndcore import Rng

    lr = dt.degrade(imgs[0], Rng(3), 4)
    lr_path = tmp_path / "input_lr.pgm"
    dt.save_pgm(lr_path, lr)
    out = tmp_path / "sr"
    code = run_cli("infer", "--checkpoint", str(run_dir / "model.avar"),
                   "--input", str(lr_path), "--out", str(out), "--dump-tokens")
    assert code == 0
    sr = dt.load_image(out / "input_lr_sr.pgm")
    assert sr.shape == (1, 64, 64)
    token_files = sorted(out.glob("input_lr_tokens_s*.csv"))
    assert len(token_files) == 6


def test_infer_prints_per_scale_timing(run_dir, toyset, tmp_path, capsys):
    imgs, _ = dt.load_folder(toyset)
    from nextscale.ndcore import Rng

    lr_path = tmp_path / "t.pgm"
    dt.save_pgm(lr_path, dt.degrade(imgs[1], Rng(4), 4))
    assert run_cli("infer", "--checkpoint", str(run_dir / "model.avar"),
                   "--input", str(lr_path), "--out", str(tmp_path / "o")) == 0
    out = capsys.readouterr().out
    for k in range(1, 7):
        assert f"scale {k}" in out


def test_eval_edge_iou_identical_folders_reports_one(toyset, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run_cli("eval", "--edge-iou", "--pred", str(toyset), "--gt", str(toyset),
                   "--out", str(out)) == 0
    text = capsys.readouterr().out
    assert "edge IoU average 1.000000" in text
    rows = list(csv.DictReader(open(out / "edge_iou.csv")))
    assert all(float(r["edge_iou"]) == 1.0 for r in rows)


def test_eval_checkpoint_writes_csv_and_figure(run_dir, toyset, tmp_path):
    out = tmp_path / "ev2"
    assert run_cli("eval", "--checkpoint", str(run_dir / "model.avar"),
                   "--data", str(toyset), "--edge-iou", "--seed", "9",
                   "--out", str(out)) == 0
    rows = list(csv.DictReader(open(out / "eval.csv")))
    assert len(rows) == 4
    assert (out / "eval.png").exists()
    assert all("token_acc_s6" in r for r in rows)


def test_probe_writes_reports(run_dir, toyset, tmp_path):
    out = tmp_path / "probe"
    assert run_cli("probe", "--checkpoint", str(run_dir / "model.avar"),
                   "--data", str(toyset), "--out", str(out), "--seed", "11",
                   "--attention", "--per-scale-mse", "--perturb",
                   "--scales", "1,2", "--sigmas", "0,0.5") == 0
    for name in ("per_scale_mse.csv", "per_scale_mse.png", "perturbation.csv",
                 "perturbation.png", "attention.csv", "attention_locality.csv",
                 "attention_locality.png"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader(open(out / "perturbation.csv")))
    zero_rows = [r for r in rows if float(r["sigma"]) == 0.0]
    assert all(float(r["latent_mse"]) == 0.0 for r in zero_rows)


def test_probe_without_mode_fails(run_dir, toyset, tmp_path, capsys):
    assert run_cli("probe", "--checkpoint", str(run_dir / "model.avar"),
                   "--data", str(toyset), "--out", str(tmp_path / "p2"), "--seed", "3") == 1
    assert "probe needs" in capsys.readouterr().err


def test_dump_guidance_writes_pyramid(toyset, tmp_path):
    imgs, names = dt.load_folder(toyset)
    src = toyset / names[0]
    out = tmp_path / "guid"
    assert run_cli("dump-guidance", "--input", str(src), "--out", str(out),
                   "--schedule", "1,2,4") == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == [
        "guidance_s1_1x1.pgm", "guidance_s2_2x2.pgm", "guidance_s3_4x4.pgm",
        "laplacian_magnitude.pgm",
    ]


def test_error_is_one_line_and_nonzero(tmp_path, capsys):
    code = run_cli("infer", "--checkpoint", str(tmp_path / "missing.avar"),
                   "--input", "x.pgm", "--out", str(tmp_path))
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert err.startswith("error:")


def test_train_rerun_byte_identical_metrics(toyset, tmp_path):
    args = lambda out: [
        "train", "--out", str(out), "--seed", "7", "--threads", "1",
        "--set", f"data.dir={toyset}",
        "--set", "train.steps=5", "--set", "train.batch=2",
        "--set", "model.depth=2", "--set", "model.width=32", "--set", "model.heads=2",
        "--set", "codebook.iters=5", "--set", "codebook.polish=0",
        "--set", "train.checkpoint_every=0",
    ]
    assert run_cli(*args(tmp_path / "r1")) == 0
    assert run_cli(*args(tmp_path / "r2")) == 0
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert (tmp_path / "r1" / "metrics.png").exists()
