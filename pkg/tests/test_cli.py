import json
import subprocess
import sys

import numpy as np
import pytest

from ufafuse import checkpoint, synthetic
from ufafuse.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from ufafuse.imageio import read_image, write_image
from ufafuse.network import FusionNetwork


@pytest.fixture
def corpus8(tmp_path):
    return synthetic.write_corpus(tmp_path / "src", tmp_path / "lab", 8, seed=4, size=24)


@pytest.fixture
def manifest(tmp_path, corpus8):
    src, lab = corpus8
    assert main(["gen-data", "--src", str(src), "--labels", str(lab), "--out", str(tmp_path / "d"), "--seed", "1"]) == 0
    return tmp_path / "d" / "manifest.tsv"


def train_args(manifest, ck, *extra):
    return ["train", "--manifest", str(manifest), "--out-checkpoint", str(ck), "--epochs", "2",
            "--batch", "2", "--crop", "16", "--seed", "0", *extra]


def test_gen_data_writes_manifest(manifest, corpus8, tmp_path):
    assert len(manifest.read_text().splitlines()) == 8
    src, lab = corpus8
    assert main(["gen-data", "--src", str(src), "--labels", str(lab), "--out", str(tmp_path / "e"), "--seed", "1"]) == 0
    assert (tmp_path / "e" / "manifest.tsv").read_bytes() == manifest.read_bytes()


def test_gen_data_count_and_groups(corpus8, tmp_path):
    src, lab = corpus8
    out = tmp_path / "g"
    assert main(["gen-data", "--src", str(src), "--labels", str(lab), "--out", str(out),
                 "--count", "3", "--groups", "2"]) == 0
    rows = [line.split("\t") for line in (out / "manifest.tsv").read_text().splitlines()]
    assert len(rows) == 3 and {r[4] for r in rows} == {"2"}
    assert main(["gen-data", "--src", str(src), "--labels", str(lab), "--out", str(out), "--groups", "x"]) == EXIT_USAGE


def test_gen_data_missing_labels(corpus8, tmp_path, capsys):
    src, _ = corpus8
    out = tmp_path / "bad"
    assert main(["gen-data", "--src", str(src), "--labels", str(tmp_path / "none"), "--out", str(out)]) == EXIT_DATA
    assert "label directory" in capsys.readouterr().err
    assert not (out / "manifest.tsv").exists()


def test_train_ablation_and_resume(manifest, tmp_path):
    ck = tmp_path / "n.ufaf"
    assert main(train_args(manifest, ck, "--ablation", "NO-SA", "--checkpoint-every", "1")) == 0
    net, meta, _ = checkpoint.load_network(ck)
    assert net.ablation == "NO-SA" and meta["epoch"] == 2
    rows = (tmp_path / "n.ufaf.csv").read_text().splitlines()
    assert len(rows) == 1 + 8
    ck2 = tmp_path / "more.ufaf"
    args = train_args(manifest, ck2, "--resume", str(ck), "--loss-csv", str(tmp_path / "more.csv"))
    args[args.index("--epochs") + 1] = "3"
    assert main(args) == 0
    assert checkpoint.load_network(ck2)[1]["epoch"] == 3
    assert [r.split(",")[0] for r in (tmp_path / "more.csv").read_text().splitlines()[1:]] == ["2"] * 4


def test_train_defaults_mirror_reference_setup():
    from ufafuse.cli import parse_args
    args = parse_args(["train", "--manifest", "m", "--out-checkpoint", "c"])
    assert (vars(args)["lambda"], args.lr, args.batch, args.crop, args.epochs) == (0.2, 1e-4, 8, 256, 300)


def test_config_file_and_flag_precedence(manifest, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"--epochs": 1, "batch": 4, "crop": 16, "lambda": 1.0}))
    ck = tmp_path / "c.ufaf"
    assert main(["--config", str(cfg), "train", "--manifest", str(manifest), "--out-checkpoint", str(ck),
                 "--batch", "8"]) == 0
    meta = checkpoint.load_network(ck)[1]
    assert meta["epoch"] == 1 and meta["lambda"] == 1.0
    assert len((tmp_path / "c.ufaf.csv").read_text().splitlines()) == 1 + 1
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["--config", str(cfg), "train", "--manifest", str(manifest), "--out-checkpoint", str(ck)]) == EXIT_USAGE


def test_fuse_and_attention_dump(tmp_path, rng):
    ck = tmp_path / "n.ufaf"
    checkpoint.save_network(ck, FusionNetwork.initialize(0))
    a, b = (rng.integers(0, 256, (19, 23, 3), dtype=np.uint8) for _ in range(2))
    write_image(a, tmp_path / "a.ppm")
    write_image(b, tmp_path / "b.ppm")
    out, dump = tmp_path / "f.ppm", tmp_path / "att"
    assert main(["fuse", "--checkpoint", str(ck), "--a", str(tmp_path / "a.ppm"), "--b", str(tmp_path / "b.ppm"),
                 "--out", str(out), "--dump-attention", str(dump)]) == 0
    assert read_image(out).shape == (19, 23, 3)
    pgms = sorted(p.name for p in dump.glob("*.pgm"))
    assert pgms == ["channel_map_1.pgm", "channel_map_2.pgm", "spatial_map_1.pgm", "spatial_map_2.pgm"]
    assert read_image(dump / "channel_map_1.pgm").shape == (8, 8)
    assert read_image(dump / "spatial_map_2.pgm").shape == (19, 23)
    ranges = json.loads((dump / "attention.json").read_text())
    assert all(0 <= r["min"] <= r["max"] <= 1 for r in ranges.values())


def test_fuse_identical_inputs_gives_flat_attention(tmp_path, rng):
    ck = tmp_path / "n.ufaf"
    checkpoint.save_network(ck, FusionNetwork.initialize(0))
    write_image(rng.integers(0, 256, (9, 9, 3), dtype=np.uint8), tmp_path / "a.ppm")
    dump = tmp_path / "att"
    assert main(["fuse", "--checkpoint", str(ck), "--a", str(tmp_path / "a.ppm"), "--b", str(tmp_path / "a.ppm"),
                 "--out", str(tmp_path / "f.ppm"), "--dump-attention", str(dump)]) == 0
    assert np.all(read_image(dump / "spatial_map_1.pgm") == 128)


def test_fuse_data_errors(tmp_path, rng):
    ck = tmp_path / "n.ufaf"
    checkpoint.save_network(ck, FusionNetwork.initialize(0))
    write_image(rng.integers(0, 256, (9, 9, 3), dtype=np.uint8), tmp_path / "a.ppm")
    write_image(rng.integers(0, 256, (9, 8, 3), dtype=np.uint8), tmp_path / "b.ppm")
    base = ["fuse", "--checkpoint", str(ck), "--a", str(tmp_path / "a.ppm"), "--out", str(tmp_path / "f.ppm")]
    assert main(base + ["--b", str(tmp_path / "b.ppm")]) == EXIT_DATA
    assert main(base + ["--b", str(tmp_path / "missing.ppm")]) == EXIT_DATA
    (tmp_path / "bad.ufaf").write_bytes(b"UFAF\x01")
    base[2] = str(tmp_path / "bad.ufaf")
    assert main(base + ["--b", str(tmp_path / "a.ppm")]) == EXIT_DATA


def eval_dirs(tmp_path, rng, names, with_gt=True):
    dirs = {k: tmp_path / k for k in ("f", "a", "b", "g")}
    for k, d in dirs.items():
        d.mkdir()
        if k == "g" and not with_gt:
            continue
        for n in names:
            write_image(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), d / f"{n}.ppm")
    return dirs


def test_eval_single_image(tmp_path, rng):
    d = eval_dirs(tmp_path, rng, ["only"])
    out = tmp_path / "r.csv"
    assert main(["eval", "--fused-dir", str(d["f"]), "--src-a-dir", str(d["a"]), "--src-b-dir", str(d["b"]),
                 "--gt-dir", str(d["g"]), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("only,") and lines[2].startswith("mean,")
    assert lines[1].split(",")[1:] == lines[2].split(",")[1:]


def test_eval_without_gt_and_mean_row(tmp_path, rng):
    d = eval_dirs(tmp_path, rng, ["p", "q", "r"], with_gt=False)
    out = tmp_path / "r.csv"
    assert main(["eval", "--fused-dir", str(d["f"]), "--src-a-dir", str(d["a"]), "--src-b-dir", str(d["b"]),
                 "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    assert all(r[5] == "" for r in rows) and all(r[1] for r in rows)
    body = np.array([[float(v) for v in r[1:5]] for r in rows[:-1]])
    mean = np.array([float(v) for v in rows[-1][1:5]])
    assert np.max(np.abs(body.mean(axis=0) - mean)) < 1e-9


def test_selfcheck_passes_and_catches_mutation(capsys):
    small = ["selfcheck", "--instances", "3", "--network-instances", "1"]
    assert main(small) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out
    assert main(small + ["--perturb-conv-backward", "1e-2"]) == EXIT_CHECK
    text = capsys.readouterr().out
    assert "FAIL grad[32] conv2d" in text and "FAIL grad[64] network" in text


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["fuse", "--a", "x"], ["train", "--epochs", "many"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("error:")


def test_thread_env_var(monkeypatch, manifest, tmp_path):
    monkeypatch.setenv("UFAF_THREADS", "zero")
    assert main(train_args(manifest, tmp_path / "x.ufaf")) == EXIT_USAGE
    monkeypatch.setenv("UFAF_THREADS", "1")
    assert main(train_args(manifest, tmp_path / "x.ufaf")) == EXIT_OK


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ufafuse", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "selfcheck" in res.stdout
