import json
import logging
import struct

import numpy as np
import pytest

from ufafuse import checkpoint, datasetgen, synthetic, train
from ufafuse.network import FusionNetwork, layer_plan
from ufafuse.train import TrainConfig


def small_cfg(**kw):
    base = dict(batch=2, crop=16, epochs=2, seed=3, lr0=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_random_crop_keeps_triplets_aligned(rng):
    src, label = synthetic.scene(rng, 40)
    trip = datasetgen.make_triplet(src, label, 2, rng)
    blurred = datasetgen.mean_blur(src, trip.kernel_size)
    for _ in range(10):
        near, far, gt, blur = train.random_crop((trip.near, trip.far, trip.gt, blurred), 17, rng)
        assert near.shape == (17, 17, 3)
        np.testing.assert_array_equal(near.astype(int) + far, gt.astype(int) + blur)
    with pytest.raises(ValueError):
        train.random_crop((trip.near,), 41, rng)


def test_training_is_deterministic(dataset):
    curves = []
    for _ in range(2):
        net = FusionNetwork.initialize(0)
        curves.append([r.total for r in train.train(net, dataset, small_cfg()).curve])
    assert len(curves[0]) == 4
    assert curves[0] == curves[1]


def test_loss_csv_and_checkpoints(dataset, tmp_path):
    ck, csv = tmp_path / "n.ufaf", tmp_path / "loss.csv"
    res = train.train(FusionNetwork.initialize(0), dataset, small_cfg(checkpoint_every=1), ck, csv)
    lines = csv.read_text().splitlines()
    assert lines[0] == "epoch,step,l1,ssim_loss,total,lr"
    assert len(lines) == 1 + len(res.curve)
    epoch, step, l1, ls, total, lr = (float(v) for v in lines[-1].split(","))
    assert (epoch, step) == (1, 4) and abs(total - (0.2 * l1 + 0.8 * ls)) < 1e-6 and lr == 1e-3
    _, meta, extras = checkpoint.load_network(ck)
    assert meta["epoch"] == 2 and meta["step"] == 4 and meta["lambda"] == 0.2
    assert any(k.startswith("adam.m/") for k in extras)


def test_resume_matches_uninterrupted_run(dataset, tmp_path):
    full = train.train(FusionNetwork.initialize(0), dataset, small_cfg(epochs=3))
    ck = tmp_path / "half.ufaf"
    train.train(FusionNetwork.initialize(0), dataset, small_cfg(epochs=1), checkpoint_path=ck)
    net, _, _ = checkpoint.load_network(ck)
    rest = train.train(net, dataset, small_cfg(epochs=3), resume=ck)
    assert [r.total for r in rest.curve] == [r.total for r in full.curve[2:]]
    assert rest.curve[0].step == 3 and rest.curve[0].epoch == 1
    for name, p in full.net.params.items():
        np.testing.assert_array_equal(p.data, rest.net.params[name].data)


@pytest.mark.parametrize("lam", [0.0, 0.2, 1.0])
def test_losses_and_gradients_stay_finite(dataset, lam):
    net = FusionNetwork.initialize(1)
    seen = []

    def check(rep):
        seen.append(rep.total)
        assert all(np.all(np.isfinite(p.grad)) for p in net.params.values() if p.grad is not None)

    res = train.train(net, dataset, small_cfg(lam=lam, epochs=3), on_step=check)
    assert len(seen) == 6 and np.all(np.isfinite(seen))
    assert all(r.total == pytest.approx(lam * r.l1 + (1 - lam) * r.ssim_loss, abs=1e-6) for r in res.curve)


def test_unreadable_entries_are_skipped(dataset, caplog):
    broken = datasetgen.ManifestEntry(dataset[0].near.with_name("missing.ppm"), dataset[0].far, dataset[0].gt,
                                      dataset[0].focus_map, 0, 2, 0)
    with caplog.at_level(logging.WARNING):
        data = train.load_triplets([broken] + list(dataset))
    assert len(data) == len(dataset) and "skipping" in caplog.text
    with pytest.raises(ValueError):
        train.load_triplets([broken])


def test_crop_larger_than_images_is_rejected(dataset):
    with pytest.raises(ValueError):
        train.train(FusionNetwork.initialize(0), dataset, small_cfg(crop=64))


@pytest.mark.slow
def test_single_triplet_overfits(tmp_path):
    src, lab = synthetic.write_corpus(tmp_path / "s", tmp_path / "l", 1, seed=8, size=64)
    entries = datasetgen.generate(src, lab, tmp_path / "d", seed=0)
    res = train.train(FusionNetwork.initialize(0), entries, TrainConfig(batch=1, crop=64, epochs=200, seed=0))
    totals = [r.total for r in res.curve]
    assert len(totals) == 200
    assert np.mean(totals[-5:]) < 0.25 * np.mean(totals[:5])


@pytest.mark.parametrize("lam", [0.0, 0.2])
def test_both_objectives_converge_on_tiny_set(dataset, lam):
    res = train.train(FusionNetwork.initialize(2), dataset, small_cfg(lam=lam, epochs=30, lr0=1e-3))
    totals = [r.total for r in res.curve]
    assert np.mean(totals[-6:]) < 0.7 * np.mean(totals[:6])


# ----------------------------------------------------------------------
# checkpoint format
# ----------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    net = FusionNetwork.initialize(9, ablation="NO-CA")
    path = tmp_path / "x.ufaf"
    checkpoint.save_network(path, net, extra_tensors={"note": np.arange(3, dtype=np.float32)}, **{"lambda": 0.5})
    back, meta, extras = checkpoint.load_network(path)
    assert back.ablation == "NO-CA" and meta["lambda"] == 0.5 and meta["leaky_slope"] == 0.01
    assert meta["init"] == "kaiming-normal-fan-in/zero-bias"
    np.testing.assert_array_equal(extras["note"], [0, 1, 2])
    for name, p in net.params.items():
        np.testing.assert_array_equal(back.params[name].data, p.data)


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "x.ufaf"
    checkpoint.write_checkpoint(path, {"w": np.ones((2, 3), np.float32)}, {"a": 1})
    raw = path.read_bytes()
    assert raw[:4] == b"UFAF"
    (version, meta_len) = struct.unpack("<HI", raw[4:10])
    assert version == 1 and json.loads(raw[10:10 + meta_len]) == {"a": 1}
    pos = 10 + meta_len
    (count, name_len) = struct.unpack("<IH", raw[pos:pos + 6])
    assert count == 1 and raw[pos + 6:pos + 6 + name_len] == b"w"
    pos += 6 + name_len
    assert raw[pos] == 2 and struct.unpack("<2I", raw[pos + 1:pos + 9]) == (2, 3)
    assert np.frombuffer(raw[pos + 9:], "<f4").tolist() == [1.0] * 6


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "x.ufaf"
    checkpoint.save_network(path, FusionNetwork.initialize(0))
    raw = path.read_bytes()
    (tmp_path / "trunc.ufaf").write_bytes(raw[:-10])
    (tmp_path / "magic.ufaf").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "ver.ufaf").write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    for bad in ("trunc", "magic", "ver"):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.read_checkpoint(tmp_path / f"{bad}.ufaf")


def test_checkpoint_names_cover_every_layer(tmp_path):
    tensors = checkpoint.network_tensors(FusionNetwork.initialize(0))
    assert set(tensors) == {f"{n}.{k}" for n, *_ in layer_plan() for k in ("weight", "bias")}
    assert tensors["ffb.bias"].shape == (64,) and tensors["spatial.weight"].shape == (1, 2, 7, 7)
