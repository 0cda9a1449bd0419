import math

import numpy as np
import pytest
import torch

from zonebench.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from zonebench.data import DatasetManifest, SliceImage, one_hot
from zonebench.errors import CheckpointFormatError, ConfigError, DivergenceError, InputError, ShapeError
from zonebench.models import Architecture, ModelConfig, build, count_parameters, forward
from zonebench.train import EPS, TrainConfig, cce_loss, fit_arrays, predict, predict_classes, train

TINY = dict(base_filters=4, depth=2, dense_growth_rate=4, input_size=16)


def brute_cce(pred, target):
    total, n = 0.0, 0
    for idx in np.ndindex(pred.shape[:-1]):
        total -= sum(t * math.log(min(max(p, EPS), 1.0)) for p, t in zip(pred[idx], target[idx]))
        n += 1
    return total / n


def test_cce_perfect_prediction(rng):
    target = one_hot(rng.integers(0, 5, (2, 4, 4)))
    assert cce_loss(target, target) == pytest.approx(-math.log(1 - EPS), abs=1e-6)
    assert cce_loss(target, target) >= 0


def test_cce_uniform():
    target = one_hot(np.array([[[0, 1], [3, 4]]]))
    pred = np.full(target.shape, 0.2)
    assert brute_cce(pred, target) == pytest.approx(-math.log(0.2), abs=1e-12)
    assert cce_loss(pred, target) == pytest.approx(1.6094379124341003, abs=1e-12)


def test_cce_clamp_floor(rng):
    labels = rng.integers(0, 5, (1, 3, 3))
    target = one_hot(labels)
    pred = np.where(target == 1, EPS, (1 - EPS) / 4)
    assert cce_loss(pred, target) == pytest.approx(16.11809565095832, abs=1e-6)
    pred0 = np.where(target == 1, 0.0, 0.25)
    assert cce_loss(pred0, target) == pytest.approx(-math.log(EPS))


def test_cce_matches_brute_force(rng):
    logits = rng.standard_normal((2, 3, 3, 5))
    pred = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    target = one_hot(rng.integers(0, 5, (2, 3, 3)))
    assert cce_loss(pred, target) == pytest.approx(brute_cce(pred, target), rel=1e-12)
    t = cce_loss(torch.from_numpy(pred).permute(0, 3, 1, 2), torch.from_numpy(target.astype(np.float64)).permute(0, 3, 1, 2))
    assert float(t) == pytest.approx(brute_cce(pred, target), rel=1e-12)


def test_cce_shape_mismatch():
    with pytest.raises(ShapeError):
        cce_loss(np.zeros((1, 2, 2, 5)), np.zeros((1, 2, 3, 5)))


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0), dict(train_fraction=1.0), dict(stop_loss=0.0)])
def test_train_config_invariants(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def tiny_data(rng, n=4):
    images = rng.random((n, 16, 16, 1)).astype(np.float32)
    masks = (images[..., 0] * 5).astype(np.uint8).clip(0, 4)
    return images, masks


def test_one_record_per_epoch(rng):
    images, masks = tiny_data(rng)
    _, history = fit_arrays(build(ModelConfig("UNET", **TINY)), images, masks, TrainConfig(epochs=1, batch_size=2))
    assert len(history) == 1
    _, history = fit_arrays(build(ModelConfig("UNET", **TINY)), images, masks, TrainConfig(epochs=3, batch_size=3))
    assert [r.epoch for r in history.records] == [1, 2, 3]
    assert all(math.isfinite(r.mean_train_loss) and r.mean_train_loss >= 0 for r in history.records)
    assert history.meta["optimizer"]["name"] == "adam"


def test_stop_loss_ends_training_early(rng):
    images, masks = tiny_data(rng)
    # any finite CCE is below 1e9, so the first epoch already stops
    _, history = fit_arrays(build(ModelConfig("UNET", **TINY)), images, masks, TrainConfig(epochs=5, batch_size=2, stop_loss=1e9))
    assert len(history) == 1
    _, history = fit_arrays(build(ModelConfig("UNET", **TINY)), images, masks, TrainConfig(epochs=3, batch_size=2, stop_loss=1e-12))
    assert len(history) == 3


def test_training_is_deterministic(rng):
    images, masks = tiny_data(rng)
    runs = []
    for _ in range(2):
        model = build(ModelConfig("ATT_R2U_NET", **TINY, init_seed=3))
        _, h = fit_arrays(model, images, masks, TrainConfig(epochs=3, batch_size=3, learning_rate=1e-3, shuffle_seed=4))
        runs.append((h.final_loss, forward(model, images)))
    assert abs(runs[0][0] - runs[1][0]) <= 1e-6
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


@pytest.mark.parametrize("arch", list(Architecture))
def test_one_step_decreases_loss(arch, rng):
    images, masks = tiny_data(rng, n=2)
    torch.manual_seed(0)
    model = build(ModelConfig(arch, **TINY))
    net = model.net
    x = torch.from_numpy(images.transpose(0, 3, 1, 2))
    y = torch.nn.functional.one_hot(torch.from_numpy(masks.astype(np.int64)), 5).permute(0, 3, 1, 2).float()
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=1e-4)
    before = cce_loss(net(x), y)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = cce_loss(net(x), y)
    assert float(after) < float(before.detach())


def test_divergence_is_reported(rng):
    images, masks = tiny_data(rng)
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 1"):
        fit_arrays(build(ModelConfig("UNET", **TINY)), images, masks, TrainConfig(epochs=2, batch_size=4))


def test_empty_training_set():
    with pytest.raises(InputError):
        train(build(ModelConfig("UNET", **TINY)), DatasetManifest([]), TrainConfig(epochs=1))


def test_train_from_manifest_writes_checkpoints(synth_dir, tmp_path):
    m = DatasetManifest.read(synth_dir)
    m = m.subset(m.entries[:2])
    model = build(ModelConfig("UNET", base_filters=2, depth=1))
    model, history = train(model, m, TrainConfig(epochs=2, batch_size=2, checkpoint_dir=tmp_path))
    for name in ("final.ckpt", "best.ckpt", "history.csv"):
        assert (tmp_path / name).is_file()
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_train_loss,mean_train_dsc,seconds"
    assert len(lines) == 3
    assert read_header(tmp_path / "best.ckpt")[0]["meta"]["loss"] == pytest.approx(min(r.mean_train_loss for r in history.records))


# ---------------------------------------------------------------- predict


def test_predict_argmax_and_tie_break():
    probs = np.zeros((1, 2, 2, 5), np.float32)
    probs[0, 0, 0] = [0.1, 0.6, 0.1, 0.1, 0.1]
    probs[0, 0, 1] = [0.4, 0.4, 0.1, 0.05, 0.05]  # BG/CZ tie
    probs[0, 1, 0] = [0.0, 0.0, 0.0, 0.0, 1.0]
    probs[0, 1, 1] = [0.2] * 5
    np.testing.assert_array_equal(predict_classes(probs)[0], [[1, 0], [4, 0]])


def test_predict_is_deterministic(rng):
    model = build(ModelConfig("UNET", **TINY))
    images = [SliceImage("P", i, rng.random((16, 16))) for i in range(3)]
    a, b = predict(model, images), predict(model, images)
    assert [x.key for x in a] == [("P", 0), ("P", 1), ("P", 2)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.classes, y.classes)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    model = build(ModelConfig("UNET", base_filters=4, depth=2))
    images, masks = rng.random((2, 256, 256, 1)).astype(np.float32), rng.integers(0, 5, (2, 256, 256)).astype(np.uint8)
    fit_arrays(model, images, masks, TrainConfig(epochs=1, batch_size=2))  # move the BN running stats
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert np.abs(forward(loaded, images) - forward(model, images)).max() <= 1e-6


def test_checkpoint_preserves_parameter_count(tmp_path):
    model = build(ModelConfig("ATT_R2U_NET", **TINY))
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
    assert count_parameters(loaded) == count_parameters(model)
    assert loaded.config.architecture is Architecture.ATT_R2U_NET


def test_checkpoint_layout(tmp_path):
    path = save_checkpoint(build(ModelConfig("UNET", **TINY)), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    header, payload = read_header(path)
    assert header["version"] == 1
    row = header["tensors"][0]
    arr = np.frombuffer(payload[row["offset"] : row["offset"] + row["nbytes"]], dtype=row["dtype"])
    assert arr.size == int(np.prod(row["shape"]))
    assert row["dtype"].startswith("<")


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda b: b"XXXXXXXX" + b[8:],
        lambda b: b[:8] + (7).to_bytes(4, "little") + b[12:],
        lambda b: b[:20] + b"{garbage" + b[28:],
        lambda b: b[:-10],
        lambda b: b[:-1] + bytes([b[-1] ^ 0xFF]),
        lambda b: b[:5],
    ],
    ids=["magic", "version", "header", "truncated", "bitflip", "tiny"],
)
def test_corrupt_checkpoints_rejected(tmp_path, corrupt):
    path = save_checkpoint(build(ModelConfig("UNET", **TINY)), tmp_path / "m.ckpt")
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
