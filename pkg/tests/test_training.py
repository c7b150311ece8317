import json
import math

import numpy as np
import pytest

from fd3 import bridge
from fd3.imaging import save_image
from fd3.metrics import psnr
from fd3.model import load_checkpoint
from fd3.phantoms import make_phantoms
from fd3.training import (
    TrainingConfig, TrainingDivergedError, mean_psnr, split_indices, toy_affine_config, train,
    validation_pairs,
)


@pytest.fixture(scope="module")
def toy_images():
    return make_phantoms(12, 32, seed=5)


@pytest.fixture(scope="module")
def toy_run(toy_images, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    cfg = toy_affine_config(epochs=6, checkpoint_every=3, learning_rate=1e-3)
    model, log = train(cfg, out, images=toy_images)
    return cfg, model, log, out


@pytest.mark.parametrize("field, value", [("epochs", 0), ("batch_size", 0), ("learning_rate", 0.0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        TrainingConfig(**{field: value})


def test_config_round_trip():
    cfg = TrainingConfig(epochs=3, seed=4, dataset_dir="somewhere")
    again = TrainingConfig.from_config({k: str(v) for k, v in cfg.to_config().items()})
    assert again == cfg


def test_config_reference_defaults():
    cfg = TrainingConfig()
    assert cfg.learning_rate == 1e-4 and cfg.epochs == 30 and cfg.batch_size == 4
    assert cfg.weight_decay == 0.0 and cfg.clahe.clip_limit == 2.0 and cfg.clahe.tile_grid == (8, 8)


def test_identity_clahe_from_config():
    assert TrainingConfig.from_config({"clahe.enabled": "false"}).clahe is None


def test_split_holds_out_ten_percent():
    tr, va = split_indices(100, 0.1, 0)
    assert len(va) == 10 and len(tr) == 90
    assert not set(tr) & set(va)
    tr2, va2 = split_indices(2, 0.1, 0)
    assert len(tr2) == 1 and len(va2) == 1


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ValueError):
        train(TrainingConfig(dataset_dir=str(tmp_path)))
    with pytest.raises(ValueError):
        train(TrainingConfig(), images=[np.zeros((32, 32, 3))])


def test_log_and_checkpoints(toy_run):
    cfg, model, log, out = toy_run
    assert [r.epoch for r in log.records] == list(range(1, 7))
    lines = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == list(range(1, 7))
    assert set(lines[0]) == {"epoch", "loss", "val_psnr", "seconds"}
    assert sorted(p.name for p in out.glob("ckpt_epoch*.bin")) == ["ckpt_epoch3.bin", "ckpt_epoch6.bin"]


def test_loss_decreases(toy_run):
    _, _, log, _ = toy_run
    assert log.losses[-1] < log.losses[0]


def test_checkpoint_reproduces_validation_psnr(toy_run, toy_images):
    cfg, model, log, out = toy_run
    loaded = load_checkpoint(out / "ckpt_epoch6.bin")
    _, val_idx = split_indices(len(toy_images), cfg.val_fraction, cfg.seed)
    pairs = validation_pairs(toy_images, toy_images, val_idx, cfg)
    assert mean_psnr(pairs, loaded) == pytest.approx(log.records[-1].val_psnr, abs=1e-9)


def test_time_sensitivity_after_training(toy_run, toy_images):
    _, model, _, _ = toy_run
    x = np.stack(toy_images[:2])
    assert np.abs(model(x, np.full(2, 0.1)) - model(x, np.full(2, 0.9))).mean() > 0


def test_same_seed_same_losses(toy_images):
    cfg = toy_affine_config(epochs=2)
    _, a = train(cfg, images=toy_images)
    _, b = train(cfg, images=toy_images)
    assert a.losses == b.losses


def test_dataset_dir_loading(tmp_path, toy_images):
    for i, im in enumerate(toy_images[:4]):
        save_image(im, tmp_path / f"im{i}.png")
    cfg = toy_affine_config(epochs=1, dataset_dir=str(tmp_path))
    model, log = train(cfg)
    assert len(log.records) == 1 and len(model.metadata["dataset_hash"]) == 16


def test_divergence_is_reported(toy_images):
    cfg = toy_affine_config(epochs=1, learning_rate=1e30)
    with pytest.raises(TrainingDivergedError) as info:
        train(cfg, images=toy_images)
    assert info.value.epoch == 1 and not math.isfinite(info.value.loss)


@pytest.mark.slow
def test_toy_affine_inverse_is_learned():
    images = make_phantoms(40, 32, seed=3)
    cfg = toy_affine_config(epochs=23)  # 9 batches per epoch -> 207 optimizer steps
    model, _ = train(cfg, images=images)
    held_out = make_phantoms(8, 32, seed=4)
    deg = [0.5 * x + 0.25 for x in held_out]
    before = np.mean([psnr(x, y) for x, y in zip(held_out, deg)])
    after = np.mean([psnr(x, bridge.sample(model, y, 1)) for x, y in zip(held_out, deg)])
    assert after - before >= 5.0
    # at t = 0 the state already is the target, so the net should return its input
    assert np.abs(model(np.stack(held_out), np.zeros(8)) - np.stack(held_out)).mean() <= 0.05
