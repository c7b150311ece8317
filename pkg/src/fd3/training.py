"""Supervised bridge training over online-synthesized (CLAHE target, degraded) pairs."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import bridge
from .config import get_bool, get_ints
from .degradation import ParamRanges, degrade, sample_params
from .imaging import ClaheParams, center_crop_resize, clahe, load_image
from .metrics import psnr
from .model import ModelConfig, UNetDenoiser, save_checkpoint

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 4
    weight_decay: float = 0.0
    image_size: int = 64
    seed: int = 0
    ranges: ParamRanges = field(default_factory=ParamRanges)
    # None trains against the clean image itself
    clahe: ClaheParams | None = field(default_factory=ClaheParams)
    checkpoint_every: int = 10
    dataset_dir: str | None = None
    val_fraction: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainingConfig":
        clahe_params = None
        if get_bool(cfg, "clahe.enabled", True):
            clahe_params = ClaheParams(
                clip_limit=float(cfg.get("clahe.clip_limit", 2.0)),
                tile_grid=get_ints(cfg, "clahe.tile_grid", (8, 8)),
            )
        model_kv = {k[len("model."):]: v for k, v in cfg.items() if k.startswith("model.")}
        return cls(
            learning_rate=float(cfg.get("learning_rate", 1e-4)),
            epochs=int(cfg.get("epochs", 30)),
            batch_size=int(cfg.get("batch_size", 4)),
            weight_decay=float(cfg.get("weight_decay", 0.0)),
            image_size=int(cfg.get("image_size", 64)),
            seed=int(cfg.get("seed", 0)),
            ranges=ParamRanges.from_config(cfg),
            clahe=clahe_params,
            checkpoint_every=int(cfg.get("checkpoint_every", 10)),
            dataset_dir=cfg.get("dataset_dir"),
            val_fraction=float(cfg.get("val_fraction", 0.1)),
            model=ModelConfig.from_kv(model_kv),
            threads=int(cfg.get("threads", 1)),
        )

    def to_config(self) -> dict:
        cfg = {
            "learning_rate": self.learning_rate, "epochs": self.epochs,
            "batch_size": self.batch_size, "weight_decay": self.weight_decay,
            "image_size": self.image_size, "seed": self.seed,
            "checkpoint_every": self.checkpoint_every, "val_fraction": self.val_fraction,
            "threads": self.threads, "clahe.enabled": self.clahe is not None,
        }
        if self.dataset_dir is not None:
            cfg["dataset_dir"] = self.dataset_dir
        if self.clahe is not None:
            cfg["clahe.clip_limit"] = self.clahe.clip_limit
            cfg["clahe.tile_grid"] = list(self.clahe.tile_grid)
        cfg.update(self.ranges.to_config())
        cfg.update({f"model.{k}": v for k, v in self.model.to_kv().items()})
        return {k: (str(v).lower() if isinstance(v, bool) else v) for k, v in cfg.items()}


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_psnr: float | None
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


def list_images(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def dataset_hash(paths: list[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; at least one training image is kept."""
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(round(n * val_fraction))
    if val_fraction > 0:
        n_val = max(1, n_val)
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def pair_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def validation_pairs(images, targets, indices, config: TrainingConfig):
    """Fixed degradations of the held-out images (epoch slot -1 never collides with training)."""
    pairs = []
    for i in indices:
        p = sample_params(config.ranges, pair_rng(config.seed, 2**31, int(i)), config.image_size)
        pairs.append((targets[i], degrade(images[i], p)))
    return pairs


def mean_psnr(pairs, model, nfe: int = 1, batch_size: int = 16) -> float:
    vals = []
    for k in range(0, len(pairs), batch_size):
        chunk = pairs[k:k + batch_size]
        est = bridge.sample(model, np.stack([y for _, y in chunk]), nfe)
        vals += [psnr(x0, e) for (x0, _), e in zip(chunk, est)]
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def train(config: TrainingConfig, out_dir: str | os.PathLike | None = None,
          images: list[np.ndarray] | None = None) -> tuple[UNetDenoiser, TrainingLog]:
    """Fit ``F(x_t, t)`` to the CLAHE target with a uniformly weighted MSE.

    Images come from ``config.dataset_dir`` unless passed in directly. With
    ``out_dir`` set, ``ckpt_epochN.bin`` files and ``log.jsonl`` are written
    there. Runs are bitwise reproducible for a fixed seed and thread count.
    """
    if images is None:
        if config.dataset_dir is None:
            raise ValueError("no dataset: set dataset_dir or pass images")
        paths = list_images(config.dataset_dir)
        if len(paths) < 2:
            raise ValueError(f"dataset {config.dataset_dir} needs at least 2 images, found {len(paths)}")
        ds_hash = dataset_hash(paths)
        images = [center_crop_resize(load_image(p), config.image_size) for p in paths]
    else:
        if len(images) < 2:
            raise ValueError(f"need at least 2 images, got {len(images)}")
        images = [center_crop_resize(im, config.image_size) for im in images]
        h = hashlib.sha256()
        for im in images:
            h.update(np.ascontiguousarray(im).tobytes())
        ds_hash = h.hexdigest()[:16]

    if config.threads > 0:
        torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)

    targets = [clahe(im, config.clahe) if config.clahe is not None else im for im in images]
    train_idx, val_idx = split_indices(len(images), config.val_fraction, config.seed)
    val_pairs = validation_pairs(images, targets, val_idx, config)

    model = UNetDenoiser(config.model)
    model.metadata.update(seed=str(config.seed), dataset_hash=ds_hash)
    opt = torch.optim.AdamW(model.net.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 1])
    t_rng = np.random.default_rng([config.seed, 2])

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.jsonl"
        log_path.write_text("")

    history = TrainingLog()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        model.train()
        order = order_rng.permutation(train_idx)
        losses = []
        for b, k in enumerate(range(0, len(order), config.batch_size)):
            idx = order[k:k + config.batch_size]
            x0 = np.stack([targets[i] for i in idx])
            y = np.stack([
                degrade(images[i], sample_params(config.ranges, pair_rng(config.seed, epoch, int(i)),
                                                 config.image_size))
                for i in idx
            ])
            t = bridge.sample_times(len(idx), t_rng)
            loss = bridge.training_loss(
                model.forward_hwc, torch.from_numpy(x0).float(), torch.from_numpy(y).float(), t=t
            )
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(value)

        model.eval()
        val = mean_psnr(val_pairs, model) if val_pairs else None
        rec = EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - start)
        history.records.append(rec)
        log.info("epoch %d loss %.5f val_psnr %s (%.1fs)", epoch, rec.loss, val, rec.seconds)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_checkpoint(model, out_dir / f"ckpt_epoch{epoch}.bin",
                                {"epochs": epoch, "val_psnr": val})
    model.metadata["epochs"] = str(config.epochs)
    return model.eval(), history


def toy_affine_config(**overrides) -> TrainingConfig:
    """Fixed ``y = 0.5 x + 0.25`` degradation, identity CLAHE, 32x32."""
    ranges = ParamRanges(
        alpha=(0.5, 0.5), beta=(0.25, 0.25), gamma=(1.0, 1.0), bias_amplitude=(0.0, 0.0),
        bias_blur_sigma=(0.0, 0.0), blur_sigma=(0.0, 0.0), noise_std=(0.0, 0.0), n_spots=(0, 0),
        spot_blur_sigma=(0.0, 0.0),
    )
    base = TrainingConfig(image_size=32, ranges=ranges, clahe=None,
                          model=ModelConfig(base_channels=16), checkpoint_every=1000)
    return replace(base, **overrides)
