"""PSNR, the diagonal-Gaussian FID variant, mask IOU and the evaluation driver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, runtime_checkable

import numpy as np
from scipy import linalg, ndimage

from .imaging import rgb_to_luma_chroma


@runtime_checkable
class FeatureExtractor(Protocol):
    dim: int

    def __call__(self, img: np.ndarray) -> np.ndarray: ...


Segmenter = Callable[[np.ndarray], np.ndarray]


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr(x: np.ndarray, xhat: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, with the peak taken from the reference ``x``.

    Identical inputs give ``inf``.
    """
    _check_same_shape(x, xhat)
    x = np.asarray(x, dtype=np.float64)
    mse = np.mean((x - np.asarray(xhat, dtype=np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(x.max() / math.sqrt(mse))


def _as_features(feats, name) -> np.ndarray:
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be an (n, k) array, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 samples, got {arr.shape[0]}")
    return arr


def fid_gaussian(feats_ref, feats_test) -> float:
    """Sum over feature dimensions of squared mean and std differences.

    Each set is fit with an axis-aligned Gaussian; stds use the population
    (divide-by-n) convention.
    """
    ref = _as_features(feats_ref, "feats_ref")
    test = _as_features(feats_test, "feats_test")
    if ref.shape[1] != test.shape[1]:
        raise ValueError(f"feature dimension mismatch: {ref.shape[1]} vs {test.shape[1]}")
    dmu = ref.mean(axis=0) - test.mean(axis=0)
    dsd = ref.std(axis=0) - test.std(axis=0)
    return float(np.sum(dmu ** 2) + np.sum(dsd ** 2))


def fid_frechet(feats_ref, feats_test) -> float:
    """Standard full-covariance Frechet distance, for comparison with other tools."""
    ref = _as_features(feats_ref, "feats_ref")
    test = _as_features(feats_test, "feats_test")
    if ref.shape[1] != test.shape[1]:
        raise ValueError(f"feature dimension mismatch: {ref.shape[1]} vs {test.shape[1]}")
    mu1, mu2 = ref.mean(axis=0), test.mean(axis=0)
    s1 = np.atleast_2d(np.cov(ref, rowvar=False))
    s2 = np.atleast_2d(np.cov(test, rowvar=False))
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    if not np.isfinite(covmean).all():
        eps = 1e-6 * np.eye(s1.shape[0])
        covmean = linalg.sqrtm((s1 + eps) @ (s2 + eps))
    covmean = covmean.real
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean), 0.0))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks (two empty masks give 1.0)."""
    _check_same_shape(a, b)
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


class PooledLuminanceExtractor:
    """Average-pool the luminance onto a ``grid x grid`` lattice and flatten.

    Cheap, deterministic stand-in for a pretrained network's pooled features.
    """

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dim = grid * grid

    def __call__(self, img: np.ndarray) -> np.ndarray:
        y = rgb_to_luma_chroma(np.asarray(img, dtype=np.float64))[0]
        h, w = y.shape
        if h < self.grid or w < self.grid:
            raise ValueError(f"image {h}x{w} smaller than pooling grid {self.grid}")
        re = np.linspace(0, h, self.grid + 1).round().astype(int)
        ce = np.linspace(0, w, self.grid + 1).round().astype(int)
        rows = np.add.reduceat(y, re[:-1], axis=0) / np.diff(re)[:, None]
        cells = np.add.reduceat(rows, ce[:-1], axis=1) / np.diff(ce)[None, :]
        return cells.ravel()


class TopHatVesselSegmenter:
    """Toy vessel detector: black top-hat of the luminance, then a global threshold.

    Only a stand-in for a trained segmentation network; it flags thin dark
    structures narrower than the structuring element.
    """

    def __init__(self, size_fraction: float = 1 / 24, k: float = 1.5):
        self.size_fraction = size_fraction
        self.k = k

    def __call__(self, img: np.ndarray) -> np.ndarray:
        y = rgb_to_luma_chroma(np.asarray(img, dtype=np.float64))[0]
        size = max(3, int(round(min(y.shape) * self.size_fraction)) | 1)
        tophat = ndimage.grey_closing(y, size=(size, size), mode="reflect") - y
        thresh = tophat.mean() + self.k * tophat.std()
        return (tophat > thresh) & (tophat > 1e-3)


@dataclass
class MetricReport:
    psnr_mean: float
    psnr_inf_count: int
    fid: float | None
    iou_mean: float | None
    per_image: list[dict] = field(default_factory=list)
    n_images: int = 0

    @property
    def psnr_values(self) -> list[float]:
        return [r["psnr"] for r in self.per_image]

    @property
    def iou_values(self) -> list[float]:
        return [r["iou"] for r in self.per_image if r.get("iou") is not None]

    def to_json(self) -> dict:
        return {
            "psnr_mean": _json_float(self.psnr_mean),
            "psnr_inf_count": self.psnr_inf_count,
            "fid": _json_float(self.fid),
            "iou_mean": _json_float(self.iou_mean),
            "n_images": self.n_images,
            "per_image": [{k: _json_float(v) for k, v in r.items()} for r in self.per_image],
        }


def _json_float(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def evaluate(pairs: Iterable[tuple[np.ndarray, np.ndarray]],
             extractor: FeatureExtractor | None = None,
             segmenter: Segmenter | None = None,
             names: list[str] | None = None) -> MetricReport:
    """Per-pair PSNR and IOU plus set-level FID over ``(gt, est)`` pairs.

    Infinite PSNR values are left out of the mean and counted separately;
    FID is ``None`` for fewer than two pairs.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate needs at least one (gt, est) pair")
    extractor = extractor or PooledLuminanceExtractor()
    per_image = []
    feats_gt, feats_est = [], []
    for i, (gt, est) in enumerate(pairs):
        rec = {"name": names[i] if names else str(i), "psnr": psnr(gt, est)}
        if segmenter is not None:
            rec["iou"] = iou(segmenter(gt), segmenter(est))
        per_image.append(rec)
        feats_gt.append(extractor(gt))
        feats_est.append(extractor(est))

    finite = [r["psnr"] for r in per_image if math.isfinite(r["psnr"])]
    inf_count = len(per_image) - len(finite)
    psnr_mean = float(np.mean(finite)) if finite else math.inf
    fid = fid_gaussian(feats_gt, feats_est) if len(pairs) >= 2 else None
    iou_mean = float(np.mean([r["iou"] for r in per_image])) if segmenter is not None else None
    return MetricReport(psnr_mean, inf_count, fid, iou_mean, per_image, len(pairs))
