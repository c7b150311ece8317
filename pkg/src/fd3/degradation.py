"""Synthetic fundus degradation: illumination, blur/noise and retinal artifacts.

The forward operator is ``degrade = artifacts . blur_noise . transmission``;
training pairs use the CLAHE-enhanced clean image as the target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import ClaheParams, clahe, validate_image

# blur_sigma ranges are expressed in pixels at this resolution
REFERENCE_SIZE = 512
TRUNCATE = 4.0


@dataclass(frozen=True)
class TransmissionParams:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    bias_center: tuple[float, float] = (0.5, 0.5)
    bias_radius: float = 0.5
    bias_amplitude: float = 0.0
    bias_blur_sigma: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 < self.bias_radius <= 0.75:
            raise ValueError(f"bias_radius must be in (0, 0.75], got {self.bias_radius}")
        if self.bias_blur_sigma < 0:
            raise ValueError(f"bias_blur_sigma must be >= 0, got {self.bias_blur_sigma}")


@dataclass(frozen=True)
class BlurParams:
    blur_sigma: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError(f"blur_sigma and noise_std must be >= 0, got {self}")


@dataclass(frozen=True)
class Spot:
    center: tuple[float, float]
    radius: float
    amplitude: float
    blur_sigma: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"spot radius must be > 0, got {self.radius}")
        if self.blur_sigma < 0:
            raise ValueError(f"spot blur_sigma must be >= 0, got {self.blur_sigma}")


@dataclass(frozen=True)
class ArtifactParams:
    spots: tuple[Spot, ...] = ()

    @property
    def count(self) -> int:
        return len(self.spots)


@dataclass(frozen=True)
class DegradationParams:
    transmission: TransmissionParams = field(default_factory=TransmissionParams)
    blur: BlurParams = field(default_factory=BlurParams)
    artifacts: ArtifactParams = field(default_factory=ArtifactParams)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        t = dict(d["transmission"])
        t["bias_center"] = tuple(t["bias_center"])
        spots = tuple(
            Spot(**{**s, "center": tuple(s["center"])}) for s in d["artifacts"]["spots"]
        )
        return cls(
            transmission=TransmissionParams(**t),
            blur=BlurParams(**d["blur"]),
            artifacts=ArtifactParams(spots),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling intervals for every degradation scalar.

    Spatial quantities are fractions: centers of (H, W), radii and the
    illumination/spot blur of min(H, W). ``blur_sigma`` is in pixels at
    512x512 and scales linearly with image size.
    """

    alpha: tuple[float, float] = (0.5, 1.0)
    beta: tuple[float, float] = (-0.2, 0.2)
    gamma: tuple[float, float] = (0.8, 1.0)
    bias_amplitude: tuple[float, float] = (-0.3, 0.3)
    bias_radius: tuple[float, float] = (0.3, 0.6)
    bias_center_row: tuple[float, float] = (0.3, 0.7)
    bias_center_col: tuple[float, float] = (0.3, 0.7)
    bias_blur_sigma: tuple[float, float] = (0.05, 0.15)
    blur_sigma: tuple[float, float] = (0.0, 3.0)
    noise_std: tuple[float, float] = (0.0, 0.02)
    n_spots: tuple[int, int] = (0, 5)
    spot_radius: tuple[float, float] = (0.02, 0.08)
    spot_amplitude: tuple[float, float] = (-0.4, 0.4)
    spot_blur_sigma: tuple[float, float] = (0.01, 0.04)
    spot_center_row: tuple[float, float] = (0.2, 0.8)
    spot_center_col: tuple[float, float] = (0.2, 0.8)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ValueError(f"degenerate range for {f.name}: lo={lo} > hi={hi}")
            object.__setattr__(self, f.name, (lo, hi))
        if self.alpha[0] <= 0:
            raise ValueError("alpha range must be positive")
        if self.gamma[0] <= 0 or self.gamma[1] > 1:
            raise ValueError("gamma range must lie in (0, 1]")
        if self.bias_radius[0] <= 0 or self.bias_radius[1] > 0.75:
            raise ValueError("bias_radius range must lie in (0, 0.75]")
        if self.spot_radius[0] <= 0:
            raise ValueError("spot_radius range must be positive")
        if self.n_spots[0] < 0:
            raise ValueError("n_spots range must be nonnegative")
        for name in ("bias_blur_sigma", "blur_sigma", "noise_std", "spot_blur_sigma"):
            if getattr(self, name)[0] < 0:
                raise ValueError(f"{name} range must be nonnegative")

    @classmethod
    def from_config(cls, cfg: dict, prefix: str = "ranges.") -> "ParamRanges":
        """Build from flat config keys such as ``ranges.alpha = 0.5, 1.0``."""
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, value in cfg.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name not in names:
                raise KeyError(f"unknown degradation range {key!r}")
            lo, hi = _parse_pair(value)
            if name == "n_spots":
                lo, hi = int(lo), int(hi)
            kwargs[name] = (lo, hi)
        return cls(**kwargs)

    def to_config(self, prefix: str = "ranges.") -> dict:
        return {f"{prefix}{f.name}": f"{lo}, {hi}" for f in fields(self)
                for lo, hi in [getattr(self, f.name)]}


def identity_ranges() -> ParamRanges:
    """Ranges whose every draw leaves the image untouched."""
    return ParamRanges(
        alpha=(1.0, 1.0), beta=(0.0, 0.0), gamma=(1.0, 1.0), bias_amplitude=(0.0, 0.0),
        bias_blur_sigma=(0.0, 0.0), blur_sigma=(0.0, 0.0), noise_std=(0.0, 0.0), n_spots=(0, 0),
        spot_blur_sigma=(0.0, 0.0),
    )


def _parse_pair(value) -> tuple[float, float]:
    if isinstance(value, str):
        parts = [p for p in value.replace("[", "").replace("]", "").split(",") if p.strip()]
        nums = [float(p) for p in parts]
    elif np.isscalar(value):
        nums = [float(value)]
    else:
        nums = [float(v) for v in value]
    if len(nums) == 1:
        nums = nums * 2
    if len(nums) != 2:
        raise ValueError(f"expected 'lo, hi', got {value!r}")
    return nums[0], nums[1]


def disc_mask(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    """Boolean disc; a pixel is inside iff its center is within the radius.

    ``center`` is given as fractions of (H, W) and ``radius`` as a fraction of
    min(H, W).
    """
    h, w = shape
    cy, cx = center[0] * h, center[1] * w
    r = radius * min(h, w)
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial Gaussian blur with reflective borders; channels are left independent."""
    if sigma <= 0:
        return arr
    spatial = (sigma, sigma) + (0,) * (arr.ndim - 2)
    return gaussian_filter(arr, sigma=spatial, mode="reflect", truncate=TRUNCATE)


def _blurred_disc(shape, center, radius, amplitude, sigma) -> np.ndarray:
    if amplitude == 0:
        return np.zeros(shape)
    disc = disc_mask(shape, center, radius) * float(amplitude)
    return gaussian_blur(disc, sigma)


def light_transmission(img: np.ndarray, p: TransmissionParams) -> np.ndarray:
    img = validate_image(img)
    bias = _blurred_disc(img.shape[:2], p.bias_center, p.bias_radius,
                         p.bias_amplitude, p.bias_blur_sigma)
    out = p.alpha * (bias[..., None] + img) + p.beta
    return np.clip(out, 0.0, p.gamma)


def blur_noise(img: np.ndarray, p: BlurParams, rng: np.random.Generator) -> np.ndarray:
    img = validate_image(img)
    out = gaussian_blur(img, p.blur_sigma)
    if p.noise_std > 0:
        out = out + rng.normal(0.0, p.noise_std, size=img.shape)
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)


def retinal_artifacts(img: np.ndarray, p: ArtifactParams) -> np.ndarray:
    img = validate_image(img)
    if not p.spots:
        return img.copy()
    total = np.zeros(img.shape[:2])
    for s in p.spots:
        total += _blurred_disc(img.shape[:2], s.center, s.radius, s.amplitude, s.blur_sigma)
    return np.clip(img + total[..., None], 0.0, 1.0)


def degrade(img: np.ndarray, p: DegradationParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply transmission, then blur+noise, then artifacts.

    When ``rng`` is omitted the noise stream is seeded from ``p.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(p.seed)
    out = light_transmission(img, p.transmission)
    out = blur_noise(out, p.blur, rng)
    return retinal_artifacts(out, p.artifacts)


def sample_params(ranges: ParamRanges, rng: np.random.Generator,
                  image_size: int = REFERENCE_SIZE) -> DegradationParams:
    """Draw every scalar uniformly from its interval (pixel sigmas sized for ``image_size``)."""
    def u(bounds):
        lo, hi = bounds
        return float(lo) if lo == hi else float(rng.uniform(lo, hi))

    transmission = TransmissionParams(
        alpha=u(ranges.alpha),
        beta=u(ranges.beta),
        gamma=u(ranges.gamma),
        bias_center=(u(ranges.bias_center_row), u(ranges.bias_center_col)),
        bias_radius=u(ranges.bias_radius),
        bias_amplitude=u(ranges.bias_amplitude),
        bias_blur_sigma=u(ranges.bias_blur_sigma) * image_size,
    )
    blur = BlurParams(
        blur_sigma=u(ranges.blur_sigma) * image_size / REFERENCE_SIZE,
        noise_std=u(ranges.noise_std),
    )
    lo, hi = ranges.n_spots
    n = int(lo) if lo == hi else int(rng.integers(lo, hi + 1))
    spots = tuple(
        Spot(
            center=(u(ranges.spot_center_row), u(ranges.spot_center_col)),
            radius=u(ranges.spot_radius),
            amplitude=u(ranges.spot_amplitude),
            blur_sigma=u(ranges.spot_blur_sigma) * image_size,
        )
        for _ in range(n)
    )
    seed = int(rng.integers(0, 2**32))
    return DegradationParams(transmission, blur, ArtifactParams(spots), seed)


def synthesize_pair(img: np.ndarray, ranges: ParamRanges, clahe_params: ClaheParams | None,
                    rng: np.random.Generator, target: np.ndarray | None = None):
    """Like :func:`make_training_pair` but also returns the sampled parameters.

    ``target`` lets callers pass a cached CLAHE result.
    """
    img = validate_image(img)
    if target is None:
        target = clahe(img, clahe_params) if clahe_params is not None else img.copy()
    params = sample_params(ranges, rng, image_size=min(img.shape[:2]))
    return target, degrade(img, params), params


def make_training_pair(img: np.ndarray, ranges: ParamRanges, clahe_params: ClaheParams | None,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x0, y) = (clahe(img), degrade(img, sampled params))``.

    ``clahe_params=None`` uses the clean image itself as the target.
    """
    x0, y, _ = synthesize_pair(img, ranges, clahe_params, rng)
    return x0, y
