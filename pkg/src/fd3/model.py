"""Time-conditioned denoiser ``F(x_t, t) -> x0_hat`` and its checkpoint format.

The reference network is a small U-Net: four resolution levels with skip
connections, a sinusoidal time embedding added in every residual block,
self-attention at the coarsest level, no dropout and a linear output head.
"""
from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, fields
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"FD3C"
CHECKPOINT_VERSION = 1


@runtime_checkable
class Denoiser(Protocol):
    """Anything the sampler and evaluator can call as ``F(x_t, t)``.

    ``x_t`` is a ``(B, H, W, 3)`` float array and ``t`` a length-B array.
    """

    def predict(self, x_t: np.ndarray, t: np.ndarray) -> np.ndarray: ...

    def __call__(self, x_t: np.ndarray, t: np.ndarray) -> np.ndarray: ...


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDecodeError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2, 4)
    time_embed_dim: int = 64
    groups: int = 8
    attention_heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if len(self.channel_mults) != 4:
            raise ValueError("the reference network has exactly 4 resolution levels")
        for m in self.channel_mults:
            if (self.base_channels * m) % self.groups:
                raise ValueError("channel widths must be divisible by the group count")

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "channel_mults":
                kwargs[f.name] = tuple(int(x) for x in str(raw).split(",") if x.strip())
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    # t in [0, 1] is stretched to [0, 1000] so low frequencies still vary
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = 1000.0 * t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels, heads, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        g, tdim = cfg.groups, cfg.time_embed_dim
        emb_dim = 4 * tdim
        widths = [cfg.base_channels * m for m in cfg.channel_mults]

        self.time_mlp = nn.Sequential(nn.Linear(tdim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(ResBlock(prev, w, emb_dim, g))
            prev = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))

        self.mid1 = ResBlock(prev, prev, emb_dim, g)
        self.mid_attn = SelfAttention(prev, cfg.attention_heads, g)
        self.mid2 = ResBlock(prev, prev, emb_dim, g)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            self.up.append(ResBlock(prev + w, w, emb_dim, g))
            prev = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                prev = widths[i - 1]

        self.out_norm = nn.GroupNorm(g, widths[0])
        self.out = nn.Conv2d(widths[0], 3, 3, padding=1)

    @property
    def min_multiple(self) -> int:
        return 2 ** (len(self.config.channel_mults) - 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``x``: (B, 3, H, W); ``t``: (B,) in [0, 1]."""
        if t.ndim != 1 or t.shape[0] != x.shape[0]:
            raise ValueError(f"t of shape {tuple(t.shape)} does not match batch {tuple(x.shape)}")
        m = self.min_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"spatial size must be divisible by {m}, got {tuple(x.shape[-2:])}")
        emb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim))
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))


class UNetDenoiser:
    """Wraps :class:`UNet` with the channels-last numpy interface of :class:`Denoiser`."""

    def __init__(self, config: ModelConfig | None = None, net: UNet | None = None, metadata=None):
        self.net = net if net is not None else UNet(config)
        self.config = self.net.config
        self.metadata: dict[str, str] = dict(metadata or {})

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    @property
    def training(self) -> bool:
        return self.net.training

    def train(self, mode: bool = True):
        self.net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def forward_hwc(self, x_t: torch.Tensor, t) -> torch.Tensor:
        """Differentiable prediction on a ``(B, H, W, 3)`` tensor."""
        if x_t.ndim != 4:
            raise ValueError(f"expected a (B, H, W, 3) batch, got {tuple(x_t.shape)}")
        t = torch.as_tensor(np.asarray(t, dtype=np.float32) if not torch.is_tensor(t) else t,
                            dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t.shape[0] != x_t.shape[0]:
            raise ValueError(f"got {t.shape[0]} timesteps for a batch of {x_t.shape[0]}")
        out = self.net(x_t.permute(0, 3, 1, 2), t)
        return out.permute(0, 2, 3, 1)

    def predict(self, x_t: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x_t)
        single = x.ndim == 3
        if single:
            x = x[None]
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = np.repeat(t, x.shape[0])
        if t.shape[0] != x.shape[0]:
            raise ValueError(f"got {t.shape[0]} timesteps for a batch of {x.shape[0]}")
        with torch.no_grad():
            out = self.forward_hwc(torch.from_numpy(x.astype(np.float32)), t).double().numpy()
        return out[0] if single else out

    __call__ = predict


def _encode_kv(kv: dict[str, str]) -> bytes:
    lines = []
    for k in sorted(kv):
        v = str(kv[k])
        if "\n" in k or "=" in k or "\n" in v:
            raise CheckpointError(f"cannot encode config entry {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_kv(raw: bytes) -> dict[str, str]:
    kv = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            kv[k] = v
    return kv


def save_checkpoint(model: UNetDenoiser, path: str | os.PathLike, metadata: dict | None = None) -> None:
    """Layout: magic, u32 version, u32 config length, config, u64 blob length, npz blob."""
    meta = {**model.metadata, **{k: str(v) for k, v in (metadata or {}).items()}}
    kv = {f"arch.{k}": v for k, v in model.config.to_kv().items()}
    kv.update({f"meta.{k}": v for k, v in meta.items()})
    config = _encode_kv(kv)
    buf = io.BytesIO()
    state = {k: v.detach().cpu().numpy() for k, v in model.net.state_dict().items()}
    np.savez(buf, **state)
    blob = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(config)))
        fh.write(config)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def read_checkpoint_header(path: str | os.PathLike) -> tuple[int, dict[str, str], bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointDecodeError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, clen = struct.unpack_from("<II", data, 4)
    except struct.error as exc:
        raise CheckpointDecodeError(f"{path}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    off = 12
    try:
        kv = _decode_kv(data[off:off + clen])
        (blen,) = struct.unpack_from("<Q", data, off + clen)
    except (UnicodeDecodeError, struct.error) as exc:
        raise CheckpointDecodeError(f"{path}: corrupt config block") from exc
    blob = data[off + clen + 8:]
    if len(blob) != blen:
        raise CheckpointDecodeError(f"{path}: weight blob is {len(blob)} bytes, header says {blen}")
    return version, kv, blob


def load_checkpoint(path: str | os.PathLike) -> UNetDenoiser:
    _, kv, blob = read_checkpoint_header(path)
    arch = {k[5:]: v for k, v in kv.items() if k.startswith("arch.")}
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    try:
        config = ModelConfig.from_kv(arch)
    except (ValueError, TypeError) as exc:
        raise CheckpointDecodeError(f"{path}: bad architecture config ({exc})") from exc
    try:
        with np.load(io.BytesIO(blob), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as exc:
        raise CheckpointDecodeError(f"{path}: corrupt weight blob ({exc})") from exc
    model = UNetDenoiser(config, metadata=meta)
    expected = model.net.state_dict()
    for name, ref in expected.items():
        if name not in arrays:
            raise CheckpointDecodeError(f"{path}: missing tensor {name!r}")
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise CheckpointDecodeError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                f"architecture expects {tuple(ref.shape)}"
            )
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise CheckpointDecodeError(f"{path}: unexpected tensor {extra[0]!r}")
    model.net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model.eval()
