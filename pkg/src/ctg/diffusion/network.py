"""Context encoder and temporal U-Net denoiser (torch)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# fixed scale for agent-frame history (x, y, v, theta)
HISTORY_SCALE = (20.0, 20.0, 10.0, 1.0)


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class ArchConfig:
    T: int = 50
    H: int = 10
    M: int = 4
    map_channels: int = 3
    map_size: int = 32
    width: int = 32  # first U-Net level; the second is 2x
    feat: int = 64  # context feature width
    k_embed: int = 32
    kernel: int = 5

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ArchConfig":
        return cls(**obj)


def _groups(c: int) -> int:
    return math.gcd(c, 8)


def sinusoidal(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=k.dtype, device=k.device) / max(half - 1, 1))
    ang = k[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResBlock1d(nn.Module):
    def __init__(self, cin: int, cout: int, cond: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(cin, cout, kernel, padding=pad)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.cond = nn.Linear(cond, cout)
        self.conv2 = nn.Conv1d(cout, cout, kernel, padding=pad)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, c):
        h = F.mish(self.norm1(self.conv1(x)))
        h = h + self.cond(c)[:, :, None]
        h = F.mish(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class ContextEncoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        w = cfg.width
        self.conv = nn.Sequential(
            nn.Conv2d(cfg.map_channels, w // 2, 3, stride=2, padding=1),
            nn.Mish(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1),
            nn.Mish(),
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            nn.Mish(),
        )
        side = cfg.map_size // 8
        self.map_fc = nn.Linear(w * side * side, cfg.feat)
        n_hist = (cfg.M + 1) * (cfg.H + 1) * 4 + (cfg.M + 1)
        self.hist = nn.Sequential(nn.Linear(n_hist, cfg.feat), nn.Mish(), nn.Linear(cfg.feat, cfg.feat))
        self.out = nn.Linear(2 * cfg.feat, cfg.feat)
        self.register_buffer("scale", torch.tensor(HISTORY_SCALE), persistent=False)

    def forward(self, raster, past, mask):
        m = self.conv(raster).flatten(1)
        m = F.mish(self.map_fc(m))
        # zero absent neighbours so whatever their slots hold cannot leak in
        p = past / self.scale * mask[:, :, None, None]
        h = self.hist(torch.cat([p.flatten(1), mask], dim=1))
        return self.out(torch.cat([m, h], dim=1))


class Denoiser(nn.Module):
    """Predicts clean normalized actions (B, T, 2) from (B, T, 6) noisy actions + states."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2 = cfg.width, 2 * cfg.width
        cond = cfg.feat
        self.encoder = ContextEncoder(cfg)
        self.k_mlp = nn.Sequential(nn.Linear(cfg.k_embed, cond), nn.Mish(), nn.Linear(cond, cond))
        self.cond_mlp = nn.Sequential(nn.Linear(2 * cond, cond), nn.Mish(), nn.Linear(cond, cond))
        self.inp = nn.Conv1d(6, w1, 1)
        self.down1 = ResBlock1d(w1, w1, cond, cfg.kernel)
        self.pool1 = nn.Conv1d(w1, w1, 3, stride=2, padding=1)
        self.down2 = ResBlock1d(w1, w2, cond, cfg.kernel)
        self.pool2 = nn.Conv1d(w2, w2, 3, stride=2, padding=1)
        self.mid = ResBlock1d(w2, w2, cond, cfg.kernel)
        self.up2 = ResBlock1d(2 * w2, w2, cond, cfg.kernel)
        self.up1 = ResBlock1d(w2 + w1, w1, cond, cfg.kernel)
        self.head = nn.Conv1d(w1, 2, 1)

    def encode(self, raster, past, mask):
        return _checked("encoder", self.encoder(raster, past, mask))

    def forward(self, x, k, feat):
        c = self.k_mlp(sinusoidal(k.to(x.dtype), self.cfg.k_embed))
        c = _checked("cond", self.cond_mlp(torch.cat([feat, c], dim=-1)))
        h = self.inp(x.transpose(1, 2))
        s1 = _checked("down1", self.down1(h, c))
        h = self.pool1(s1)
        s2 = _checked("down2", self.down2(h, c))
        h = self.pool2(s2)
        h = _checked("mid", self.mid(h, c))
        h = F.interpolate(h, size=s2.shape[-1], mode="linear", align_corners=False)
        h = _checked("up2", self.up2(torch.cat([h, s2], dim=1), c))
        h = F.interpolate(h, size=s1.shape[-1], mode="linear", align_corners=False)
        h = _checked("up1", self.up1(torch.cat([h, s1], dim=1), c))
        return _checked("head", self.head(h)).transpose(1, 2)


def _checked(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(name)
    return t


def build_network(cfg: ArchConfig, seed: int = 0, dtype=torch.float32) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Denoiser(cfg)
    return net.to(dtype)
