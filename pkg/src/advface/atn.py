"""Perturbation generators: plain U-Net and Residual U-Net, plus the tanh-bounded wrapper.

Residual U-Net layout (``n = downsamples``, widths ``w_i = base * 2**min(i, n-2)``)::

    stem      3x3 conv, channels -> base                       (full resolution)
    enc i     ResBlock(stride 2) + (E[i]-1) ResBlocks -> w_i    skip_i = level input
    dec i     UpResBlock(stride 2) -> C(skip_i), concat skip_i,
              1x1 fuse conv, then (D[i]-1) ResBlocks
    head      BN-ReLU-3x3 conv -> channels, weights ~ 0

ResBlocks are 2-layer pre-activation (BN-ReLU-conv) blocks; decoder blocks use
transposed convolutions. The head is initialized near zero so training starts
from ``x_adv ~= x`` without saturating the tanh.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .facerec import PreActBlock

KINDS = ("unet", "resunet")
HEAD_INIT_STD = 1e-3


@dataclass(frozen=True)
class AtnArchConfig:
    kind: str = "resunet"
    encoder_blocks: tuple[int, ...] = (1, 1, 2)
    decoder_blocks: tuple[int, ...] = (1, 1, 1)
    base_width: int = 16
    downsamples: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder_blocks", tuple(int(v) for v in self.encoder_blocks))
        object.__setattr__(self, "decoder_blocks", tuple(int(v) for v in self.decoder_blocks))
        if self.kind not in KINDS:
            raise ValueError(f"unknown ATN kind {self.kind!r}")
        if not (len(self.encoder_blocks) == len(self.decoder_blocks) == self.downsamples):
            raise ValueError("len(E) and len(D) must both equal downsamples")
        if self.downsamples < 1 or min(self.encoder_blocks + self.decoder_blocks) < 1:
            raise ValueError("block counts and downsamples must be >= 1")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")

    @classmethod
    def full_scale(cls) -> "AtnArchConfig":
        return cls("resunet", (1, 1, 2, 3, 5), (1, 1, 1, 1, 1), 64, 5)

    @classmethod
    def desk(cls, kind: str = "resunet") -> "AtnArchConfig":
        if kind == "unet":
            return cls("unet", (1, 1, 1), (1, 1, 1), 16, 3)
        return cls("resunet", (1, 1, 2), (1, 1, 1), 16, 3)

    @property
    def widths(self) -> list[int]:
        n = self.downsamples
        return [self.base_width * 2 ** min(i, max(n - 2, 0)) for i in range(n)]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "AtnArchConfig":
        return cls(**d)


class UpResBlock(nn.Module):
    """Pre-activation residual block that doubles resolution with transposed convs."""

    def __init__(self, cin, cout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.ConvTranspose2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = nn.ConvTranspose2d(cin, cout, 2, 2, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        skip = self.shortcut(out)
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + skip


def _cbr(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def _tbr(cin, cout, stride=2):
    if stride == 2:
        conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
    else:
        conv = nn.ConvTranspose2d(cin, cout, 3, 1, 1, bias=False)
    return nn.Sequential(conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class AtnGenerator(nn.Module):
    """``N_theta``: image -> unbounded same-shape map (tanh is applied by :func:`perturb`)."""

    def __init__(self, arch: AtnArchConfig, channels: int = 3):
        super().__init__()
        self.arch = arch
        self.channels = channels
        widths = arch.widths
        skip_ch = [arch.base_width] + widths[:-1]
        self.stem = nn.Conv2d(channels, arch.base_width, 3, 1, 1)
        self.encoders = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for i, w in enumerate(widths):
            cin, n = skip_ch[i], arch.encoder_blocks[i]
            if arch.kind == "resunet":
                layers = [PreActBlock(cin, w, stride=2)] + [PreActBlock(w, w) for _ in range(n - 1)]
            else:
                layers = [_cbr(cin, w, 2)] + [_cbr(w, w) for _ in range(n - 1)]
            self.encoders.append(nn.Sequential(*layers))
        for i, w in enumerate(widths):
            s, n = skip_ch[i], arch.decoder_blocks[i]
            if arch.kind == "resunet":
                self.decoders.append(UpResBlock(w, s))
                rest = [PreActBlock(s, s) for _ in range(n - 1)]
            else:
                self.decoders.append(_tbr(w, s, 2))
                rest = [_tbr(s, s, 1) for _ in range(n - 1)]
            self.fuse.append(nn.Sequential(nn.Conv2d(2 * s, s, 1, bias=False), *rest))
        self.head_bn = nn.BatchNorm2d(arch.base_width)
        self.head = nn.Conv2d(arch.base_width, channels, 3, 1, 1)
        nn.init.normal_(self.head.weight, std=HEAD_INIT_STD)
        nn.init.zeros_(self.head.bias)

    @property
    def skip_connections(self) -> int:
        return len(self.decoders)

    def check_input(self, x: torch.Tensor) -> None:
        k = 2**self.arch.downsamples
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % k or x.shape[3] % k:
            raise ValueError(f"input sides {tuple(x.shape[2:])} must be divisible by 2**downsamples = {k}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        h = self.stem(x * 2.0 - 1.0)
        skips = []
        for enc in self.encoders:
            skips.append(h)
            h = enc(h)
        for i in reversed(range(len(self.decoders))):
            h = self.decoders[i](h)
            h = self.fuse[i](torch.cat([h, skips[i]], dim=1))
        return self.head(F.relu(self.head_bn(h)))


def build_atn(arch: AtnArchConfig, channels: int = 3, seed: int = 0) -> AtnGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AtnGenerator(arch, channels)


def perturb(gen: nn.Module, x: torch.Tensor, eps: float) -> torch.Tensor:
    """``clip_[0,1](x + eps * tanh(N(x)))``; |x_adv - x| <= eps by construction."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return torch.clamp(x + eps * torch.tanh(gen(x)), 0.0, 1.0)


def save_atn(gen: AtnGenerator, path: str | os.PathLike, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"kind": "atn", "arch": gen.arch.to_json(), "channels": gen.channels, **(extra or {})})
    torch.save({"header": header, "state_dict": gen.state_dict()}, path)


def load_atn(path: str | os.PathLike) -> tuple[AtnGenerator, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    header = json.loads(blob["header"])
    if header.get("kind") != "atn":
        raise ValueError(f"{path} is not an ATN checkpoint")
    gen = AtnGenerator(AtnArchConfig.from_json(header["arch"]), header["channels"])
    gen.load_state_dict(blob["state_dict"])
    return gen.eval(), header
