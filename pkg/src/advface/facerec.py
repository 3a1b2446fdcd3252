"""Victim face-recognition embedding models, their training losses and training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

FAMILIES = ("resnet_style", "inception_style")
LOSSES = ("sphereface", "deepid")


@dataclass(frozen=True)
class VictimModelSpec:
    family: str = "resnet_style"
    depth_blocks: int = 4
    loss: str = "sphereface"
    embed_dim: int = 128
    init_seed: int = 0
    input_size: tuple[int, int, int] = (64, 64, 3)
    width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.depth_blocks < 1:
            raise ValueError("depth_blocks must be >= 1")
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")

    @property
    def short_name(self) -> str:
        fam = {"resnet_style": "RN", "inception_style": "IN"}.get(self.family, self.family)
        loss = {"sphereface": "SF", "deepid": "DID"}[self.loss]
        return f"{fam}-{loss}"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "VictimModelSpec":
        return cls(**data)


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[VictimModelSpec, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.input_size != first.input_size or m.embed_dim != first.embed_dim:
                raise ValueError("ensemble members must share input_size and embed_dim")

    @classmethod
    def seeds_of(cls, spec: VictimModelSpec, seeds: Sequence[int], name: str = "") -> "EnsembleSpec":
        """Members that differ only by weight initialization (e.g. RN-SF-6)."""
        members = tuple(replace(spec, init_seed=s) for s in seeds)
        return cls(members, name or f"{spec.short_name}-{len(members)}")


# --- architectures -------------------------------------------------------


def _stage_blocks(depth: int, n_stages: int = 4) -> list[int]:
    n_stages = min(n_stages, depth)
    return [depth // n_stages + (1 if i < depth % n_stages else 0) for i in range(n_stages)]


class PreActBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + skip


class InceptionBlock(nn.Module):
    """Four-branch block: 1x1, 1x1-3x3, 1x1-3x3-3x3, avgpool-1x1."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        b = cout // 4
        last = cout - 3 * b

        def cbr(i, o, k, s=1):
            return nn.Sequential(nn.Conv2d(i, o, k, s, k // 2, bias=False), nn.BatchNorm2d(o), nn.ReLU(inplace=True))

        self.b1 = cbr(cin, b, 1, stride)
        self.b2 = nn.Sequential(cbr(cin, b, 1), cbr(b, b, 3, stride))
        self.b3 = nn.Sequential(cbr(cin, b, 1), cbr(b, b, 3), cbr(b, b, 3, stride))
        self.b4 = nn.Sequential(nn.AvgPool2d(3, stride, 1, count_include_pad=False), cbr(cin, last, 1))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b2(x), self.b3(x), self.b4(x)], dim=1)


class VictimModel(nn.Module):
    """Image batch in [0, 1] (NCHW) -> unit-norm embedding batch."""

    def __init__(self, spec: VictimModelSpec):
        super().__init__()
        if spec.family not in FAMILIES:
            raise ValueError(f"unsupported victim family {spec.family!r}")
        self.spec = spec
        h, w, c = spec.input_size
        width = spec.width
        stages = _stage_blocks(spec.depth_blocks)
        self.stem = nn.Conv2d(c, width, 3, 1, 1, bias=False)
        block = PreActBlock if spec.family == "resnet_style" else InceptionBlock
        self.stages = nn.ModuleList()
        cin = width
        for i, n in enumerate(stages):
            cout = width * 2**i
            layers = [block(cin, cout, stride=2)] + [block(cout, cout) for _ in range(n - 1)]
            self.stages.append(nn.Sequential(*layers))
            cin = cout
        self.out_bn = nn.BatchNorm2d(cin)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.fc = nn.Linear(cin * 16, spec.embed_dim)
        self.emb_bn = nn.BatchNorm1d(spec.embed_dim)
        self.register_buffer("mean", torch.full((1, c, 1, 1), 0.5))

    def check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.spec.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"expected images of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Intermediate stage outputs (used by the perceptual distance)."""
        self.check_input(x)
        out = self.stem((x - self.mean) * 2.0)
        feats = [out]
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.features(x)[-1]
        out = self.pool(F.relu(self.out_bn(out))).flatten(1)
        return F.normalize(self.emb_bn(self.fc(out)), dim=1)


def build_victim(spec: VictimModelSpec) -> VictimModel:
    """Construct a victim with weights fixed by ``spec.init_seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed)
        model = VictimModel(spec)
    return model.eval()


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def embed_batch(model: VictimModel, images: torch.Tensor) -> torch.Tensor:
    """Unit-norm embeddings in evaluation mode (frozen normalization statistics).

    Images go through the network one at a time: batched float32 convolutions
    round differently with the batch size, and the result must not depend on it.
    """
    model.check_input(images)
    was_training = model.training
    model.eval()
    try:
        out = [model(images[i : i + 1]) for i in range(len(images))]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else images.new_zeros((0, model.spec.embed_dim))


def model_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha1()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


# --- losses --------------------------------------------------------------


def _check_finite(embeddings: torch.Tensor) -> None:
    if not torch.isfinite(embeddings).all():
        bad = (~torch.isfinite(embeddings)).any(dim=-1).nonzero().flatten().tolist()
        raise FloatingPointError(f"non-finite embeddings in rows {bad[:10]}")


def _chebyshev(m: int, c: torch.Tensor) -> torch.Tensor:
    t0, t1 = torch.ones_like(c), c
    if m == 0:
        return t0
    for _ in range(m - 1):
        t0, t1 = t1, 2 * c * t1 - t0
    return t1


def angular_margin_psi(cos: torch.Tensor, margin: float) -> torch.Tensor:
    """psi(theta) = (-1)^k cos(m theta) - 2k for theta in [k pi/m, (k+1) pi/m]."""
    with torch.no_grad():
        theta = torch.acos(cos.clamp(-1.0, 1.0))
        k = torch.floor(margin * theta / math.pi).clamp(max=max(math.ceil(margin) - 1, 0))
    if float(margin).is_integer():
        cos_m = _chebyshev(int(margin), cos)
    else:
        cos_m = torch.cos(margin * torch.acos(cos.clamp(-1 + 1e-7, 1 - 1e-7)))
    sign = 1.0 - 2.0 * torch.remainder(k, 2)
    return sign * cos_m - 2.0 * k


def sphereface_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    class_weights: torch.Tensor,
    margin: float = 2.0,
    scale: float = 16.0,
    lam: float = 0.0,
) -> torch.Tensor:
    """Angular-margin softmax over identity classes.

    The target logit is ``(lam * cos + psi(theta)) / (1 + lam)`` (the annealed
    form; ``lam -> inf`` recovers plain normalized softmax). With ``margin=1``
    and ``scale=1`` this is cross-entropy over raw cosines.
    """
    _check_finite(embeddings)
    cos = F.linear(F.normalize(embeddings, dim=1), F.normalize(class_weights, dim=1)).clamp(-1.0, 1.0)
    target_cos = cos.gather(1, labels[:, None])
    target = (lam * target_cos + angular_margin_psi(target_cos, margin)) / (1.0 + lam)
    logits = cos.scatter(1, labels[:, None], target)
    return F.cross_entropy(scale * logits, labels)


def deepid_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Identification softmax cross-entropy on a linear head over the embedding."""
    _check_finite(embeddings)
    return F.cross_entropy(F.linear(embeddings, weight, bias), labels)


class SphereFaceHead(nn.Module):
    def __init__(self, embed_dim, n_classes, margin=2.0, scale=16.0, lambda_base=1000.0,
                 lambda_gamma=0.12, lambda_power=1.0, lambda_min=5.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)
        self.margin, self.scale = margin, scale
        self.lambda_base, self.lambda_gamma = lambda_base, lambda_gamma
        self.lambda_power, self.lambda_min = lambda_power, lambda_min

    def annealed_lambda(self, step: int) -> float:
        return max(self.lambda_min, self.lambda_base * (1 + self.lambda_gamma * step) ** -self.lambda_power)

    def forward(self, embeddings, labels, step=0):
        return sphereface_loss(embeddings, labels, self.weight, self.margin, self.scale,
                               self.annealed_lambda(step))


class DeepIDHead(nn.Module):
    def __init__(self, embed_dim, n_classes, scale=16.0):
        super().__init__()
        self.linear = nn.Linear(embed_dim, n_classes)
        # embeddings are unit-norm; the scale keeps logits in a trainable range
        self.scale = scale

    def forward(self, embeddings, labels, step=0):
        return deepid_loss(embeddings * self.scale, labels, self.linear.weight, self.linear.bias)


def build_head(spec: VictimModelSpec, n_classes: int, margin: float = 2.0, scale: float = 16.0) -> nn.Module:
    if spec.loss == "sphereface":
        return SphereFaceHead(spec.embed_dim, n_classes, margin=margin, scale=scale)
    return DeepIDHead(spec.embed_dim, n_classes, scale=scale)


# --- training ------------------------------------------------------------


@dataclass
class VictimTrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-4
    margin: float = 2.0
    scale: float = 16.0
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (0.9, 1.1)
    flip: bool = True
    seed: int = 0
    eval_max_pairs: int = 4000
    log_every: int = 100


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_state=None, checkpoint=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.checkpoint = checkpoint


def random_resized_crop(x: torch.Tensor, gen: torch.Generator, scale=(0.8, 1.0), ratio=(0.9, 1.1),
                        flip: bool = True) -> torch.Tensor:
    """Per-sample random resized crop (+ horizontal flip) resampled to the input size."""
    n = x.shape[0]

    def u(lo, hi):
        return lo + (hi - lo) * torch.rand(n, generator=gen)

    area = u(*scale)
    log_r = u(math.log(ratio[0]), math.log(ratio[1]))
    r = torch.exp(log_r)
    sw = torch.sqrt(area * r).clamp(max=1.0)
    sh = torch.sqrt(area / r).clamp(max=1.0)
    tx = (1 - sw) * (2 * torch.rand(n, generator=gen) - 1)
    ty = (1 - sh) * (2 * torch.rand(n, generator=gen) - 1)
    if flip:
        sw = sw * torch.where(torch.rand(n, generator=gen) < 0.5, -1.0, 1.0)
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0], theta[:, 0, 2] = sw, tx
    theta[:, 1, 1], theta[:, 1, 2] = sh, ty
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def train_victim(
    spec: VictimModelSpec,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: VictimTrainConfig | None = None,
    checkpoint: str | os.PathLike | None = None,
) -> tuple[VictimModel, list[float]]:
    """Mini-batch Adam training on identity-labelled images.

    Returns the model in eval mode and the per-step loss curve. A NaN loss
    aborts with :class:`TrainingDiverged` carrying the last good weights
    (also written to ``checkpoint`` when given).
    """
    cfg = cfg or VictimTrainConfig()
    model = build_victim(spec)
    n_classes = int(labels.max()) + 1 if len(labels) else 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed + 7919)
        head = build_head(spec, n_classes, cfg.margin, cfg.scale)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed * 1000003 + spec.init_seed)
    losses: list[float] = []
    last_good = copy.deepcopy(model.state_dict())
    n = len(images)
    perm, pos = torch.randperm(n, generator=gen), 0
    model.train()
    for step in range(cfg.steps):
        if pos + cfg.batch_size > n:
            perm, pos = torch.randperm(n, generator=gen), 0
        idx = perm[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        x = random_resized_crop(images[idx], gen, cfg.crop_scale, cfg.crop_ratio, cfg.flip)
        try:
            loss = head(model(x), labels[idx], step)
        except FloatingPointError:
            loss = torch.tensor(float("nan"))
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            if checkpoint is not None:
                save_victim(model, checkpoint)
            raise TrainingDiverged(f"victim loss became {loss.item()} at step {step}", last_good, checkpoint)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("victim %s seed=%d step %d loss %.4f", spec.short_name, spec.init_seed, step, loss.item())
        if step % 50 == 0:
            last_good = copy.deepcopy(model.state_dict())
    model.eval()
    if checkpoint is not None:
        save_victim(model, checkpoint)
    return model, losses


def save_victim(model: VictimModel, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"kind": "victim", "spec": model.spec.to_json()})
    torch.save({"header": header, "state_dict": model.state_dict()}, path)


def load_victim(path: str | os.PathLike) -> VictimModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    header = json.loads(blob["header"])
    if header.get("kind") != "victim":
        raise ValueError(f"{path} is not a victim checkpoint")
    model = build_victim(VictimModelSpec.from_json(header["spec"]))
    model.load_state_dict(blob["state_dict"])
    return model.eval()
