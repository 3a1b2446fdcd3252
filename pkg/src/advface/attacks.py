"""Untargeted embedding-space attacks: ATN / UAP training, FGSM and PGD.

All four attacks share one objective: push the embedding of ``x_adv`` away
from the embedding of ``x`` (cosine distance), averaged over the victim set,
optionally regularized by a perceptual distance. The returned *loss* is the
negated objective, so it is minimized during generator training.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .atn import AtnArchConfig, build_atn, perturb, save_atn

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-4


class AttackTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 0.03
    lam: float = 0.25
    lr: float = 1e-3
    batch_size: int = 32
    iterations: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise ValueError("eps must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")

    @classmethod
    def full_scale(cls) -> "AttackConfig":
        """Full-scale reference schedule (batch 32, 500K Adam steps at 2e-4, eps 0.03)."""
        return cls(eps=0.03, lam=0.25, lr=2e-4, batch_size=32, iterations=500_000)


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 30
    step_size: float | None = None  # None -> eps / 8
    random_start: bool = True
    probe: float = 0.25

    def resolve_step(self, eps: float) -> float:
        step = eps / 8.0 if self.step_size is None else self.step_size
        if self.steps < 1 or not 0.0 < step <= eps + 1e-12:
            raise ValueError(f"need steps >= 1 and 0 < step_size <= eps (got {self.steps}, {step})")
        return step


def cosine_distance(a: torch.Tensor, b: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Row-wise ``1 - <a, b>`` for unit vectors, in [0, 2].

    Evaluated as ``||a - b||^2 / 2``, which equals ``1 - <a, b>`` on the unit
    sphere and is exactly zero when ``a == b``.
    """
    if check:
        for name, t in (("a", a), ("b", b)):
            norms = t.detach().norm(dim=-1)
            if (norms - 1).abs().max() > UNIT_NORM_TOL:
                raise ValueError(f"{name} is not unit-norm (max |norm-1| = {(norms - 1).abs().max():.3g})")
    diff = a - b
    return 0.5 * (diff * diff).sum(dim=-1)


def attack_objective(
    models: Sequence[nn.Module],
    x: torch.Tensor,
    x_adv: torch.Tensor,
    lam: float = 0.0,
    metric: Callable | None = None,
    clean: Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    """``-(1/n) sum_i mean_batch d(F_i(x), F_i(x_adv)) + lam * mean_batch L_pips(x_adv, x)``."""
    if not models:
        raise ValueError("attack_objective needs at least one victim model")
    if clean is None:
        with torch.no_grad():
            clean = [m(x) for m in models]
    loss = x_adv.new_zeros(())
    for m, e in zip(models, clean):
        loss = loss - cosine_distance(e, m(x_adv)).mean()
    loss = loss / len(models)
    if lam:
        if metric is None:
            raise ValueError("lam > 0 requires a perceptual metric")
        loss = loss + lam * metric(x_adv, x).mean()
    return loss


class UapPerturbation(nn.Module):
    """Input-agnostic perturbation ``eps * tanh(theta_map)``.

    Used as a drop-in generator: ``forward`` ignores the image content and
    returns ``theta_map`` broadcast over the batch, so :func:`perturb` and the
    training loop are shared with the ATN.
    """

    def __init__(self, shape: Sequence[int], eps: float = 0.03, init_std: float = 1e-2, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.theta_map = nn.Parameter(init_std * torch.randn(tuple(shape), generator=g))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != tuple(self.theta_map.shape):
            raise ValueError(f"image shape {tuple(x.shape[1:])} != UAP shape {tuple(self.theta_map.shape)}")
        return self.theta_map.expand_as(x)

    def perturbation(self) -> torch.Tensor:
        """``eps * tanh(theta_map)``, strictly inside the eps-ball even where tanh rounds to 1."""
        theta = self.theta_map.detach()
        below = torch.nextafter(torch.tensor(self.eps, dtype=theta.dtype), torch.tensor(0.0, dtype=theta.dtype))
        return torch.clamp(self.eps * torch.tanh(theta), -below, below)


def _prepare_victims(models: Sequence[nn.Module], images: torch.Tensor) -> list[nn.Module]:
    if not models:
        raise ValueError("need at least one victim model")
    for m in models:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
        spec = getattr(m, "spec", None)
        if spec is not None:
            h, w, c = spec.input_size
            if tuple(images.shape[1:]) != (c, h, w):
                raise ValueError(f"images {tuple(images.shape[1:])} do not match victim input {(c, h, w)}")
    return list(models)


def train_perturbation(
    engine: nn.Module,
    models: Sequence[nn.Module],
    images: torch.Tensor,
    cfg: AttackConfig,
    metric: Callable | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    checkpoint_every: int = 0,
    log_every: int = 50,
) -> tuple[nn.Module, list[float]]:
    """Ensemble attack training loop shared by ATN and UAP.

    Per batch: perturb, average the negated cosine distance over the victims,
    add ``lam * L_pips``, take one Adam step on the generator parameters.
    Victims are frozen throughout.
    """
    models = _prepare_victims(models, images)
    if cfg.lam and metric is None:
        raise ValueError("lam > 0 requires a perceptual metric")
    opt = torch.optim.Adam(engine.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(images)
    bs = min(cfg.batch_size, n)
    perm, pos = torch.randperm(n, generator=gen), 0
    losses: list[float] = []
    engine.train()
    for it in range(cfg.iterations):
        if pos + bs > n:
            perm, pos = torch.randperm(n, generator=gen), 0
        x = images[perm[pos : pos + bs]]
        pos += bs
        with torch.no_grad():
            clean = [m(x) for m in models]
        x_adv = perturb(engine, x, cfg.eps)
        loss = attack_objective(models, x, x_adv, cfg.lam, metric, clean)
        if not torch.isfinite(loss):
            pnorm = sum(float(p.detach().norm()) for p in engine.parameters())
            raise AttackTrainingError(
                f"non-finite attack loss {loss.item()} at iteration {it}; "
                f"param-norm sum {pnorm:.4g}; x_adv finite={bool(torch.isfinite(x_adv).all())}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and it % log_every == 0:
            log.info("attack train it %d loss %.4f", it, loss.item())
        if checkpoint_dir and checkpoint_every and (it + 1) % checkpoint_every == 0:
            _write_checkpoint(engine, checkpoint_dir, f"iter{it + 1:07d}", losses)
    engine.eval()
    if checkpoint_dir:
        _write_checkpoint(engine, checkpoint_dir, "final", losses)
    return engine, losses


def _write_checkpoint(engine, directory, tag, losses):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if hasattr(engine, "arch"):
        save_atn(engine, directory / f"atn_{tag}.pt")
    else:
        torch.save({"theta_map": engine.theta_map.detach(), "eps": engine.eps}, directory / f"uap_{tag}.pt")
    with open(directory / "loss_curve.json", "w") as f:
        json.dump(losses, f)


def train_atn(gen, models, images, cfg: AttackConfig, metric=None, **kw):
    return train_perturbation(gen, models, images, cfg, metric, **kw)


def train_uap(models, images, cfg: AttackConfig, metric=None, init_std: float = 1e-2, **kw):
    uap = UapPerturbation(images.shape[1:], cfg.eps, init_std=init_std, seed=cfg.seed)
    return train_perturbation(uap, models, images, cfg, metric, **kw)


def load_uap(path) -> UapPerturbation:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    uap = UapPerturbation(blob["theta_map"].shape, float(blob["eps"]))
    with torch.no_grad():
        uap.theta_map.copy_(blob["theta_map"])
    return uap.eval()


# --- per-image gradient attacks -----------------------------------------


def _loss_grad(models, x0, x, lam, metric, clean):
    x = x.detach().requires_grad_(True)
    loss = attack_objective(models, x0, x, lam, metric, clean)
    if not loss.requires_grad:  # victims independent of the input
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(loss, x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def _probe_point(x: torch.Tensor, eps: float, probe: float, gen: torch.Generator) -> torch.Tensor:
    # the objective is stationary at x itself (distance is minimal there), so
    # the first gradient is taken at a nearby random point
    if probe <= 0:
        return x
    noise = (2 * torch.rand(x.shape, generator=gen, dtype=x.dtype) - 1) * (probe * eps)
    return torch.clamp(x + noise, 0.0, 1.0)


def fgsm(models, x: torch.Tensor, eps: float, lam: float = 0.0, metric=None,
         probe: float = 0.25, seed: int = 0) -> torch.Tensor:
    """``clip_[0,1](x + eps * sign(grad objective))`` with ``sign(0) = 0``."""
    models = _prepare_victims(models, x)
    x = x.detach()
    with torch.no_grad():
        clean = [m(x) for m in models]
    gen = torch.Generator().manual_seed(seed)
    g = _loss_grad(models, x, _probe_point(x, eps, probe, gen), lam, metric, clean)
    return torch.clamp(x - eps * torch.sign(g), 0.0, 1.0)


def pgd(models, x: torch.Tensor, eps: float, cfg: PgdConfig = PgdConfig(), lam: float = 0.0,
        metric=None, seed: int = 0, callback: Callable[[int, torch.Tensor], None] | None = None) -> torch.Tensor:
    """Iterated sign-gradient ascent projected onto the eps-ball and [0, 1]."""
    step = cfg.resolve_step(eps)
    models = _prepare_victims(models, x)
    x0 = x.detach()
    with torch.no_grad():
        clean = [m(x0) for m in models]
    gen = torch.Generator().manual_seed(seed)
    if cfg.random_start:
        xt = torch.clamp(x0 + (2 * torch.rand(x0.shape, generator=gen, dtype=x0.dtype) - 1) * eps, 0.0, 1.0)
        at = xt
    else:
        xt = x0
        at = _probe_point(x0, eps, cfg.probe, gen)
    lo, hi = x0 - eps, x0 + eps
    for t in range(cfg.steps):
        g = _loss_grad(models, x0, at, lam, metric, clean)
        xt = torch.clamp(xt - step * torch.sign(g), 0.0, 1.0)
        xt = torch.minimum(torch.maximum(xt, lo), hi)
        at = xt
        if callback is not None:
            callback(t, xt)
    return xt.detach()


# --- attack callables for evaluation ------------------------------------


def atn_attack(gen: nn.Module, eps: float) -> Callable[[torch.Tensor], torch.Tensor]:
    gen.eval()

    def run(x):
        with torch.no_grad():
            return perturb(gen, x, eps)

    return run


def uap_attack(uap: UapPerturbation) -> Callable[[torch.Tensor], torch.Tensor]:
    delta = uap.perturbation()

    def run(x):
        return torch.clamp(x + delta, 0.0, 1.0)

    return run


def fgsm_attack(models, eps, lam=0.0, metric=None, seed=0):
    return lambda x: fgsm(models, x, eps, lam, metric, seed=seed)


def pgd_attack(models, eps, cfg: PgdConfig = PgdConfig(), lam=0.0, metric=None, seed=0):
    return lambda x: pgd(models, x, eps, cfg, lam, metric, seed)


def sweep_atn_archs(archs: Sequence[AtnArchConfig], models, images, cfg: AttackConfig,
                    metric=None, window: int = 20) -> list[dict]:
    """Train each candidate architecture briefly; report its smoothed final loss."""
    results = []
    for arch in archs:
        gen = build_atn(arch, images.shape[1], cfg.seed)
        _, losses = train_atn(gen, models, images, cfg, metric, log_every=0)
        tail = losses[-window:]
        results.append({
            "arch": asdict(arch),
            "params": sum(p.numel() for p in gen.parameters()),
            "final_loss": sum(tail) / len(tail),
        })
    return sorted(results, key=lambda r: r["final_loss"])
