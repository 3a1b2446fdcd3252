"""Face corpus ingestion: index, identity splits, verification pairs, gallery trials.

The corpus layout is ``<root>/<identity>/<image file>``. Images are decoded with
PIL, resized to a fixed size and scaled to ``[0, 1]``; every epsilon in the
package lives on that scale.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
POSITIVE, NEGATIVE = "positive", "negative"


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Entry:
    image_id: str
    identity: str
    relative_path: str


@dataclass(frozen=True)
class DatasetIndex:
    root_path: str
    entries: tuple[Entry, ...]
    image_size: tuple[int, int, int]  # (height, width, channels)
    skipped: tuple[str, ...] = ()
    dropped_identities: int = 0

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("image_ids must be unique")

    @property
    def identities(self) -> list[str]:
        return sorted({e.identity for e in self.entries})

    def by_identity(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for e in self.entries:
            groups.setdefault(e.identity, []).append(e.image_id)
        return groups

    def identity_of(self, image_id: str) -> str:
        return self._lookup()[image_id].identity

    def path_of(self, image_id: str) -> Path:
        return Path(self.root_path) / self._lookup()[image_id].relative_path

    def _lookup(self) -> dict[str, Entry]:
        cache = self.__dict__.get("_by_id")
        if cache is None:
            cache = {e.image_id: e for e in self.entries}
            object.__setattr__(self, "_by_id", cache)
        return cache

    def to_json(self) -> dict:
        return {
            "root_path": self.root_path,
            "image_size": list(self.image_size),
            "entries": [asdict(e) for e in self.entries],
            "skipped": list(self.skipped),
            "dropped_identities": self.dropped_identities,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetIndex":
        return cls(
            root_path=data["root_path"],
            entries=tuple(Entry(**e) for e in data["entries"]),
            image_size=tuple(data["image_size"]),
            skipped=tuple(data.get("skipped", ())),
            dropped_identities=data.get("dropped_identities", 0),
        )


@dataclass(frozen=True)
class IdentitySplit:
    train_identities: frozenset[str]
    eval_identities: frozenset[str]
    seed: int
    eval_fraction: float = 0.5

    def to_json(self) -> dict:
        return {
            "train_identities": sorted(self.train_identities),
            "eval_identities": sorted(self.eval_identities),
            "seed": self.seed,
            "eval_fraction": self.eval_fraction,
        }

    @classmethod
    def from_json(cls, data: dict) -> "IdentitySplit":
        return cls(
            frozenset(data["train_identities"]),
            frozenset(data["eval_identities"]),
            data["seed"],
            data.get("eval_fraction", 0.5),
        )


@dataclass(frozen=True)
class VerificationPair:
    image_id_a: str
    image_id_b: str
    label: str

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE


@dataclass(frozen=True)
class VerificationPairSet:
    pairs: tuple[VerificationPair, ...]
    seed: int

    def __len__(self):
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.is_positive for p in self.pairs], dtype=bool)

    def to_json(self) -> dict:
        return {"seed": self.seed, "pairs": [[p.image_id_a, p.image_id_b, p.label] for p in self.pairs]}

    @classmethod
    def from_json(cls, data: dict) -> "VerificationPairSet":
        return cls(tuple(VerificationPair(*p) for p in data["pairs"]), data["seed"])


@dataclass(frozen=True)
class GalleryTrial:
    gallery: tuple[tuple[str, str], ...]  # (image_id, identity)
    probe_image_id: str
    probe_identity: str
    seed: int

    def to_json(self) -> dict:
        return {
            "gallery": [list(g) for g in self.gallery],
            "probe_image_id": self.probe_image_id,
            "probe_identity": self.probe_identity,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GalleryTrial":
        return cls(
            tuple(tuple(g) for g in data["gallery"]),
            data["probe_image_id"],
            data["probe_identity"],
            data["seed"],
        )


def load_image(path: str | os.PathLike, image_size: Sequence[int]) -> np.ndarray:
    """Decode one image to a float32 HWC array in [0, 1] at ``image_size``."""
    h, w, c = image_size
    with Image.open(path) as img:
        img = img.convert("RGB" if c == 3 else "L")
        if img.size != (w, h):
            img = img.resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _try_decode(path: Path, image_size) -> bool:
    try:
        arr = load_image(path, image_size)
    except (UnidentifiedImageError, OSError, ValueError):
        return False
    return arr.shape == tuple(image_size)


def build_index(
    root: str | os.PathLike,
    image_size: Sequence[int] = (64, 64, 3),
    workers: int = 4,
) -> DatasetIndex:
    """Scan ``root/<identity>/<image>`` and return a validated index.

    Undecodable files are skipped and recorded; identities left with fewer
    than two images are dropped (their count is kept in ``dropped_identities``).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"corpus root does not exist: {root}")
    image_size = tuple(int(v) for v in image_size)

    candidates: list[tuple[str, Path]] = []
    for ident_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(ident_dir.iterdir()):
            if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                candidates.append((ident_dir.name, f))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        ok = list(pool.map(lambda c: _try_decode(c[1], image_size), candidates))

    skipped = tuple(str(f.relative_to(root).as_posix()) for (_, f), good in zip(candidates, ok) if not good)
    if skipped:
        log.warning("skipped %d undecodable images", len(skipped))

    grouped: dict[str, list[Entry]] = {}
    for (ident, f), good in zip(candidates, ok):
        if good:
            rel = f.relative_to(root).as_posix()
            grouped.setdefault(ident, []).append(Entry(rel, ident, rel))

    dropped = sum(1 for v in grouped.values() if len(v) < 2)
    if dropped:
        log.warning("dropped %d identities with fewer than 2 images", dropped)
    entries = tuple(e for v in grouped.values() if len(v) >= 2 for e in v)
    if not entries:
        raise DatasetError(f"no usable identities under {root}")
    return DatasetIndex(str(root), entries, image_size, skipped, dropped)


def split_identities(index: DatasetIndex, eval_fraction: float = 0.5, seed: int = 0) -> IdentitySplit:
    """Identity-disjoint split; ``|eval| = floor(fraction * total + 0.5)`` clamped to [1, total-1]."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    identities = index.identities
    if len(identities) < 2:
        raise DatasetError("need at least 2 identities to split")
    n_eval = int(math.floor(eval_fraction * len(identities) + 0.5))
    n_eval = min(max(n_eval, 1), len(identities) - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(identities))
    eval_ids = frozenset(identities[i] for i in order[:n_eval])
    train_ids = frozenset(identities) - eval_ids
    return IdentitySplit(train_ids, eval_ids, seed, eval_fraction)


def build_verification_pairs(
    index: DatasetIndex,
    identities: Iterable[str],
    max_pairs: int | None = None,
    seed: int = 0,
) -> VerificationPairSet:
    """Balanced positive/negative pairs over ``identities``.

    Positives are all unordered pairs of distinct images of the same identity,
    subsampled uniformly when they exceed ``max_pairs // 2``. Negatives are
    drawn in equal number, never repeating an unordered image pair; identity
    pairs may repeat. If fewer distinct negatives exist than positives, the
    positives are trimmed to keep the labels balanced.
    """
    identities = set(identities)
    groups = index.by_identity()
    unknown = identities - set(groups)
    if unknown:
        raise DatasetError(f"identities not in index: {sorted(unknown)[:5]}")
    groups = {k: sorted(groups[k]) for k in sorted(identities)}
    if not any(len(v) >= 2 for v in groups.values()):
        raise DatasetError("no identity with at least 2 images")

    rng = np.random.default_rng(seed)
    positives = [(a, b) for ids in groups.values() for a, b in combinations(ids, 2)]
    n_pos = len(positives)
    if max_pairs is not None:
        n_pos = min(n_pos, max_pairs // 2)

    images = [(i, ident) for ident, ids in groups.items() for i in ids]
    sizes = np.array([len(v) for v in groups.values()])
    total_neg = int((sizes.sum() ** 2 - (sizes**2).sum()) // 2)
    n_pos = min(n_pos, total_neg)
    if n_pos == 0:
        raise DatasetError("cannot form any balanced pair")

    if n_pos < len(positives):
        keep = np.sort(rng.choice(len(positives), size=n_pos, replace=False))
        positives = [positives[k] for k in keep]

    if total_neg <= 4 * n_pos:
        all_neg = [
            (a, b) for (a, ia), (b, ib) in combinations(images, 2) if ia != ib
        ]
        pick = np.sort(rng.choice(len(all_neg), size=n_pos, replace=False))
        negatives = [all_neg[k] for k in pick]
    else:
        ident_names = list(groups)
        seen: set[tuple[str, str]] = set()
        negatives = []
        while len(negatives) < n_pos:
            i, j = rng.choice(len(ident_names), size=2, replace=False)
            a = groups[ident_names[i]][rng.integers(len(groups[ident_names[i]]))]
            b = groups[ident_names[j]][rng.integers(len(groups[ident_names[j]]))]
            key = (a, b) if a < b else (b, a)
            if key in seen:
                continue
            seen.add(key)
            negatives.append(key)

    pairs = [VerificationPair(a, b, POSITIVE) for a, b in positives]
    pairs += [VerificationPair(a, b, NEGATIVE) for a, b in negatives]
    return VerificationPairSet(tuple(pairs), seed)


def build_gallery_trials(
    index: DatasetIndex,
    identities: Iterable[str],
    gallery_size: int = 10,
    n_trials: int = 200,
    seed: int = 0,
    probe_all: bool = False,
) -> list[GalleryTrial]:
    """Random galleries of ``gallery_size`` unique identities.

    Each gallery gets one enrolled image per identity. With ``probe_all`` every
    gallery identity is probed once (``n_trials * gallery_size`` tests);
    otherwise one random gallery identity is probed per trial.
    """
    groups = index.by_identity()
    usable = sorted(i for i in set(identities) if len(groups.get(i, ())) >= 2)
    if gallery_size < 1 or gallery_size > len(usable):
        raise DatasetError(f"gallery_size {gallery_size} exceeds {len(usable)} usable identities")
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(n_trials):
        chosen = [usable[k] for k in rng.choice(len(usable), size=gallery_size, replace=False)]
        gallery, probes = [], {}
        for ident in chosen:
            ids = sorted(groups[ident])
            g, p = rng.choice(len(ids), size=2, replace=False)
            gallery.append((ids[g], ident))
            probes[ident] = ids[p]
        gallery = tuple(gallery)
        probed = chosen if probe_all else [chosen[rng.integers(gallery_size)]]
        for ident in probed:
            trials.append(GalleryTrial(gallery, probes[ident], ident, seed))
    return trials


def save_json(obj, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = obj.to_json() if hasattr(obj, "to_json") else obj
    if isinstance(data, list):
        data = [d.to_json() if hasattr(d, "to_json") else d for d in data]
    with open(path, "w") as f:
        json.dump(data, f, indent=1)


def load_trials(path: str | os.PathLike) -> list[GalleryTrial]:
    with open(path) as f:
        return [GalleryTrial.from_json(d) for d in json.load(f)]


class ImageStore:
    """Decoded-image cache keyed by image_id; returns NCHW float tensors."""

    def __init__(self, index: DatasetIndex, workers: int = 4):
        self.index = index
        self.workers = workers
        self._cache: dict[str, torch.Tensor] = {}

    def _decode(self, image_id: str) -> torch.Tensor:
        arr = load_image(self.index.path_of(image_id), self.index.image_size)
        return torch.from_numpy(arr).permute(2, 0, 1).contiguous()

    def load(self, image_ids: Sequence[str]) -> torch.Tensor:
        missing = [i for i in dict.fromkeys(image_ids) if i not in self._cache]
        if missing:
            with ThreadPoolExecutor(max_workers=max(1, self.workers)) as pool:
                for i, t in zip(missing, pool.map(self._decode, missing)):
                    self._cache[i] = t
        return torch.stack([self._cache[i] for i in image_ids])

    def identity_tensors(self, identities: Iterable[str]) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        """All images of ``identities`` with integer labels (sorted identity order)."""
        groups = self.index.by_identity()
        names = sorted(identities)
        ids, labels = [], []
        for k, name in enumerate(names):
            for image_id in groups[name]:
                ids.append(image_id)
                labels.append(k)
        return self.load(ids), torch.tensor(labels, dtype=torch.long), ids


@dataclass
class SyntheticFaceParams:
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    iris: tuple[float, float, float]
    face_w: float
    face_h: float
    eye_dx: float
    eye_y: float
    eye_r: float
    brow_tilt: float
    brow_w: float
    nose_len: float
    nose_w: float
    mouth_w: float
    mouth_y: float
    hair_style: int
    hairline: float
    beard: bool
    glasses: bool
    extras: dict = field(default_factory=dict)


def _random_identity(rng: np.random.Generator) -> SyntheticFaceParams:
    tone = rng.uniform(0.25, 0.95)
    skin = (min(1.0, tone + 0.12), tone * rng.uniform(0.72, 0.9), tone * rng.uniform(0.55, 0.75))
    return SyntheticFaceParams(
        skin=skin,
        hair=tuple(rng.uniform(0.0, 0.8, size=3) * rng.uniform(0.3, 1.0)),
        iris=tuple(rng.uniform(0.05, 0.7, size=3)),
        face_w=rng.uniform(0.26, 0.36),
        face_h=rng.uniform(0.34, 0.44),
        eye_dx=rng.uniform(0.09, 0.16),
        eye_y=rng.uniform(-0.1, 0.0),
        eye_r=rng.uniform(0.025, 0.05),
        brow_tilt=rng.uniform(-0.04, 0.04),
        brow_w=rng.uniform(0.01, 0.03),
        nose_len=rng.uniform(0.06, 0.14),
        nose_w=rng.uniform(0.02, 0.06),
        mouth_w=rng.uniform(0.08, 0.18),
        mouth_y=rng.uniform(0.16, 0.24),
        hair_style=int(rng.integers(4)),
        hairline=rng.uniform(0.2, 0.34),
        beard=bool(rng.random() < 0.3),
        glasses=bool(rng.random() < 0.25),
    )


def render_face(p: SyntheticFaceParams, rng: np.random.Generator, size: int = 64) -> Image.Image:
    """Draw one pose/lighting/expression variant of a parametric face."""
    from PIL import ImageDraw, ImageFilter

    s = size * 4
    bg = tuple(int(v) for v in rng.uniform(40, 220, size=3))
    img = Image.new("RGB", (s, s), bg)
    d = ImageDraw.Draw(img)
    cx = s * (0.5 + rng.uniform(-0.04, 0.04))
    cy = s * (0.52 + rng.uniform(-0.04, 0.04))
    k = s * rng.uniform(0.94, 1.06)

    def col(c, shade=1.0):
        return tuple(int(255 * min(1.0, max(0.0, v * shade))) for v in c)

    fw, fh = p.face_w * k, p.face_h * k
    if p.hair_style in (2, 3):
        d.ellipse([cx - fw * 1.15, cy - fh * 1.12, cx + fw * 1.15, cy + fh * (0.4 if p.hair_style == 2 else 1.0)], fill=col(p.hair))
    d.ellipse([cx - fw, cy - fh, cx + fw, cy + fh], fill=col(p.skin))
    if p.hair_style in (1, 2, 3):
        top = cy - fh * 1.08
        d.chord([cx - fw * 1.05, top, cx + fw * 1.05, cy - fh + p.hairline * k], 180, 360, fill=col(p.hair))
    if p.beard:
        d.chord([cx - fw * 0.95, cy - fh * 0.1, cx + fw * 0.95, cy + fh * 1.02], 0, 180, fill=col(p.hair, 0.8))

    ey = cy + p.eye_y * k
    er = p.eye_r * k
    openness = rng.uniform(0.6, 1.0)
    for sgn in (-1, 1):
        ex = cx + sgn * p.eye_dx * k
        d.ellipse([ex - er * 1.6, ey - er * openness, ex + er * 1.6, ey + er * openness], fill=(245, 245, 240))
        d.ellipse([ex - er * 0.8, ey - er * 0.8 * openness, ex + er * 0.8, ey + er * 0.8 * openness], fill=col(p.iris))
        by = ey - er * 2.2
        d.line([ex - er * 1.8, by + sgn * p.brow_tilt * k, ex + er * 1.8, by - sgn * p.brow_tilt * k],
               fill=col(p.hair, 0.7), width=max(1, int(p.brow_w * k)))
        if p.glasses:
            d.ellipse([ex - er * 2.4, ey - er * 2.0, ex + er * 2.4, ey + er * 2.0], outline=(20, 20, 20), width=max(1, int(0.01 * k)))

    d.polygon([(cx, ey + er), (cx - p.nose_w * k, ey + p.nose_len * k), (cx + p.nose_w * k, ey + p.nose_len * k)],
              fill=col(p.skin, 0.8))
    my = cy + p.mouth_y * k
    smile = rng.uniform(-0.02, 0.05) * k
    mw = p.mouth_w * k
    d.arc([cx - mw, my - abs(smile) - 2, cx + mw, my + abs(smile) + 2], 0 if smile >= 0 else 180,
          180 if smile >= 0 else 360, fill=(150, 40, 50), width=max(2, int(0.015 * k)))

    img = img.rotate(rng.uniform(-8, 8), resample=Image.BILINEAR, fillcolor=bg)
    img = img.filter(ImageFilter.GaussianBlur(radius=1.0)).resize((size, size), Image.LANCZOS)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = arr * rng.uniform(0.8, 1.15) + rng.normal(0.0, 0.02, size=arr.shape)
    return Image.fromarray((np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8))


def make_synthetic_corpus(
    root: str | os.PathLike,
    n_identities: int = 40,
    images_per_identity: int = 20,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write a parametric-face corpus to ``root/<identity>/<n>.png``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(n_identities):
        params = _random_identity(rng)
        ident_dir = root / f"id{i:04d}"
        ident_dir.mkdir(parents=True, exist_ok=True)
        for j in range(images_per_identity):
            render_face(params, rng, size).save(ident_dir / f"{j:03d}.png")
    return root
