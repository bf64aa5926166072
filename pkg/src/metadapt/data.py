"""Few-shot datasets: synthetic generation, binary I/O and episode sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from metadapt.autodiff import DTYPE
from metadapt.errors import (
    DatasetFormatError,
    DatasetTruncatedError,
    DatasetVersionError,
    PreconditionError,
)

SPLITS = ("train", "val", "test")
_SPLIT_TAG = {name: i for i, name in enumerate(SPLITS)}

MAGIC = b"FSDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIB")


@dataclass
class Dataset:
    """Images stored as (classes, samples_per_class, C, H, W)."""

    images: np.ndarray
    split: str = "train"
    name: str = "dataset"
    source_classes: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 5:
            raise PreconditionError("dataset images must be (classes, samples, C, H, W)")
        if self.split not in _SPLIT_TAG:
            raise ValueError(f"unknown split {self.split!r}")
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        if self.source_classes is None:
            self.source_classes = np.arange(self.num_classes)

    @property
    def num_classes(self) -> int:
        return self.images.shape[0]

    @property
    def samples_per_class(self) -> int:
        return self.images.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[2:])

    def sample_id(self, cls, idx):
        return np.asarray(cls) * self.samples_per_class + np.asarray(idx)

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(-1, *self.image_shape)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 50
    samples_per_class: int = 40
    channels: int = 3
    height: int = 16
    width: int = 16
    noise_level: float = 1.0
    transform_jitter: float = 2.5
    blobs: int = 4

    def validate(self) -> None:
        for name in ("num_classes", "samples_per_class", "channels", "height", "width", "blobs"):
            if getattr(self, name) <= 0:
                raise PreconditionError(f"{name} must be positive")
        if self.noise_level < 0 or self.transform_jitter < 0:
            raise PreconditionError("noise_level and transform_jitter must be non-negative")


def _class_template(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """A few coloured anisotropic Gaussian blobs plus one oriented stroke."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((spec.channels, h, w))
    for _ in range(spec.blobs):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        sy, sx = rng.uniform(0.06, 0.2) * h, rng.uniform(0.06, 0.2) * w
        blob = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        img += rng.uniform(-1.0, 1.0, size=(spec.channels, 1, 1)) * blob
    theta = rng.uniform(0, np.pi)
    offset = rng.uniform(-0.25, 0.25) * min(h, w)
    dist = (xx - w / 2) * np.sin(theta) - (yy - h / 2) * np.cos(theta) - offset
    img += rng.uniform(-1.0, 1.0, size=(spec.channels, 1, 1)) * np.exp(-0.5 * (dist / 0.8) ** 2)
    return img


def _render(template: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    j = spec.transform_jitter
    if j == 0:
        out = template.copy()
    else:
        angle = rng.normal(0.0, 0.12 * j)
        scale = 1.0 + rng.normal(0.0, 0.06 * j)
        shift = rng.normal(0.0, 0.8 * j, size=2)
        c, s = np.cos(angle), np.sin(angle)
        mat = np.array([[c, -s], [s, c]]) / scale
        centre = np.array([spec.height, spec.width]) / 2 - 0.5
        offset = centre - mat @ (centre + shift)
        out = np.stack([ndimage.affine_transform(ch, mat, offset, order=1, mode="constant") for ch in template])
    if spec.noise_level:
        out = out + rng.normal(0.0, spec.noise_level, size=out.shape)
    return out


def synth_images(spec: SynthSpec, seed: int) -> np.ndarray:
    spec.validate()
    root = np.random.SeedSequence(seed)
    class_seqs = root.spawn(spec.num_classes)
    out = np.empty((spec.num_classes, spec.samples_per_class, spec.channels, spec.height, spec.width), dtype=DTYPE)
    for c, seq in enumerate(class_seqs):
        trng, srng = (np.random.default_rng(s) for s in seq.spawn(2))
        template = _class_template(spec, trng)
        for k in range(spec.samples_per_class):
            out[c, k] = _render(template, spec, srng)
    return out


def split_classes(num_classes: int, seed: int, fractions=(0.6, 0.2, 0.2)) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(num_classes)
    n_train = int(round(fractions[0] * num_classes))
    n_val = int(round(fractions[1] * num_classes))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def synth_dataset(spec: SynthSpec, seed: int, name: str = "synth") -> dict[str, Dataset]:
    """Class-disjoint train/val/test datasets (60/20/20 of the classes)."""
    images = synth_images(spec, seed)
    return {
        split: Dataset(images[cls], split=split, name=name, source_classes=cls)
        for split, cls in split_classes(spec.num_classes, seed).items()
    }


# ----------------------------------------------------------------------
# binary format
# ----------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    n, k, c, h, w = ds.images.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, k, c, h, w, _SPLIT_TAG[ds.split])
    payload = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_dataset(path, name: str | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: not an FSDS file")
    if len(raw) < _HEADER.size:
        raise DatasetTruncatedError(f"{path}: header is truncated")
    _, version, n, k, c, h, w, tag = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    if tag >= len(SPLITS):
        raise DatasetFormatError(f"{path}: unknown split tag {tag}")
    expected = n * k * c * h * w * 4
    if len(raw) - _HEADER.size != expected:
        raise DatasetTruncatedError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, header implies {expected}")
    images = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, k, c, h, w)
    return Dataset(images.astype(DTYPE), split=SPLITS[tag], name=name or Path(path).stem)


# ----------------------------------------------------------------------
# episodes
# ----------------------------------------------------------------------


@dataclass
class Episode:
    """Support/query images with episode-local labels 0..N-1.

    ``*_ids`` are dataset sample ids (class * samples_per_class + index);
    ``support_flipped`` marks mirrored copies added by ``hflip_augment``.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_ids: np.ndarray
    query_ids: np.ndarray
    classes: np.ndarray
    support_flipped: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.support_flipped is None:
            self.support_flipped = np.zeros(len(self.support_y), dtype=bool)

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def support_size(self) -> int:
        return len(self.support_y)

    def sample_ids(self) -> np.ndarray:
        return np.concatenate([self.support_ids, self.query_ids])


def sample_episode(
    ds: Dataset,
    n_way: int,
    k_shot: int,
    q_query: int,
    rng: np.random.Generator,
    pool: dict[int, np.ndarray] | None = None,
) -> Episode:
    """N classes without replacement, then K+Q distinct samples per class.

    ``pool`` optionally restricts the per-class sample indices (a fold).
    """
    classes = np.arange(ds.num_classes) if pool is None else np.array(sorted(pool))
    if len(classes) < n_way:
        raise PreconditionError(f"need {n_way} classes, dataset has {len(classes)}")
    chosen = np.sort(rng.choice(classes, size=n_way, replace=False))
    s_ids, q_ids = [], []
    for c in chosen:
        avail = np.arange(ds.samples_per_class) if pool is None else pool[int(c)]
        if len(avail) < k_shot + q_query:
            raise PreconditionError(f"class {c} has {len(avail)} samples, need {k_shot + q_query}")
        picked = rng.choice(avail, size=k_shot + q_query, replace=False)
        s_ids.append(ds.sample_id(c, picked[:k_shot]))
        q_ids.append(ds.sample_id(c, picked[k_shot:]))
    support_ids, query_ids = np.concatenate(s_ids), np.concatenate(q_ids)
    flat = ds.flat_images()
    return Episode(
        support_x=flat[support_ids],
        support_y=np.repeat(np.arange(n_way), k_shot),
        query_x=flat[query_ids],
        query_y=np.repeat(np.arange(n_way), q_query),
        support_ids=support_ids,
        query_ids=query_ids,
        classes=chosen,
    )


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


def hflip_augment(ep: Episode) -> Episode:
    """Append the mirror image of every support sample with the same label."""
    return replace(
        ep,
        support_x=np.concatenate([ep.support_x, hflip(ep.support_x)]),
        support_y=np.concatenate([ep.support_y, ep.support_y]),
        support_ids=np.concatenate([ep.support_ids, ep.support_ids]),
        support_flipped=np.concatenate([ep.support_flipped, ~ep.support_flipped]),
    )


@dataclass
class FoldSplit:
    """Class-stratified split of every class's samples into two disjoint folds."""

    pool_w: dict[int, np.ndarray]
    pool_alpha: dict[int, np.ndarray]
    ratio: float
    seed: int

    @classmethod
    def make(cls, ds: Dataset, seed: int, ratio: float = 0.5) -> "FoldSplit":
        if not 0 < ratio < 1:
            raise PreconditionError("fold ratio must lie in (0, 1)")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        cut = int(round(ratio * ds.samples_per_class))
        if cut < 1 or cut >= ds.samples_per_class:
            raise PreconditionError("both folds need at least one sample per class")
        pw, pa = {}, {}
        for c in range(ds.num_classes):
            perm = rng.permutation(ds.samples_per_class)
            pw[c], pa[c] = np.sort(perm[:cut]), np.sort(perm[cut:])
        return cls(pw, pa, ratio, seed)

    def ids(self, ds: Dataset, fold: str) -> set[int]:
        pool = self.pool_w if fold == "w" else self.pool_alpha
        return {int(ds.sample_id(c, i)) for c, idx in pool.items() for i in idx}
