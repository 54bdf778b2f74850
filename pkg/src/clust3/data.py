"""Synthetic source domain, corruption suite, and 1-D equal-mass clustering demo.

Every generator is keyed by an explicit seed. Per-sample randomness is drawn
from ``default_rng([seed, split, index])`` so the output does not depend on the
order in which samples are produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, StructureError

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "blur", "brightness", "contrast")

# severity 1..5
GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_FRACTION = (0.01, 0.03, 0.06, 0.10, 0.17)
BLUR_WIDTH = (2, 3, 3, 5, 5)
BLUR_PASSES = (1, 1, 2, 2, 3)
BRIGHTNESS_SHIFT = (0.05, 0.1, 0.15, 0.2, 0.3)
CONTRAST_SCALE = (0.75, 0.6, 0.5, 0.4, 0.3)

_SPLITS = {"train": 0, "test": 1}


@dataclass
class DatasetSpec:
    num_classes: int = 8
    image_size: int = 16
    train_per_class: int = 500
    test_per_class: int = 200
    seed: int = 0


@dataclass
class Dataset:
    images: np.ndarray  # B×1×H×W float32 in [0, 1]
    labels: np.ndarray  # int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _render(k, rng, num_classes, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    theta = np.pi * k / num_classes + rng.normal(0.0, 0.06)
    freq = (1.5 + 0.75 * (k % 3)) / size * (1.0 + rng.normal(0.0, 0.04))
    phase = rng.uniform(0.0, 2 * np.pi)
    proj = (xx - c) * np.cos(theta) + (yy - c) * np.sin(theta)
    grating = rng.uniform(0.15, 0.25) * np.sin(2 * np.pi * freq * proj + phase)

    ang = 2 * np.pi * k / num_classes
    bx = c + 0.28 * size * np.cos(ang) + rng.normal(0.0, 0.6)
    by = c + 0.28 * size * np.sin(ang) + rng.normal(0.0, 0.6)
    blob = rng.uniform(0.22, 0.32) * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * (0.12 * size) ** 2))

    img = 0.4 + rng.normal(0.0, 0.03) + grating + blob + rng.normal(0.0, 0.02, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def _make_split(spec: DatasetSpec, split, per_class):
    sid = _SPLITS[split]
    n = spec.num_classes * per_class
    images = np.empty((n, 1, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, sid, i])
        images[i, 0] = _render(int(labels[i]), rng, spec.num_classes, spec.image_size)
    order = np.random.default_rng([spec.seed, sid, n, 7]).permutation(n)
    return Dataset(images[order], labels[order].astype(np.int64), spec.num_classes)


def generate_dataset(spec: DatasetSpec = None):
    """Return ``(train, test)`` class-interleaved datasets of oriented gratings plus a blob."""
    spec = spec or DatasetSpec()
    return _make_split(spec, "train", spec.train_per_class), _make_split(spec, "test", spec.test_per_class)


# ---------------------------------------------------------------------------
# corruptions


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 1 <= int(self.severity) <= 5:
            raise ConfigError(f"severity must lie in 1..5, got {self.severity}")


@dataclass
class CorruptedBatch:
    images: np.ndarray
    labels: np.ndarray
    kind: str
    severity: int


def corrupt_images(images, spec: CorruptionSpec):
    images = np.asarray(images, dtype=np.float32)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ContractError("pixel values must lie in [0, 1]")
    s = int(spec.severity) - 1
    rng = np.random.default_rng([spec.seed, CORRUPTIONS.index(spec.kind), s + 1])
    x = images.astype(np.float64)
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0.0, GAUSSIAN_SIGMA[s], size=x.shape)
    elif spec.kind == "impulse_noise":
        hit = rng.random(x.shape) < IMPULSE_FRACTION[s]
        salt = rng.random(x.shape) < 0.5
        x = np.where(hit, salt.astype(np.float64), x)
    elif spec.kind == "blur":
        for _ in range(BLUR_PASSES[s]):
            x = ndimage.uniform_filter(x, size=(1, 1, BLUR_WIDTH[s], BLUR_WIDTH[s]), mode="reflect")
    elif spec.kind == "brightness":
        x = x + BRIGHTNESS_SHIFT[s]
    elif spec.kind == "contrast":
        x = (x - 0.5) * CONTRAST_SCALE[s] + 0.5
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def apply_corruption(images, labels, spec: CorruptionSpec) -> CorruptedBatch:
    return CorruptedBatch(corrupt_images(images, spec), np.asarray(labels), spec.kind, int(spec.severity))


# ---------------------------------------------------------------------------
# dataset dump files


def save_dataset(path, ds: Dataset):
    header = {"num_classes": int(ds.num_classes), "image_size": int(ds.images.shape[-1]), "count": len(ds)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise StructureError(f"{path}: missing header line")
    header = json.loads(blob[:nl])
    n, size = header["count"], header["image_size"]
    n_img = n * size * size
    expected = nl + 1 + 4 * n_img + 2 * n
    if len(blob) != expected:
        raise StructureError(f"{path}: expected {expected} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype="<f4", count=n_img, offset=nl + 1).reshape(n, 1, size, size)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=nl + 1 + 4 * n_img)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), header["num_classes"])


# ---------------------------------------------------------------------------
# 1-D equal-mass clustering


@dataclass
class OneDDistribution:
    components: list = field(default_factory=lambda: [(0.55, -1.0, 0.7), (0.45, 1.3, 0.9)])
    shift: float = 0.0

    def __post_init__(self):
        self.components = [tuple(map(float, c)) for c in self.components]
        w = np.array([c[0] for c in self.components])
        if not np.isclose(w.sum(), 1.0) or (w < 0).any():
            raise ContractError("mixture weights must be non-negative and sum to 1")
        if any(c[2] <= 0 for c in self.components):
            raise ContractError("component std must be positive")

    def mean(self):
        return sum(w * m for w, m, _ in self.components) + self.shift

    def std(self):
        mu = self.mean() - self.shift
        second = sum(w * (s * s + m * m) for w, m, s in self.components)
        return float(np.sqrt(second - mu * mu))

    def shifted(self, offset):
        return OneDDistribution(list(self.components), self.shift + offset)


def sample_1d(dist: OneDDistribution, n, seed):
    rng = np.random.default_rng(seed)
    w = np.array([c[0] for c in dist.components])
    comp = rng.choice(len(w), size=n, p=w)
    means = np.array([c[1] for c in dist.components])[comp]
    stds = np.array([c[2] for c in dist.components])[comp]
    return means + stds * rng.standard_normal(n) + dist.shift


def quantile_clusters(samples, k):
    """``k - 1`` boundaries splitting ``samples`` into intervals of equal count."""
    samples = np.sort(np.asarray(samples, dtype=np.float64))
    n = samples.size
    if k < 2 or n < k:
        raise ContractError(f"need k >= 2 and at least k samples (k={k}, n={n})")
    # boundary j is the largest sample of the j-th equal-count chunk
    return samples[(np.arange(1, k) * n) // k - 1]


def cluster_assign(boundaries, samples):
    # side="left": a value equal to a boundary joins the interval on its left
    return np.searchsorted(np.asarray(boundaries), np.asarray(samples), side="left")


def clustering_entropy_bits(boundaries, samples):
    """Entropy in bits of the hard interval assignment of ``samples``."""
    k = len(boundaries) + 1
    counts = np.bincount(cluster_assign(boundaries, samples), minlength=k).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum() / np.log(2.0))


def fig1_rows(ks=(2, 5, 10, 20), n=100_000, seed=1, shift_std=1.5, dist=None):
    """Source vs shifted-target cluster entropy for frozen source quantile boundaries.

    Assignments are hard, so H(Z|X) = 0 and the MI equals H(Z).
    """
    dist = dist or OneDDistribution()
    source = sample_1d(dist, n, seed)
    target = sample_1d(dist.shifted(shift_std * dist.std()), n, seed + 1)
    rows = []
    for k in ks:
        b = quantile_clusters(source, k)
        h_src = clustering_entropy_bits(b, source)
        h_tgt = clustering_entropy_bits(b, target)
        rows.append({"K": int(k), "source_bits": h_src, "target_bits": h_tgt, "delta_mi_bits": h_src - h_tgt})
    return rows
