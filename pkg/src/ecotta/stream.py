"""Synthetic source data, parametric corruptions and target-stream schedules.

Every generator is a pure function of its seed (and batch index), so a
stream can be replayed exactly or produced from another thread.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .errors import ConfigurationError, DataError, FormatError

IMAGE_SHAPE = (3, 32, 32)
SOURCE_NOISE = 0.05
WORLD_SEED = 20230
BASE_AMP = 0.04
COLOR_SPREAD = 0.04
GRATING_AMP = (0.06, 0.14)
DISTRACTOR_AMP = (0.0, 0.1)
THETA_JITTER = 0.08
GLOBAL_JITTER = 0.08

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "contrast",
    "brightness",
    "pixelate",
    "quantize",
)

# severity 1..5
SEVERITY = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # sigma
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # photons per unit intensity
    "impulse_noise": (0.02, 0.04, 0.07, 0.11, 0.17),  # salt-and-pepper fraction
    "defocus_blur": (0.7, 1.0, 1.2, 1.4, 1.6),  # disk radius in pixels
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),  # scale about the image mean
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    "pixelate": (0.9, 0.8, 0.7, 0.6, 0.5),  # relative resolution
    "quantize": (16, 8, 5, 4, 3),  # grey levels per channel
}

MODES = ("continual", "long_term", "gradual")
GRADUAL_CHAIN = (1, 2, 3, 4, 5, 4, 3, 2, 1)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, 32, 32] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.classes)


# ---------------------------------------------------------------------------
# source generation


def _class_prototypes(classes, world):
    # module constants are read at call time so experiments can vary them
    """Per-class colour texture and grating parameters; fixed by ``world``."""
    rng = np.random.default_rng([world, classes])
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    bases, gratings = [], []
    for c in range(classes):
        base = np.zeros(IMAGE_SHAPE)
        for _ in range(4):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * (fy * yy + fx * xx) / 32 + phase)
            base += rng.normal(0, BASE_AMP, size=(3, 1, 1)) * wave
        base += 0.5 + rng.uniform(-COLOR_SPREAD, COLOR_SPREAD, size=(3, 1, 1))
        bases.append(base)
        theta = np.pi * c / classes + rng.uniform(-0.05, 0.05)
        gratings.append((theta, rng.uniform(4.0, 6.0)))
    return np.stack(bases).astype(np.float32), gratings


def gen_source(seed, n, classes=10, world=WORLD_SEED):
    """Balanced class-conditional images.

    Each class has a smooth colour texture and an oriented grating (both
    fixed by ``world``); ``seed`` draws the per-image shift, phase, contrast
    and additive noise.
    """
    if not 2 <= classes <= 16:
        raise ConfigurationError(f"classes must lie in [2, 16], got {classes}")
    if n < 0:
        raise DataError(f"n must be non-negative, got {n}")
    bases, gratings = _class_prototypes(classes, world)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    images = np.empty((n,) + IMAGE_SHAPE, dtype=np.float32)
    for i, c in enumerate(labels):
        dy, dx = rng.integers(0, 32, size=2)
        base = np.roll(bases[c], (dy, dx), axis=(1, 2)) + rng.normal(0, GLOBAL_JITTER, size=(3, 1, 1))
        theta, period = gratings[c]
        theta = theta + rng.normal(0, THETA_JITTER)
        u = np.cos(theta) * xx + np.sin(theta) * yy
        img = base + rng.uniform(*GRATING_AMP) * np.cos(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
        # class-independent distractor grating
        phi = rng.uniform(0, np.pi)
        v = np.cos(phi) * xx + np.sin(phi) * yy
        img = img + rng.uniform(*DISTRACTOR_AMP) * np.cos(2 * np.pi * v / rng.uniform(3.0, 8.0) + rng.uniform(0, 2 * np.pi))
        img = img + rng.normal(0, SOURCE_NOISE, size=IMAGE_SHAPE)
        images[i] = np.clip(img, 0, 1)
    return Dataset(images, labels.astype(np.int64), classes)


# ---------------------------------------------------------------------------
# corruptions


def _disk(radius):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (yy**2 + xx**2 <= radius**2).astype(np.float64)
    return k / k.sum()


def _pixelate(x, frac):
    size = max(1, int(round(32 * frac)))
    # area-average down to ``size`` cells, then nearest-neighbour back up
    edges = np.linspace(0, 32, size + 1).round().astype(int)
    out = np.empty_like(x)
    for i in range(size):
        rows = slice(edges[i], edges[i + 1])
        for j in range(size):
            cols = slice(edges[j], edges[j + 1])
            out[..., rows, cols] = x[..., rows, cols].mean(axis=(-2, -1), keepdims=True)
    return out


def corrupt(img, kind, severity, seed=0):
    """Apply corruption ``kind`` at ``severity`` (0 returns the input unchanged).

    ``img`` is ``[3, 32, 32]`` or a batch ``[B, 3, 32, 32]``; the result is
    clamped to ``[0, 1]``.
    """
    if kind not in SEVERITY:
        raise ConfigurationError(f"unknown corruption {kind!r}; choose from {KINDS}")
    if severity not in (0, 1, 2, 3, 4, 5):
        raise ConfigurationError(f"severity must be an integer in 0..5, got {severity!r}")
    x = np.asarray(img, dtype=np.float32)
    if severity == 0:
        return x.copy()
    p = SEVERITY[kind][severity - 1]
    rng = np.random.default_rng(seed)
    if kind == "gaussian_noise":
        out = x + rng.normal(0, p, size=x.shape)
    elif kind == "shot_noise":
        out = rng.poisson(np.clip(x, 0, 1) * p) / p
    elif kind == "impulse_noise":
        u = rng.random(x.shape)
        out = x.copy()
        out[u < p / 2] = 0.0
        out[(u >= p / 2) & (u < p)] = 1.0
    elif kind == "defocus_blur":
        k = _disk(p)
        k = k.reshape((1,) * (x.ndim - 2) + k.shape)
        out = convolve(x, k.astype(np.float32), mode="reflect")
    elif kind == "contrast":
        mu = x.mean(axis=(-3, -2, -1), keepdims=True)
        out = mu + np.float32(p) * (x - mu)
    elif kind == "brightness":
        out = x + np.float32(p)
    elif kind == "pixelate":
        out = _pixelate(x, p)
    else:  # quantize
        out = np.round(x * (p - 1)) / (p - 1)
    return np.clip(out, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Segment:
    kind: str
    severity: int
    n_batches: int
    round: int = 0


@dataclass
class StreamSchedule:
    mode: str
    segments: list = field(default_factory=list)
    seed: int = 0
    rounds: int = 1

    def __len__(self):
        return len(self.segments)

    @property
    def n_batches(self):
        return sum(s.n_batches for s in self.segments)


def make_schedule(mode, kinds=KINDS, severity=5, batches_per_segment=50, seed=0, rounds=1):
    """Ordered corruption segments.

    ``continual`` visits each kind once at ``severity``; ``long_term``
    repeats that sequence ``rounds`` times; ``gradual`` walks each kind
    through severities 1 to 5 and back.
    """
    kinds = list(kinds)
    if not kinds:
        raise ConfigurationError("make_schedule: kinds must be non-empty")
    for k in kinds:
        if k not in SEVERITY:
            raise ConfigurationError(f"unknown corruption {k!r}")
    if mode not in MODES:
        raise ConfigurationError(f"unknown schedule mode {mode!r}; choose from {MODES}")
    if batches_per_segment < 1:
        raise ConfigurationError(f"batches_per_segment must be >= 1, got {batches_per_segment}")
    if mode != "gradual" and severity not in (1, 2, 3, 4, 5):
        raise ConfigurationError(f"severity must be in 1..5, got {severity}")
    if mode == "long_term":
        if rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {rounds}")
    else:
        rounds = 1
    if mode == "gradual":
        segs = [Segment(k, s, batches_per_segment) for k in kinds for s in GRADUAL_CHAIN]
    else:
        segs = [Segment(k, severity, batches_per_segment, r) for r in range(rounds) for k in kinds]
    return StreamSchedule(mode, segs, seed, rounds)


@dataclass
class StreamBatch:
    images: np.ndarray
    labels: np.ndarray  # hidden: only for scoring
    segment_index: int
    segment: Segment


def iterate(schedule, batch_size, pool):
    """Yield corrupted batches drawn i.i.d. from ``pool`` (a :class:`Dataset`).

    Batch ``j`` of segment ``i`` depends only on ``(schedule.seed, i, j)``.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if len(pool) == 0:
        raise DataError("iterate: empty pool")
    replace = batch_size > len(pool)
    for i, seg in enumerate(schedule.segments):
        for j in range(seg.n_batches):
            rng = np.random.default_rng([schedule.seed, i, j])
            idx = rng.choice(len(pool), size=batch_size, replace=replace)
            x = corrupt(pool.images[idx], seg.kind, seg.severity, seed=int(rng.integers(2**31)))
            yield StreamBatch(x, pool.labels[idx], i, seg)


def clean_probe(model, clean, mode=None, batch_size=64):
    """Clean-data error of a (possibly adapted) model; nothing is updated.

    ``mode`` should be the deployed inference regime of the model
    (batch statistics for adapted models).
    """
    from .adapt import evaluate
    from .netzoo import EVAL

    return evaluate(model, clean.images, clean.labels, batch_size=batch_size, mode=mode or EVAL)


# ---------------------------------------------------------------------------
# binary container

_MAGIC = b"ECOSET1\x00"
_HEAD = struct.Struct("<8sIIIII")  # magic, n, classes, c, h, w


def save_dataset(path, ds):
    n = len(ds)
    c, h, w = ds.images.shape[1:]
    with open(path, "wb") as f:
        f.write(_HEAD.pack(_MAGIC, n, ds.classes, c, h, w))
        f.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError("dataset header truncated", len(raw))
    magic, n, classes, c, h, w = _HEAD.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", 0)
    npx = n * c * h * w
    need = _HEAD.size + 4 * npx + 4 * n
    if len(raw) < need:
        raise FormatError(f"dataset body truncated: need {need} bytes, have {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after dataset body", need)
    images = np.frombuffer(raw, dtype="<f4", count=npx, offset=_HEAD.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEAD.size + 4 * npx)
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise FormatError("label outside [0, classes)", _HEAD.size + 4 * npx)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), classes)
