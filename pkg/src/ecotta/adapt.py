"""Warm-up, online adaptation of meta networks, and the non-meta baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.ndimage import convolve1d

from . import tensorcore as tc
from .errors import ConfigurationError, DataError, DimensionError
from .netzoo import BATCH, EVAL, BNMode, EcoModel, configure_bn_only, forward_eco, forward_model
from .tensorcore import adaptbn_stats  # noqa: F401  (re-exported)

LOSS_VARIANTS = ("L1", "L2", "L3")
SDR_FLAVORS = ("L1", "MSE")


@dataclass
class AdaptConfig:
    """Adaptation hyperparameters.

    ``lam`` weights the self-distilled regularisation; ``h0_factor`` scales
    the entropy gate ``h0 = h0_factor * ln(C)``. AdaptBN mixing is switched
    on by ``adaptbn`` and uses ``adaptbn_N`` as its source pseudo-count.
    """

    lam: float = 0.5
    warmup_lr: float = 5e-2
    tta_lr: float = 5e-3
    momentum: float = 0.0
    warmup_epochs: int = 10
    h0_factor: float = 0.4
    loss_variant: str = "L3"
    lambda_m1: float = 0.2
    lambda_m2: float = 0.25
    sdr_flavor: str = "L1"
    adaptbn: bool = False
    adaptbn_N: int = 8
    batch_size: int = 64

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigurationError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.h0_factor <= 1:
            raise ConfigurationError(f"h0_factor must lie in (0, 1], got {self.h0_factor}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigurationError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if self.sdr_flavor not in SDR_FLAVORS:
            raise ConfigurationError(f"sdr_flavor must be one of {SDR_FLAVORS}, got {self.sdr_flavor!r}")
        if self.adaptbn_N < 0:
            raise ConfigurationError(f"adaptbn_N must be >= 0, got {self.adaptbn_N}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")

    def h0(self, num_classes):
        return entropy_threshold(num_classes, self.h0_factor)

    def bn_mode(self):
        return BNMode("adaptbn", self.adaptbn_N) if self.adaptbn else BATCH

    def as_dict(self):
        return asdict(self)


@dataclass
class StepMetrics:
    total: float
    ent: float
    reg: list = field(default_factory=list)
    n_kept: int = 0
    predictions: np.ndarray | None = None
    act_bytes: int = 0
    batch_error: float | None = None

    @property
    def mean_reg(self):
        return float(np.mean(self.reg)) if self.reg else 0.0

    def score(self, labels):
        """Fill ``batch_error`` from hidden labels (kept outside the adaptation path)."""
        self.batch_error = error_rate(self.predictions, labels)
        return self.batch_error


class FilteredLoss(NamedTuple):
    loss: tc.Tensor
    n_kept: int


# ---------------------------------------------------------------------------
# losses


def entropy_threshold(num_classes, factor=0.4):
    return factor * math.log(num_classes)


def entropy_filter_loss(logits, h0):
    """Entropy of confident samples only, averaged over the *whole* batch.

    Samples with ``H >= h0`` are masked out and receive exactly zero gradient.
    """
    if not h0 > 0:
        raise ConfigurationError(f"entropy threshold must be positive, got {h0}")
    h = tc.entropy(logits)
    mask = h.data < h0
    return FilteredLoss(tc.masked_mean(h, mask), int(mask.sum()))


def loss_entmin(logits):
    return tc.mean(tc.entropy(logits))


def loss_entmin_meanmax(logits, lambda_m1=0.2, lambda_m2=0.25):
    """``lambda_m1 * mean entropy - lambda_m2 * entropy of the mean prediction``."""
    ent = tc.scale(loss_entmin(logits), lambda_m1)
    div = tc.scale(tc.batch_mean_entropy(logits), -lambda_m2)
    return tc.add(ent, div)


def adaptation_loss(logits, cfg):
    c = logits.shape[1]
    if cfg.loss_variant == "L1":
        return FilteredLoss(loss_entmin(logits), logits.shape[0])
    if cfg.loss_variant == "L2":
        return FilteredLoss(loss_entmin_meanmax(logits, cfg.lambda_m1, cfg.lambda_m2), logits.shape[0])
    return entropy_filter_loss(logits, cfg.h0(c))


def sdr_loss(adapted, target, flavor="L1"):
    """Distance between a meta group's output and the frozen part's output.

    ``target`` is treated as a constant.
    """
    t = target.data if isinstance(target, tc.Tensor) else target
    if adapted.shape != np.shape(t):
        raise DimensionError(f"sdr_loss: adapted {adapted.shape} vs target {np.shape(t)}")
    if flavor == "L1":
        return tc.l1_loss(adapted, t)
    if flavor == "MSE":
        return tc.mse_loss(adapted, t)
    raise ConfigurationError(f"unknown sdr flavor {flavor!r}")


def _sum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = tc.add(out, t)
    return out


def error_rate(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("error_rate: empty label set")
    return float(np.mean(predictions != labels))


# ---------------------------------------------------------------------------
# online adaptation


def eco_losses(fwd, eco, cfg):
    """Adaptation loss and per-group regularisers for one eco forward.

    Each regulariser is built on :func:`tensorcore.isolate` views, so its
    gradient reaches only that group's parameters: the group input is cut
    and the frozen part output is a constant target.
    """
    ent, n_kept = adaptation_loss(fwd.logits, cfg)
    regs = []
    for g, (xk, xt), prev in zip(eco.groups, fwd.pairs, fwd.inputs):
        view = tc.isolate(xt, g.reg_boundary(xk, prev)) if xt.requires_grad else xt
        regs.append(sdr_loss(view, xk.data, cfg.sdr_flavor))
    total = tc.add(ent, tc.scale(_sum(regs), cfg.lam))
    return total, ent, regs, n_kept


def tta_step(eco, images, cfg):
    """One online update of the meta networks on an unlabeled batch."""
    params = eco.meta_parameters()
    tc.zero_grad(params)
    fwd = forward_eco(eco, images, cfg.bn_mode())
    act = tc.ledger_bytes()
    total, ent, regs, n_kept = eco_losses(fwd, eco, cfg)
    tc.backward(total)
    tc.sgd_step(params, cfg.tta_lr, cfg.momentum)
    tc.zero_grad(params)
    return StepMetrics(
        total=float(total.data),
        ent=float(ent.data),
        reg=[float(r.data) for r in regs],
        n_kept=n_kept,
        predictions=fwd.logits.data.argmax(axis=1),
        act_bytes=act,
    )


def baseline_bnstats(model, images, mode=BATCH):
    """Inference with batch statistics in every BN layer; nothing is updated."""
    if isinstance(model, EcoModel):
        model = model.encoder
    with tc.no_grad():
        return forward_model(model, images, mode)


def configure_tent(model):
    """Make only BN affine parameters trainable, in place."""
    return configure_bn_only(model)


def baseline_tent_step(model, images, lr, h0=math.inf, mode=BATCH, momentum=0.0):
    """Entropy step on BN affine parameters (``h0=inf`` means plain entropy)."""
    params = [p for p in model.bn_parameters() if p.requires_grad]
    tc.zero_grad(params)
    logits = forward_model(model, images, mode)
    act = tc.ledger_bytes()
    if math.isinf(h0):
        loss, n_kept = loss_entmin(logits), logits.shape[0]
    else:
        loss, n_kept = entropy_filter_loss(logits, h0)
    tc.backward(loss)
    tc.sgd_step(params, lr, momentum)
    tc.zero_grad(params)
    value = float(loss.data)
    return StepMetrics(
        total=value,
        ent=value,
        n_kept=n_kept,
        predictions=logits.data.argmax(axis=1),
        act_bytes=act,
    )


def predict(model, images, mode=EVAL):
    """Logits as a numpy array, without graph construction."""
    with tc.no_grad():
        if isinstance(model, EcoModel):
            return forward_eco(model, images, BNMode(mode.mode, mode.adapt_n, False)).logits.data
        return forward_model(model, images, mode).data


def evaluate(model, images, labels, batch_size=256, mode=EVAL):
    """Argmax error rate over a labelled set; no parameters or statistics change."""
    n = len(labels)
    if n == 0:
        raise DataError("evaluate: empty dataset")
    wrong = 0
    for start in range(0, n, batch_size):
        logits = predict(model, images[start : start + batch_size], mode)
        wrong += int((logits.argmax(axis=1) != np.asarray(labels[start : start + batch_size])).sum())
    return wrong / n


# ---------------------------------------------------------------------------
# supervised phases (before deployment)


def _gaussian_kernel3(sigma):
    k = np.exp(-0.5 * (np.arange(-1, 2) / sigma) ** 2)
    return k / k.sum()


def _gray(x):
    return 0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]


def _color_jitter(x, rng):
    b = rng.uniform(0.6, 1.4)
    c = rng.uniform(0.6, 1.4)
    s = rng.uniform(0.6, 1.4)
    hue = rng.uniform(-0.1, 0.1)
    x = np.clip(x * b, 0, 1)
    m = _gray(x).mean(axis=(1, 2))[:, None, None, None]
    x = np.clip((x - m) * c + m, 0, 1)
    g = _gray(x)[:, None]
    x = np.clip((x - g) * s + g, 0, 1)
    # hue: rotate the chroma plane of YIQ
    yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float32)
    ang = 2 * np.pi * hue
    rot = np.array([[1, 0, 0], [0, np.cos(ang), -np.sin(ang)], [0, np.sin(ang), np.cos(ang)]], dtype=np.float32)
    mat = np.linalg.inv(yiq) @ rot @ yiq
    x = np.einsum("ij,bjhw->bihw", mat.astype(np.float32), x)
    return np.clip(x, 0, 1)


def warmup_transform(batch, rng):
    """Colour jitter (p=0.4), 3x3 Gaussian blur (p=0.2), grayscale (p=0.1); one draw per batch."""
    x = batch.astype(np.float32, copy=True)
    if rng.random() < 0.4:
        x = _color_jitter(x, rng)
    if rng.random() < 0.2:
        k = _gaussian_kernel3(rng.uniform(0.1, 2.0))
        x = convolve1d(convolve1d(x, k, axis=2, mode="reflect"), k, axis=3, mode="reflect")
    if rng.random() < 0.1:
        x = np.repeat(x.mean(axis=1, keepdims=True), 3, axis=1)
    return x.astype(np.float32)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def train_source(model, images, labels, epochs=10, lr=0.1, batch_size=64, seed=0, momentum=0.0, log=None):
    """Supervised pre-training of the original network (all parameters, BN train mode)."""
    if len(labels) == 0:
        raise DataError("train_source: empty dataset")
    rng = np.random.default_rng(seed)
    model.set_frozen(False)
    params = model.parameters()
    mode = BNMode("train", update_stats=True)
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(labels), batch_size, rng):
            tc.zero_grad(params)
            loss = tc.cross_entropy(_forward_train(model, images[idx], mode), labels[idx])
            tc.backward(loss)
            tc.sgd_step(params, lr, momentum)
            losses.append(float(loss.data))
        if log is not None:
            log(f"source epoch {epoch + 1}/{epochs}: loss {np.mean(losses):.4f}")
    tc.zero_grad(params)
    tc.reset_momentum(params)
    model.set_frozen(True)
    recalibrate_bn(model, images)
    return model


def recalibrate_bn(model, images, batch_size=250):
    """Replace every BN's running statistics by their average over ``images``.

    The moving averages kept during training lag behind the final weights;
    one no-grad pass with the final weights gives statistics that match
    what the deployed network actually sees.
    """
    bns = model.bns()
    saved = [bn.momentum for bn in bns]
    mode = BNMode("train", update_stats=True)
    with tc.no_grad():
        for i, start in enumerate(range(0, len(images), batch_size)):
            for bn in bns:
                bn.momentum = 1.0 / (i + 1)
            model(tc.Tensor(images[start : start + batch_size]), mode)
    for bn, m in zip(bns, saved):
        bn.momentum = m
    return model


def _forward_train(model, images, mode):
    tc.reset_ledger()
    return model(tc.Tensor(images), mode)


def snapshot(params):
    return [p.data.copy() for p in params]


def param_distance(params, reference):
    """L2 distance between current parameter values and a snapshot."""
    return float(np.sqrt(sum(float(((p.data - r) ** 2).sum()) for p, r in zip(params, reference))))


def warmup(eco, images, labels, cfg, seed=0, log=None):
    """Train only the meta networks on source data with cross-entropy.

    BN layers use batch statistics (the deployment regime); the meta output
    BNs additionally track running statistics. Returns a snapshot of the
    meta parameters afterwards.
    """
    if len(labels) == 0:
        raise DataError("warmup: empty dataset")
    rng = np.random.default_rng(seed)
    params = eco.meta_parameters()
    mode = BNMode("train", update_stats=True)
    bs = min(cfg.batch_size, len(labels))
    for epoch in range(cfg.warmup_epochs):
        losses = []
        for idx in _batches(len(labels), bs, rng):
            tc.zero_grad(params)
            x = warmup_transform(images[idx], rng)
            fwd = forward_eco(eco, x, mode)
            loss = tc.cross_entropy(fwd.logits, labels[idx])
            tc.backward(loss)
            tc.sgd_step(params, cfg.warmup_lr, cfg.momentum)
            losses.append(float(loss.data))
        if log is not None:
            log(f"warm-up epoch {epoch + 1}/{cfg.warmup_epochs}: loss {np.mean(losses):.4f}")
    tc.zero_grad(params)
    tc.reset_momentum(params)
    return snapshot(params)
