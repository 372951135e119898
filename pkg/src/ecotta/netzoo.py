"""Frozen residual encoders, partition planning and attachable meta networks.

The runtime network is a post-activation residual encoder small enough to
train on a laptop CPU. Full-scale descriptors (WRN-40-2, WRN-28, ResNet-50)
share the :class:`EncoderSpec` type but are only consumed by
:mod:`ecotta.memledger`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, ConstructionError, DimensionError

VARIANTS = ("ours", "no_bn", "no_conv", "no_residual", "output_fed_conv")


@dataclass(frozen=True)
class EncoderSpec:
    """Stage layout of a residual encoder.

    ``stages`` holds ``(blocks, channels, stride)`` triples; ``block`` is one
    of ``"basic"`` (post-activation, runtime), ``"preact"`` (wide ResNet) or
    ``"bottleneck"`` (ResNet-50, output width ``4 * channels``).
    """

    name: str
    stages: tuple
    stem_channels: int = 16
    stem_stride: int = 1
    stem_bn: bool = True
    in_channels: int = 3
    block: str = "basic"
    num_classes: int = 10
    final_bn: bool = False
    input_res: int = 32

    @property
    def total_blocks(self):
        return sum(n for n, _, _ in self.stages)

    @property
    def expansion(self):
        return 4 if self.block == "bottleneck" else 1

    @property
    def feature_channels(self):
        return self.stages[-1][1] * self.expansion

    def block_layout(self):
        """Per-block ``(in_channels, out_channels, stride, in_scale)``.

        ``in_scale`` is the cumulative downsampling factor of the block input
        relative to the image.
        """
        out = []
        cin = self.stem_channels
        scale = self.stem_stride
        for n, width, stride in self.stages:
            cout = width * self.expansion
            for i in range(n):
                s = stride if i == 0 else 1
                out.append((cin, cout, s, scale))
                cin = cout
                scale *= s
        return out


def wrn_spec(depth, width, name=None, num_classes=10):
    if (depth - 4) % 6:
        raise ConfigurationError(f"wide ResNet depth must be 6n+4, got {depth}")
    n = (depth - 4) // 6
    return EncoderSpec(
        name=name or f"wrn{depth}_{width}",
        stages=((n, 16 * width, 1), (n, 32 * width, 2), (n, 64 * width, 2)),
        stem_channels=16,
        stem_bn=False,
        block="preact",
        num_classes=num_classes,
        final_bn=True,
    )


def mini_spec(num_classes=10):
    return EncoderSpec(
        name="mini",
        stages=((2, 16, 1), (2, 24, 2), (2, 32, 2), (2, 32, 1)),
        stem_channels=16,
        stem_stride=2,
        num_classes=num_classes,
    )


PRESETS = {
    "wrn40_2": wrn_spec(40, 2, name="wrn40_2"),
    "wrn28": wrn_spec(28, 10, name="wrn28"),
    "resnet50": EncoderSpec(
        name="resnet50",
        stages=((3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)),
        stem_channels=64,
        block="bottleneck",
    ),
    "mini": mini_spec(),
}

# Published partitions, shallow to deep.
KNOWN_PLANS = {
    ("wrn28", 4): (2, 2, 4, 4),
    ("wrn28", 5): (2, 2, 2, 2, 4),
    ("wrn40_2", 4): (3, 3, 6, 6),
    ("wrn40_2", 5): (3, 3, 3, 3, 6),
    ("resnet50", 4): (3, 3, 5, 5),
    ("resnet50", 5): (2, 2, 4, 4, 4),
}


@dataclass(frozen=True)
class PartitionPlan:
    K: int
    blocks_per_part: tuple

    def boundaries(self):
        """Half-open ``(start, stop)`` block index ranges, one per part."""
        out, start = [], 0
        for n in self.blocks_per_part:
            out.append((start, start + n))
            start += n
        return out


def plan_partition(spec, K):
    """Split the encoder's residual blocks into ``K`` parts, shallow parts denser.

    Known architectures return their published plan. Otherwise the blocks are
    spread evenly and any remainder goes to the deepest parts, which keeps the
    plan non-decreasing.
    """
    n = spec.total_blocks
    if not 1 <= K <= n:
        raise ConfigurationError(f"partition factor K={K} must lie in [1, {n}] for {spec.name}")
    key = (spec.name, K)
    if key in KNOWN_PLANS and sum(KNOWN_PLANS[key]) == n:
        return PartitionPlan(K, KNOWN_PLANS[key])
    base, rem = divmod(n, K)
    return PartitionPlan(K, tuple([base] * (K - rem) + [base + 1] * rem))


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class BNMode:
    """How every BN layer in a forward pass normalises.

    ``update_stats`` moves running statistics in train mode. Eco forwards
    pass it to the meta groups only; the original network's running
    statistics are left untouched.
    """

    mode: str = "eval"
    adapt_n: int | None = None
    update_stats: bool = False


EVAL = BNMode("eval")
BATCH = BNMode("train")


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, cin, cout, k, stride, rng, name=None):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.weight = tc.Parameter(_kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), name=name)

    def __call__(self, x):
        return tc.conv2d(x, self.weight, self.stride)

    def parameters(self):
        return [self.weight]


class Linear:
    def __init__(self, fin, fout, rng, name=None):
        self.weight = tc.Parameter(_kaiming_uniform(rng, (fin, fout), fin), name=f"{name}.weight")
        bound = 1.0 / np.sqrt(fin)
        self.bias = tc.Parameter(rng.uniform(-bound, bound, size=fout).astype(np.float32), name=f"{name}.bias")

    def __call__(self, x):
        return tc.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


def apply_bn(x, bn, mode):
    return tc.batchnorm(x, bn, mode=mode.mode, adapt_n=mode.adapt_n, update_stats=mode.update_stats)


class BasicBlock:
    """conv3x3-BN-ReLU-conv3x3-BN plus (projected) shortcut, then ReLU."""

    def __init__(self, cin, cout, stride, rng, name):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv1 = Conv2d(cin, cout, 3, stride, rng, f"{name}.conv1")
        self.bn1 = tc.BatchNormParams(cout, name=f"{name}.bn1")
        self.conv2 = Conv2d(cout, cout, 3, 1, rng, f"{name}.conv2")
        self.bn2 = tc.BatchNormParams(cout, name=f"{name}.bn2")
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, rng, f"{name}.proj")
            self.proj_bn = tc.BatchNormParams(cout, name=f"{name}.proj_bn")
        self.name = name

    def __call__(self, x, mode):
        h = tc.relu(apply_bn(self.conv1(x), self.bn1, mode))
        h = apply_bn(self.conv2(h), self.bn2, mode)
        s = x if self.proj is None else apply_bn(self.proj(x), self.proj_bn, mode)
        return tc.relu(tc.residual_add(h, s))

    def convs(self):
        return [self.conv1, self.conv2] + ([self.proj] if self.proj is not None else [])

    def bns(self):
        return [self.bn1, self.bn2] + ([self.proj_bn] if self.proj is not None else [])


class Encoder:
    """Runtime residual encoder: stem, blocks, then avg-pool and a linear classifier."""

    def __init__(self, spec, seed=0):
        if spec.block != "basic":
            raise ConstructionError(f"only 'basic' blocks are instantiable, {spec.name} uses {spec.block!r}")
        if spec.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {spec.num_classes}")
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.stem_conv = Conv2d(spec.in_channels, spec.stem_channels, 3, spec.stem_stride, rng, "stem.conv")
        self.stem_bn = tc.BatchNormParams(spec.stem_channels, name="stem.bn")
        self.blocks = [
            BasicBlock(cin, cout, s, rng, f"block{i}")
            for i, (cin, cout, s, _) in enumerate(spec.block_layout())
        ]
        self.fc = Linear(spec.feature_channels, spec.num_classes, rng, "fc")

    def stem(self, x, mode):
        return tc.relu(apply_bn(self.stem_conv(x), self.stem_bn, mode))

    def head(self, h, mode):
        return self.fc(tc.global_avg_pool(h))

    def __call__(self, x, mode=EVAL):
        if not isinstance(x, tc.Tensor):
            x = tc.Tensor(x)
        h = self.stem(x, mode)
        for blk in self.blocks:
            h = blk(h, mode)
        return self.head(h, mode)

    def bns(self):
        out = [self.stem_bn]
        for blk in self.blocks:
            out += blk.bns()
        return out

    def convs(self):
        out = [self.stem_conv]
        for blk in self.blocks:
            out += blk.convs()
        return out

    def parameters(self):
        out = [p for c in self.convs() for p in c.parameters()]
        out += [p for bn in self.bns() for p in bn.parameters()]
        return out + self.fc.parameters()

    def named_parameters(self):
        named = {c.weight.name: c.weight for c in self.convs()}
        for bn in self.bns():
            named[bn.gamma.name] = bn.gamma
            named[bn.beta.name] = bn.beta
        named["fc.weight"] = self.fc.weight
        named["fc.bias"] = self.fc.bias
        return named

    def named_bns(self):
        return {bn.name: bn for bn in self.bns()}

    def set_frozen(self, frozen=True):
        for p in self.parameters():
            p.frozen = frozen

    def bn_parameters(self):
        return [p for bn in self.bns() for p in bn.parameters()]

    @property
    def num_params(self):
        return sum(p.numel for p in self.parameters())


def build_mini_encoder(seed, classes=10):
    """Seeded 8-block encoder for 3x32x32 inputs (about 100k parameters)."""
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    return Encoder(mini_spec(classes), seed=seed)


def copy_model(model):
    return copy.deepcopy(model)


def freeze_all(model):
    model.set_frozen(True)
    return model


def configure_bn_only(model):
    """Freeze everything except BN affine parameters (the TENT-style regime)."""
    model.set_frozen(True)
    for p in model.bn_parameters():
        p.frozen = False
    return model


# ---------------------------------------------------------------------------
# meta networks


class ConvBlock:
    """Conv-BN-ReLU. The BN starts with gamma=0 so the block initially outputs zeros."""

    def __init__(self, cin, cout, k, stride, rng, name, gamma0=0.0):
        self.conv = Conv2d(cin, cout, k, stride, rng, f"{name}.conv")
        self.bn = tc.BatchNormParams(cout, name=f"{name}.bn")
        self.bn.gamma.data[:] = gamma0

    def __call__(self, x, mode):
        return tc.relu(apply_bn(self.conv(x), self.bn, mode))

    def parameters(self):
        return [self.conv.weight] + self.bn.parameters()


class MetaGroup:
    """Trainable adapter for one encoder part.

    ``variant`` chooses how the part output ``x_k`` and the part input
    ``x_prev`` (the adapted output of the previous group) are combined:

    ======================  ==========================================
    ours                    ``BN(x_k) + ConvBlock(x_prev)``
    no_bn                   ``x_k + ConvBlock(x_prev)``
    no_conv                 ``BN(x_k)``
    no_residual             ``ConvBlock(x_prev)``
    output_fed_conv         ``BN(x_k) + ConvBlock(x_k)``
    ======================  ==========================================
    """

    def __init__(self, index, cin, cout, stride, kernel, variant, rng):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown meta variant {variant!r}; choose from {VARIANTS}")
        if kernel not in (1, 3):
            raise ConfigurationError(f"meta conv kernel must be 1 or 3, got {kernel}")
        self.index, self.variant = index, variant
        self.cin, self.cout, self.stride = cin, cout, stride
        name = f"meta{index}"
        self.bn_out = None
        if variant in ("ours", "no_conv", "output_fed_conv"):
            self.bn_out = tc.BatchNormParams(cout, name=f"{name}.bn_out")
            self.set_identity()
        self.conv_block = None
        if variant == "output_fed_conv":
            self.conv_block = ConvBlock(cout, cout, kernel, 1, rng, f"{name}.block")
        elif variant != "no_conv":
            self.conv_block = ConvBlock(
                cin, cout, kernel, stride, rng, f"{name}.block",
                gamma0=1.0 if variant == "no_residual" else 0.0,
            )

    def __call__(self, x_k, x_prev, mode):
        if self.variant == "no_residual":
            return self.conv_block(x_prev, mode)
        base = x_k if self.bn_out is None else apply_bn(x_k, self.bn_out, mode)
        if self.conv_block is None:
            return base
        src = x_k if self.variant == "output_fed_conv" else x_prev
        return tc.residual_add(base, self.conv_block(src, mode))

    def reg_boundary(self, x_k, x_prev):
        """Tensors at which the regularisation gradient must stop."""
        return (x_k, x_prev)

    def bns(self):
        out = [self.bn_out] if self.bn_out is not None else []
        if self.conv_block is not None:
            out.append(self.conv_block.bn)
        return out

    def parameters(self):
        out = self.bn_out.parameters() if self.bn_out is not None else []
        if self.conv_block is not None:
            out += self.conv_block.parameters()
        return out

    def named_parameters(self):
        named = {}
        if self.conv_block is not None:
            w = self.conv_block.conv.weight
            named[f"meta{self.index}.block.conv"] = w
        for bn in self.bns():
            named[bn.gamma.name] = bn.gamma
            named[bn.beta.name] = bn.beta
        return named

    def set_identity(self, mean=None, var=None):
        """Reset the output BN so that eval-mode inference is an exact identity.

        ``gamma = sqrt(var + eps)`` and ``beta = mean`` make the factored BN
        scale exactly 1 and shift exactly 0.
        """
        if self.bn_out is None:
            return
        bn = self.bn_out
        if mean is not None:
            bn.running_mean = np.asarray(mean, dtype=np.float32).copy()
            bn.running_var = np.asarray(var, dtype=np.float32).copy()
        bn.gamma.data[:] = np.sqrt(bn.running_var + np.float32(bn.eps))
        bn.beta.data[:] = bn.running_mean


@dataclass
class EcoForward:
    logits: tc.Tensor
    pairs: list = field(default_factory=list)      # (x_k, adapted x_k) per part
    inputs: list = field(default_factory=list)     # adapted input of each part


class EcoModel:
    """A frozen encoder split into ``K`` parts, each followed by a meta group."""

    def __init__(self, encoder, plan, groups, variant, kernel):
        self.encoder = encoder
        self.plan = plan
        self.groups = groups
        self.variant = variant
        self.kernel = kernel
        self.parts = [encoder.blocks[a:b] for a, b in plan.boundaries()]

    @property
    def K(self):
        return self.plan.K

    def meta_parameters(self):
        return [p for g in self.groups for p in g.parameters()]

    def group_parameters(self, k):
        return self.groups[k].parameters()

    def named_parameters(self):
        named = dict(self.encoder.named_parameters())
        for g in self.groups:
            named.update(g.named_parameters())
        return named

    def named_bns(self):
        named = dict(self.encoder.named_bns())
        for g in self.groups:
            named.update({bn.name: bn for bn in g.bns()})
        return named

    def calibrate(self, images):
        """Copy the frozen parts' output statistics on ``images`` into each output BN."""
        with tc.no_grad():
            x = tc.Tensor(images)
            h = self.encoder.stem(x, EVAL)
            for part, g in zip(self.parts, self.groups):
                for blk in part:
                    h = blk(h, EVAL)
                axes = (0, 2, 3)
                g.set_identity(h.data.mean(axis=axes), h.data.var(axis=axes))
        return self


def _part_shapes(spec, plan):
    layout = spec.block_layout()
    shapes = []
    for a, b in plan.boundaries():
        cin, _, _, scale_in = layout[a]
        _, cout, s_last, scale_last = layout[b - 1]
        scale_out = scale_last * s_last
        shapes.append((cin, cout, scale_out // scale_in))
    return shapes


def attach_meta(model, plan, variant="ours", kernel=3, seed=0, calib=None):
    """Freeze ``model`` and attach one meta group per part of ``plan``.

    Each group's conv maps the part's input channels and resolution to its
    output channels and resolution, so its stride equals the part's
    cumulative stride. With ``calib`` images the output BNs are calibrated
    (see :meth:`EcoModel.calibrate`).
    """
    spec = model.spec
    if sum(plan.blocks_per_part) != spec.total_blocks or len(plan.blocks_per_part) != plan.K:
        raise ConstructionError(f"plan {plan.blocks_per_part} does not cover {spec.total_blocks} blocks")
    model.set_frozen(True)
    rng = np.random.default_rng(seed)
    groups = []
    for k, (cin, cout, stride) in enumerate(_part_shapes(spec, plan)):
        part = model.blocks[sum(plan.blocks_per_part[:k]) : sum(plan.blocks_per_part[: k + 1])]
        if part[0].cin != cin or part[-1].cout != cout:
            raise ConstructionError(f"meta group {k}: channels {cin}->{cout} do not match part")
        groups.append(MetaGroup(k, cin, cout, stride, kernel, variant, rng))
    eco = EcoModel(model, plan, groups, variant, kernel)
    if calib is not None:
        eco.calibrate(calib)
    return eco


def forward_eco(eco, batch, mode=BATCH):
    """One pass through stem, K (part, meta group) pairs and the classifier.

    The ledger is reset first, so afterwards it holds exactly this pass.
    Frozen BN layers never update their running statistics.
    """
    tc.reset_ledger()
    x = batch if isinstance(batch, tc.Tensor) else tc.Tensor(batch)
    frozen_mode = BNMode(mode.mode, mode.adapt_n, False)
    h = eco.encoder.stem(x, frozen_mode)
    out = EcoForward(logits=None)
    for part, g in zip(eco.parts, eco.groups):
        prev = h
        xk = prev
        for blk in part:
            xk = blk(xk, frozen_mode)
        h = g(xk, prev, mode)
        if h.shape != xk.shape:
            raise DimensionError(f"meta group {g.index} produced {h.shape}, part output is {xk.shape}")
        out.pairs.append((xk, h))
        out.inputs.append(prev)
    out.logits = eco.encoder.head(h, frozen_mode)
    return out


def forward_model(model, batch, mode=EVAL):
    """Plain encoder forward; resets the ledger first."""
    tc.reset_ledger()
    x = batch if isinstance(batch, tc.Tensor) else tc.Tensor(batch)
    return model(x, BNMode(mode.mode, mode.adapt_n, False))


def forward_source(model, batch):
    """Pre-trained model without adaptation: eval-mode BN, no graph, no ledger entries."""
    if isinstance(model, EcoModel):
        model = model.encoder
    with tc.no_grad():
        return forward_model(model, batch, EVAL)
