"""Analytic training-memory accounting over layer descriptors.

Memory is parameters plus saved activations. A weight-bearing layer
(conv, linear, BN affine) that is *trainable* must keep its input for the
weight gradient; frozen layers keep nothing. This is the same rule the
runtime ledger in :mod:`ecotta.tensorcore` applies, so on an instantiable
network the two agree to the byte.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass

import numpy as np

from . import netzoo
from . import tensorcore as tc
from .errors import ConfigurationError, ConstructionError, SpecError

MB = 2**20
LAYER_KINDS = ("conv", "bn", "linear")
POLICY_KINDS = ("frozen", "bn_only", "eco", "full")


@dataclass(frozen=True)
class LayerDesc:
    """One weight-bearing layer with a resolved input size.

    ``hw`` is the spatial side of the input (ignored for linear layers);
    ``meta`` marks layers that belong to a meta group.
    """

    name: str
    kind: str
    cin: int
    cout: int
    k: int = 1
    stride: int = 1
    bias: bool = False
    hw: int = 1
    meta: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"{self.name}: unknown layer kind {self.kind!r}")
        if min(self.cin, self.cout, self.k, self.stride, self.hw) < 1:
            raise SpecError(f"{self.name}: non-positive dimension in {self}")
        if self.kind == "bn" and self.cin != self.cout:
            raise SpecError(f"{self.name}: BN must keep the channel count")

    @property
    def out_hw(self):
        if self.kind != "conv":
            return self.hw
        pad = self.k // 2
        return (self.hw + 2 * pad - self.k) // self.stride + 1

    @property
    def n_params(self):
        if self.kind == "conv":
            return self.cout * self.cin * self.k * self.k + (self.cout if self.bias else 0)
        if self.kind == "bn":
            return 2 * self.cin
        return self.cin * self.cout + (self.cout if self.bias else 0)

    @property
    def input_numel(self):
        """Per-sample input elements."""
        if self.kind == "linear":
            return self.cin
        return self.cin * self.hw * self.hw


@dataclass(frozen=True)
class ArchSpec:
    """An encoder description, or an explicit layer list for toy specs."""

    name: str
    encoder: netzoo.EncoderSpec | None = None
    layers: tuple = ()

    @classmethod
    def from_encoder(cls, encoder):
        return cls(encoder.name, encoder)

    @classmethod
    def from_layers(cls, name, layers):
        return cls(name, None, tuple(layers))

    def resolve(self, input_res=None):
        """Frozen-network layers with concrete input sizes."""
        if self.encoder is None:
            if not self.layers:
                raise SpecError(f"{self.name}: spec has no layers")
            return list(self.layers)
        res = self.encoder.input_res if input_res is None else input_res
        return _encoder_layers(self.encoder, res)


def _conv(name, cin, cout, k, stride, hw, meta=False):
    return LayerDesc(name, "conv", cin, cout, k, stride, False, hw, meta)


def _bn(name, c, hw, meta=False):
    return LayerDesc(name, "bn", c, c, hw=hw, meta=meta)


def _down(hw, stride):
    out = (hw - 1) // stride + 1
    if out < 1:
        raise SpecError(f"spatial size collapsed to {out}")
    return out


def _block_layers(spec, i, cin, cout, stride, hw):
    p = f"block{i}"
    ho = _down(hw, stride)
    project = stride != 1 or cin != cout
    if spec.block == "basic":
        out = [_conv(f"{p}.conv1", cin, cout, 3, stride, hw), _bn(f"{p}.bn1", cout, ho),
               _conv(f"{p}.conv2", cout, cout, 3, 1, ho), _bn(f"{p}.bn2", cout, ho)]
        if project:
            out += [_conv(f"{p}.proj", cin, cout, 1, stride, hw), _bn(f"{p}.proj_bn", cout, ho)]
        return out
    if spec.block == "preact":
        out = [_bn(f"{p}.bn1", cin, hw), _conv(f"{p}.conv1", cin, cout, 3, stride, hw),
               _bn(f"{p}.bn2", cout, ho), _conv(f"{p}.conv2", cout, cout, 3, 1, ho)]
        if project:
            out.append(_conv(f"{p}.shortcut", cin, cout, 1, stride, hw))
        return out
    if spec.block == "bottleneck":
        w = cout // spec.expansion
        out = [_conv(f"{p}.conv1", cin, w, 1, 1, hw), _bn(f"{p}.bn1", w, hw),
               _conv(f"{p}.conv2", w, w, 3, stride, hw), _bn(f"{p}.bn2", w, ho),
               _conv(f"{p}.conv3", w, cout, 1, 1, ho), _bn(f"{p}.bn3", cout, ho)]
        if project:
            out += [_conv(f"{p}.proj", cin, cout, 1, stride, hw), _bn(f"{p}.proj_bn", cout, ho)]
        return out
    raise SpecError(f"{spec.name}: unknown block type {spec.block!r}")


def _block_sizes(spec, input_res):
    """Input side length of every block, plus the final feature side."""
    if not isinstance(input_res, (int, np.integer)) or input_res < 1:
        raise SpecError(f"input resolution must be a positive integer, got {input_res!r}")
    hw = _down(input_res, spec.stem_stride)
    sizes = []
    for _, _, stride, _ in spec.block_layout():
        sizes.append(hw)
        hw = _down(hw, stride)
    return sizes, hw


def _encoder_layers(spec, input_res):
    sizes, final = _block_sizes(spec, input_res)
    layers = [_conv("stem.conv", spec.in_channels, spec.stem_channels, 3, spec.stem_stride, input_res)]
    if spec.stem_bn:
        layers.append(_bn("stem.bn", spec.stem_channels, _down(input_res, spec.stem_stride)))
    for i, ((cin, cout, stride, _), hw) in enumerate(zip(spec.block_layout(), sizes)):
        layers += _block_layers(spec, i, cin, cout, stride, hw)
    if spec.final_bn:
        layers.append(_bn("head.bn", spec.feature_channels, final))
    layers.append(LayerDesc("head.fc", "linear", spec.feature_channels, spec.num_classes, bias=True))
    return layers


def eco_overlay(spec, K, input_res=None, variant="ours", kernel=3):
    """Meta-group layers for ``plan_partition(spec, K)``."""
    if spec.encoder is None:
        raise SpecError(f"{spec.name}: eco overlay needs an encoder description")
    enc = spec.encoder
    res = enc.input_res if input_res is None else input_res
    try:
        plan = netzoo.plan_partition(enc, K)
    except ConfigurationError as e:
        raise SpecError(str(e)) from e
    sizes, final = _block_sizes(enc, res)
    layout = enc.block_layout()
    out = []
    for k, (a, b) in enumerate(plan.boundaries()):
        cin, hw_in = layout[a][0], sizes[a]
        cout = layout[b - 1][1]
        hw_out = sizes[b] if b < len(sizes) else final
        stride = int(np.prod([layout[i][2] for i in range(a, b)]))
        p = f"meta{k}"
        if variant in ("ours", "no_bn", "no_residual"):
            conv = _conv(f"{p}.block.conv", cin, cout, kernel, stride, hw_in, meta=True)
            if conv.out_hw != hw_out:
                raise SpecError(f"{p}: conv output side {conv.out_hw} != part output side {hw_out}")
            out += [conv, _bn(f"{p}.block.bn", cout, hw_out, meta=True)]
        elif variant == "output_fed_conv":
            out += [_conv(f"{p}.block.conv", cout, cout, kernel, 1, hw_out, meta=True),
                    _bn(f"{p}.block.bn", cout, hw_out, meta=True)]
        elif variant != "no_conv":
            raise SpecError(f"unknown meta variant {variant!r}")
        if variant in ("ours", "no_conv", "output_fed_conv"):
            out.append(_bn(f"{p}.bn_out", cout, hw_out, meta=True))
    return out


@dataclass(frozen=True)
class MemoryPolicy:
    kind: str
    K: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"unknown memory policy {self.kind!r}; choose from {POLICY_KINDS}")
        if self.kind == "eco" and (self.K is None or self.K < 1):
            raise ConfigurationError("eco policy needs K >= 1")
        if self.kind != "eco" and self.K is not None:
            raise ConfigurationError(f"policy {self.kind!r} takes no K")

    @classmethod
    def parse(cls, text):
        text = text.strip()
        m = re.fullmatch(r"eco\((\d+)\)", text)
        if m:
            return cls("eco", int(m.group(1)))
        return cls(text)

    def __str__(self):
        return f"eco({self.K})" if self.kind == "eco" else self.kind


FROZEN = MemoryPolicy("frozen")
BN_ONLY = MemoryPolicy("bn_only")
FULL = MemoryPolicy("full")


def eco(K):
    return MemoryPolicy("eco", K)


@dataclass(frozen=True)
class MemoryReport:
    param_bytes: int
    act_bytes: int

    @property
    def total_bytes(self):
        return self.param_bytes + self.act_bytes

    @property
    def param_MB(self):
        return self.param_bytes / MB

    @property
    def act_MB(self):
        return self.act_bytes / MB

    @property
    def total_MB(self):
        return self.total_bytes / MB

    def as_dict(self):
        return {"param_MB": self.param_MB, "act_MB": self.act_MB, "total_MB": self.total_MB}


def _trainable(layer, policy):
    if policy.kind == "full":
        return True
    if policy.kind == "bn_only":
        return layer.kind == "bn"
    if policy.kind == "eco":
        return layer.meta
    return False


def policy_layers(spec, policy, input_res=None):
    if isinstance(policy, str):
        policy = MemoryPolicy.parse(policy)
    layers = spec.resolve(input_res)
    if policy.kind == "eco":
        layers = layers + eco_overlay(spec, policy.K, input_res)
    return layers, policy


def arch_memory(spec, policy, batch, input_res=None, bytes_per_elt=4):
    """Parameter and saved-activation memory of one training step."""
    if isinstance(spec, netzoo.EncoderSpec):
        spec = ArchSpec.from_encoder(spec)
    if batch < 1:
        raise SpecError(f"batch must be >= 1, got {batch}")
    layers, policy = policy_layers(spec, policy, input_res)
    params = sum(l.n_params for l in layers)
    act = sum(l.input_numel for l in layers if _trainable(l, policy))
    return MemoryReport(params * bytes_per_elt, act * batch * bytes_per_elt)


# ---------------------------------------------------------------------------
# runtime cross-check


def runtime_act_bytes(encoder_spec, policy, batch, seed=0):
    """Execute one training forward in tensorcore and return the ledger total."""
    if isinstance(policy, str):
        policy = MemoryPolicy.parse(policy)
    try:
        model = netzoo.Encoder(encoder_spec, seed=seed)
    except (ConfigurationError, ConstructionError) as e:
        raise SpecError(f"cannot instantiate {encoder_spec.name}: {e}") from e
    rng = np.random.default_rng(seed)
    x = rng.random((batch, encoder_spec.in_channels, encoder_spec.input_res, encoder_spec.input_res)).astype(np.float32)
    if policy.kind == "eco":
        eco_model = netzoo.attach_meta(model, netzoo.plan_partition(encoder_spec, policy.K))
        netzoo.forward_eco(eco_model, x, netzoo.BATCH)
        return tc.ledger_bytes()
    if policy.kind == "frozen":
        netzoo.freeze_all(model)
    elif policy.kind == "bn_only":
        netzoo.configure_bn_only(model)
    else:
        model.set_frozen(False)
    netzoo.forward_model(model, x, netzoo.BATCH)
    return tc.ledger_bytes()


def runtime_ledger_agreement(spec_small, policy, batch, seed=0):
    """True when analytic and executed activation bytes are identical."""
    enc = spec_small.encoder if isinstance(spec_small, ArchSpec) else spec_small
    if enc is None:
        raise SpecError("runtime agreement needs an encoder description")
    analytic = arch_memory(ArchSpec.from_encoder(enc), policy, batch).act_bytes
    return runtime_act_bytes(enc, policy, batch, seed) == analytic


# ---------------------------------------------------------------------------
# report

REPORT_POLICIES = (FROZEN, eco(4), eco(5), BN_ONLY, FULL)
REPORT_COLUMNS = ("arch", "policy", "batch", "param_MB", "act_MB", "total_MB")


def memory_table(presets=None, policies=REPORT_POLICIES, batch=64):
    presets = netzoo.PRESETS if presets is None else presets
    rows = []
    for name, enc in presets.items():
        spec = ArchSpec.from_encoder(enc)
        for pol in policies:
            if pol.kind == "eco" and pol.K > enc.total_blocks:
                continue
            r = arch_memory(spec, pol, batch)
            rows.append({"arch": name, "policy": str(pol), "batch": batch, **r.as_dict()})
    return rows


def format_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r["arch"], r["policy"], r["batch"]] + [f"{r[c]:.6f}" for c in REPORT_COLUMNS[3:]])
    return buf.getvalue()


def write_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_csv(rows))


__all__ = [
    "MB", "LayerDesc", "ArchSpec", "MemoryPolicy", "MemoryReport", "FROZEN", "BN_ONLY", "FULL", "eco",
    "arch_memory", "eco_overlay", "policy_layers", "runtime_act_bytes", "runtime_ledger_agreement",
    "memory_table", "format_csv", "write_csv", "REPORT_COLUMNS", "REPORT_POLICIES"
]
