"""Experiment runner: configuration, checkpoints, scenarios and the CLI.

Usage::

    ecotta warmup --output_dir runs/a --seed 1
    ecotta run --config exp.ini --method tent
    ecotta memreport
    ecotta eval --checkpoint runs/a/warmup.ckpt --corruption contrast --severity 5

Options on the command line override the config file, which overrides the
``ECOTTA_SEED`` environment variable, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapt, memledger, netzoo, stream
from . import tensorcore as tc
from .errors import ConfigError, ConfigurationError, DataError, EcoError, FormatError

SCENARIOS = ("warmup", "continual", "long_term", "gradual", "forgetting", "memreport", "small_batch")
METHODS = ("source", "bnstats", "tent", "ecotta")
ADAPT_SCENARIOS = ("continual", "long_term", "gradual", "forgetting", "small_batch")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FORMAT = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a run depends on. Defaults are listed in ``KEYS``."""

    scenario: str = "continual"
    method: str = "ecotta"
    seed: int = 0
    output_dir: str = "runs"
    checkpoint: str = ""  # empty: <output_dir>/warmup.ckpt
    probe: bool = False
    tent_lr: float | None = None  # None: same as tta_lr
    adapt: adapt.AdaptConfig = field(default_factory=adapt.AdaptConfig)
    K: int = 4
    variant: str = "ours"
    kernel: int = 3
    kinds: tuple = stream.KINDS
    severity: int = 5
    batches_per_segment: int = 50
    rounds: int = 10
    small_batch_size: int = 1
    classes: int = 10
    n_train: int = 4000
    n_test: int = 1000
    n_pool: int = 2000
    source_epochs: int = 10
    source_lr: float = 0.1

    @property
    def checkpoint_path(self):
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "warmup.ckpt"

    @property
    def effective_tent_lr(self):
        return self.adapt.tta_lr if self.tent_lr is None else self.tent_lr

    @property
    def stream_batch_size(self):
        return self.small_batch_size if self.scenario == "small_batch" else self.adapt.batch_size

    def as_dict(self):
        d = {k: getattr(self, k) for k in _RUN_FIELDS}
        d["kinds"] = list(self.kinds)
        d["adapt"] = self.adapt.as_dict()
        d["checkpoint"] = str(self.checkpoint_path)
        d["tent_lr"] = self.effective_tent_lr
        d["stream_batch_size"] = self.stream_batch_size
        return d


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
    return check


def _at_least(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}")
    return check


def _kinds(v):
    if not v:
        raise ValueError("needs at least one corruption")
    for k in v:
        if k not in stream.KINDS:
            raise ValueError(f"unknown corruption {k!r}")


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


# key -> (section, target attribute, parser, validator)
KEYS = {
    "scenario": ("run", "scenario", str, _choice(SCENARIOS)),
    "method": ("run", "method", str, _choice(METHODS)),
    "seed": ("run", "seed", int, _at_least(0)),
    "output_dir": ("run", "output_dir", str, None),
    "checkpoint": ("run", "checkpoint", str, None),
    "probe": ("run", "probe", _bool, None),
    "tent_lr": ("run", "tent_lr", _opt_float, None),
    "lambda": ("adapt", "adapt.lam", float, _at_least(0.0)),
    "warmup_lr": ("adapt", "adapt.warmup_lr", float, _at_least(0.0)),
    "tta_lr": ("adapt", "adapt.tta_lr", float, _at_least(0.0)),
    "momentum": ("adapt", "adapt.momentum", float, None),
    "warmup_epochs": ("adapt", "adapt.warmup_epochs", int, _at_least(0)),
    "h0_factor": ("adapt", "adapt.h0_factor", float, None),
    "loss_variant": ("adapt", "adapt.loss_variant", str, _choice(adapt.LOSS_VARIANTS)),
    "lambda_m1": ("adapt", "adapt.lambda_m1", float, None),
    "lambda_m2": ("adapt", "adapt.lambda_m2", float, None),
    "sdr_flavor": ("adapt", "adapt.sdr_flavor", str, _choice(adapt.SDR_FLAVORS)),
    "adaptbn": ("adapt", "adapt.adaptbn", _bool, None),
    "adaptbn_N": ("adapt", "adapt.adaptbn_N", int, _at_least(0)),
    "batch_size": ("adapt", "adapt.batch_size", int, _at_least(1)),
    "K": ("model", "K", int, _at_least(1)),
    "variant": ("model", "variant", str, _choice(netzoo.VARIANTS)),
    "kernel": ("model", "kernel", int, _choice((1, 3))),
    "kinds": ("stream", "kinds", _list, _kinds),
    "severity": ("stream", "severity", int, _choice((1, 2, 3, 4, 5))),
    "batches_per_segment": ("stream", "batches_per_segment", int, _at_least(1)),
    "rounds": ("stream", "rounds", int, _at_least(1)),
    "small_batch_size": ("stream", "small_batch_size", int, _at_least(1)),
    "classes": ("data", "classes", int, _choice(tuple(range(2, 17)))),
    "n_train": ("data", "n_train", int, _at_least(1)),
    "n_test": ("data", "n_test", int, _at_least(1)),
    "n_pool": ("data", "n_pool", int, _at_least(1)),
    "source_epochs": ("data", "source_epochs", int, _at_least(0)),
    "source_lr": ("data", "source_lr", float, _at_least(0.0)),
}
SECTIONS = sorted({s for s, *_ in KEYS.values()})
_RUN_FIELDS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "adapt"]


def _set_value(values, key, raw, line):
    key = key.strip()
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", line)
    _, _, parse, check = KEYS[key]
    try:
        value = parse(raw.strip())
        if check is not None:
            check(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}", line) from None
    values[key] = (value, line)


def parse_assignments(text):
    """``key -> (value, line)`` from ``key = value`` lines under optional ``[section]`` headers."""
    values = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", n)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", n)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", n)
        key, val = line.split("=", 1)
        key = key.strip()
        if section is not None and key in KEYS and KEYS[key][0] != section:
            raise ConfigError(f"key {key!r} belongs in [{KEYS[key][0]}], not [{section}]", n)
        _set_value(values, key, val, n)
    return values


def build_config(values, base=None):
    """Apply parsed values on top of ``base`` (defaults when omitted)."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    adapt_kw = cfg.adapt.as_dict()
    for key, (value, line) in values.items():
        attr = KEYS[key][1]
        if attr.startswith("adapt."):
            adapt_kw[attr[6:]] = value
        else:
            setattr(cfg, attr, value)
    try:
        cfg.adapt = adapt.AdaptConfig(**adapt_kw)
    except ConfigurationError as e:
        lines = [ln for k, (_, ln) in values.items() if KEYS[k][1].startswith("adapt.")]
        raise ConfigError(str(e), min(lines) if len(lines) == 1 else None) from None
    if cfg.K > netzoo.mini_spec(cfg.classes).total_blocks:
        raise ConfigError(f"K={cfg.K} exceeds the encoder's block count", values.get("K", (0, None))[1])
    return cfg


def parse_config(text, base=None):
    return build_config(parse_assignments(text), base)


def env_defaults(environ=None):
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    if "ECOTTA_SEED" in environ:
        try:
            cfg.seed = int(environ["ECOTTA_SEED"])
        except ValueError:
            raise ConfigError(f"ECOTTA_SEED must be an integer, got {environ['ECOTTA_SEED']!r}") from None
    return cfg


def load_config(path=None, overrides=None, environ=None):
    """Defaults < ECOTTA_SEED < config file < ``overrides`` (``key -> text``)."""
    cfg = env_defaults(environ)
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        values.update(parse_assignments(text))
    for key, raw in (overrides or {}).items():
        _set_value(values, key, raw, None)
    return build_config(values, cfg)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ECOTTA1\x00"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _tensors(model):
    """Ordered ``name -> array`` of parameters and BN running statistics."""
    out = {name: p.data for name, p in model.named_parameters().items()}
    for name, bn in model.named_bns().items():
        out[f"{name}.running_mean"] = bn.running_mean
        out[f"{name}.running_var"] = bn.running_var
    return out


def _spec_to_json(spec):
    d = dataclasses.asdict(spec)
    d["stages"] = [list(s) for s in spec.stages]
    return d


def _spec_from_json(d):
    d = dict(d)
    d["stages"] = tuple(tuple(s) for s in d["stages"])
    return netzoo.EncoderSpec(**d)


def save_checkpoint(model, path, extra=None):
    """Write parameters and running statistics of an encoder or eco model."""
    is_eco = isinstance(model, netzoo.EcoModel)
    enc = model.encoder if is_eco else model
    meta = {
        "kind": "eco" if is_eco else "encoder",
        "encoder_spec": _spec_to_json(enc.spec),
        "extra": extra or {},
    }
    if is_eco:
        meta.update(K=model.K, plan=list(model.plan.blocks_per_part), variant=model.variant, kernel=model.kernel)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = _tensors(model)
    table = bytearray(_U32.pack(len(tensors)))
    payload = bytearray()
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        table += b"".join(_U32.pack(d) for d in arr.shape) + _U64.pack(len(payload))
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob = CKPT_MAGIC + _U32.pack(CKPT_VERSION) + _U32.pack(len(meta_bytes)) + meta_bytes + bytes(table) + bytes(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated while reading {what}", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))


def read_checkpoint(path):
    """Parse a checkpoint into ``(meta, {name: array})`` without building a model."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found; create it with `ecotta warmup`") from None
    r = _Reader(raw)
    magic = r.take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})", 0)
    (version,) = r.unpack(_U32, "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})", len(CKPT_MAGIC))
    (mlen,) = r.unpack(_U32, "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad checkpoint metadata: {e}", at) from None
    (count,) = r.unpack(_U32, "entry count")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack(struct.Struct("<H"), "entry name length")
        at = r.pos
        try:
            name = r.take(nlen, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", at) from None
        (ndim,) = r.unpack(struct.Struct("<B"), "entry rank")
        shape = tuple(r.unpack(_U32, "entry shape")[0] for _ in range(ndim))
        (offset,) = r.unpack(_U64, "entry offset")
        entries.append((name, shape, offset))
    base = r.pos
    tensors = {}
    expect = 0
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        if offset != expect:
            raise FormatError(f"entry {name!r} has offset {offset}, expected {expect}", base + expect)
        start = base + offset
        if start + 4 * n > len(raw):
            raise FormatError(f"checkpoint truncated inside tensor {name!r}", len(raw))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(shape).astype(np.float32)
        expect += 4 * n
    if base + expect != len(raw):
        raise FormatError("trailing bytes after checkpoint payload", base + expect)
    return meta, tensors


def load_checkpoint(path):
    """Rebuild the saved encoder or eco model; the file is fully validated first."""
    meta, tensors = read_checkpoint(path)
    try:
        spec = _spec_from_json(meta["encoder_spec"])
        enc = netzoo.Encoder(spec, seed=0)
        if meta["kind"] == "eco":
            plan = netzoo.PartitionPlan(int(meta["K"]), tuple(meta["plan"]))
            model = netzoo.attach_meta(enc, plan, variant=meta["variant"], kernel=int(meta["kernel"]))
        else:
            model = enc
    except (KeyError, TypeError, EcoError) as e:
        raise FormatError(f"checkpoint metadata does not describe a model: {e}", len(CKPT_MAGIC) + 8) from None
    named_p = model.named_parameters()
    named_bn = model.named_bns()
    expected = set(_tensors(model))
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise FormatError(f"checkpoint entries do not match the model (missing {missing[:3]}, unexpected {extra[:3]})", None)
    for name, arr in tensors.items():
        if name in named_p:
            target = named_p[name].data
        else:
            bn_name, stat = name.rsplit(".", 1)
            target = getattr(named_bn[bn_name], stat)
        if target.shape != arr.shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, model expects {target.shape}", None)
    for name, arr in tensors.items():
        if name in named_p:
            named_p[name].data[...] = arr
        else:
            bn_name, stat = name.rsplit(".", 1)
            setattr(named_bn[bn_name], stat, arr.copy())
    model.checkpoint_meta = meta.get("extra", {})
    return model


# ---------------------------------------------------------------------------
# scenarios


def data_seeds(seed):
    """Distinct generator seeds for the train, test and target-pool splits."""
    return 3 * seed + 101, 3 * seed + 102, 3 * seed + 103


def source_splits(cfg):
    tr, te, pool = data_seeds(cfg.seed)
    return (
        stream.gen_source(tr, cfg.n_train, cfg.classes),
        stream.gen_source(te, cfg.n_test, cfg.classes),
        stream.gen_source(pool, cfg.n_pool, cfg.classes),
    )


def make_stream(cfg):
    mode = {"long_term": "long_term", "gradual": "gradual"}.get(cfg.scenario, "continual")
    return stream.make_schedule(mode, cfg.kinds, cfg.severity, cfg.batches_per_segment, cfg.seed, cfg.rounds)


@dataclass
class SegmentResult:
    segment_index: int
    corruption: str
    severity: int
    method: str
    error: float
    ent_loss: float
    mean_R: float
    n_kept: int
    act_bytes: int
    clean_error: float | None = None


RESULT_COLUMNS = ("segment_index", "corruption", "severity", "method", "error", "ent_loss", "mean_R",
                  "n_kept", "act_bytes", "clean_error")


def _entropy_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=1)


class Adapter:
    """One method's state while it consumes a stream."""

    def __init__(self, method, eco, cfg, tent_lr=None):
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
        self.method, self.cfg = method, cfg
        self.tent_lr = cfg.tta_lr if tent_lr is None else tent_lr
        self.h0 = cfg.h0(eco.encoder.spec.num_classes)
        if method == "ecotta":
            self.model = netzoo.copy_model(eco)
        elif method == "tent":
            self.model = adapt.configure_tent(netzoo.copy_model(eco.encoder))
        else:
            self.model = eco.encoder
        if method == "source":
            self.inference_mode = netzoo.EVAL
        elif method == "bnstats":
            self.inference_mode = netzoo.BATCH
        else:
            self.inference_mode = cfg.bn_mode()

    @property
    def param_bytes(self):
        if self.method == "ecotta":
            return 4 * sum(p.numel for p in self.model.named_parameters().values())
        return 4 * sum(p.numel for p in self.model.parameters())

    def step(self, images):
        """Predict (and adapt, for adapting methods). Returns StepMetrics."""
        if self.method == "ecotta":
            return adapt.tta_step(self.model, images, self.cfg)
        if self.method == "tent":
            return adapt.baseline_tent_step(self.model, images, self.tent_lr, mode=self.cfg.bn_mode(),
                                            momentum=self.cfg.momentum)
        if self.method == "bnstats":
            logits = adapt.baseline_bnstats(self.model, images).data
        else:
            logits = netzoo.forward_source(self.model, images).data
        h = _entropy_np(logits.astype(np.float64))
        return adapt.StepMetrics(total=float(h.mean()), ent=float(h.mean()), n_kept=int((h < self.h0).sum()),
                                 predictions=logits.argmax(axis=1), act_bytes=0)

    def probe(self, clean):
        return stream.clean_probe(self.model, clean, self.inference_mode, self.cfg.batch_size)


def simulate(method, eco, schedule, pool, cfg, batch_size=None, tent_lr=None, clean=None, probe=False,
             on_segment=None):
    """Stream ``schedule`` through one method; the given models are not modified.

    Returns ``(results, adapter)``. With ``probe`` the clean split is
    scored after every segment.
    """
    batch_size = cfg.batch_size if batch_size is None else batch_size
    ad = Adapter(method, eco, cfg, tent_lr)
    results = []
    acc = None

    def close():
        r = SegmentResult(acc["i"], acc["seg"].kind, acc["seg"].severity, method,
                          acc["wrong"] / acc["n"], float(np.mean(acc["ent"])), float(np.mean(acc["reg"])),
                          acc["kept"], acc["act"])
        if probe and clean is not None:
            r.clean_error = ad.probe(clean)
        results.append(r)
        if on_segment is not None:
            on_segment(r)

    for b in stream.iterate(schedule, batch_size, pool):
        if acc is None or acc["i"] != b.segment_index:
            if acc is not None:
                close()
            acc = {"i": b.segment_index, "seg": b.segment, "wrong": 0, "n": 0, "ent": [], "reg": [], "kept": 0, "act": 0}
        m = ad.step(b.images)
        acc["wrong"] += int((m.predictions != b.labels).sum())
        acc["n"] += len(b.labels)
        acc["ent"].append(m.ent)
        acc["reg"].append(m.mean_reg)
        acc["kept"] += m.n_kept
        acc["act"] = max(acc["act"], m.act_bytes)
    if acc is not None:
        close()
    return results, ad


def format_results(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow([r.segment_index, r.corruption, r.severity, r.method, f"{r.error:.6f}", f"{r.ent_loss:.6f}",
                    f"{r.mean_R:.6f}", r.n_kept, r.act_bytes, "" if r.clean_error is None else f"{r.clean_error:.6f}"])
    return buf.getvalue()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def run_warmup(cfg, log=_log):
    train, test, _ = source_splits(cfg)
    spec = netzoo.mini_spec(cfg.classes)
    enc = netzoo.Encoder(spec, seed=cfg.seed)
    adapt.train_source(enc, train.images, train.labels, epochs=cfg.source_epochs, lr=cfg.source_lr,
                       seed=cfg.seed, log=log)
    source_error = adapt.evaluate(enc, test.images, test.labels)
    plan = netzoo.plan_partition(spec, cfg.K)
    eco = netzoo.attach_meta(enc, plan, variant=cfg.variant, kernel=cfg.kernel, seed=cfg.seed,
                             calib=train.images[: min(512, len(train))])
    adapt.warmup(eco, train.images, train.labels, cfg.adapt, seed=cfg.seed, log=log)
    extra = {
        "seed": cfg.seed,
        "source_test_error": source_error,
        "warmup_clean_error": adapt.evaluate(eco, test.images, test.labels),
    }
    save_checkpoint(eco, cfg.checkpoint_path, extra)
    return {"scenario": "warmup", "seed": cfg.seed, "checkpoint": str(cfg.checkpoint_path), **extra}


def run_memreport(cfg):
    rows = memledger.memory_table(batch=cfg.adapt.batch_size)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    memledger.write_csv(rows, out / "memreport.csv")
    return {"scenario": "memreport", "seed": cfg.seed, "rows": len(rows), "csv": str(out / "memreport.csv")}


def run_adaptation(cfg, log=_log):
    if not cfg.checkpoint_path.exists():
        raise DataError(f"warm-up checkpoint {cfg.checkpoint_path} not found; run `ecotta warmup` with the same "
                        f"--output_dir/--checkpoint first")
    eco = load_checkpoint(cfg.checkpoint_path)
    if not isinstance(eco, netzoo.EcoModel):
        raise DataError(f"{cfg.checkpoint_path} holds a bare encoder; adaptation needs a warm-up checkpoint")
    eco.encoder.set_frozen(True)
    _, test, pool = source_splits(cfg)
    schedule = make_stream(cfg)
    probe = cfg.probe or cfg.scenario == "forgetting"
    results, ad = simulate(
        cfg.method, eco, schedule, pool, cfg.adapt, batch_size=cfg.stream_batch_size,
        tent_lr=cfg.effective_tent_lr, clean=test, probe=probe,
        on_segment=lambda r: log(f"segment {r.segment_index} {r.corruption}/{r.severity}: error {r.error:.4f}"),
    )
    baseline_probe = Adapter(cfg.method, eco, cfg.adapt, cfg.effective_tent_lr).probe(test) if probe else None
    peak_act = max((r.act_bytes for r in results), default=0)
    summary = {
        "scenario": cfg.scenario,
        "method": cfg.method,
        "seed": cfg.seed,
        "mean_error": float(np.mean([r.error for r in results])),
        "n_segments": len(results),
        "param_bytes": ad.param_bytes,
        "peak_act_bytes": peak_act,
        "peak_memory_bytes": ad.param_bytes + peak_act,
    }
    if probe:
        summary["initial_clean_error"] = baseline_probe
        summary["final_clean_error"] = results[-1].clean_error if results else baseline_probe
    return summary, results


def run(cfg, log=_log):
    """Execute ``cfg.scenario``; writes results.csv / summary.json under ``output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(json.dumps({"config": cfg.as_dict()}, sort_keys=True), flush=True)
    if cfg.scenario == "warmup":
        summary = run_warmup(cfg, log)
    elif cfg.scenario == "memreport":
        summary = run_memreport(cfg)
    else:
        summary, results = run_adaptation(cfg, log)
        (out / "results.csv").write_text(format_results(results), encoding="utf-8")
    summary["config"] = cfg.as_dict()
    _write_json(out / "summary.json", summary)
    return summary


def run_eval(cfg, corruption=None, severity=0):
    model = load_checkpoint(cfg.checkpoint_path)
    _, test, _ = source_splits(cfg)
    x = test.images if corruption is None else stream.corrupt(test.images, corruption, severity, seed=cfg.seed)
    return {
        "checkpoint": str(cfg.checkpoint_path),
        "corruption": corruption or "clean",
        "severity": severity if corruption else 0,
        "error": adapt.evaluate(model, x, test.labels),
        "batch_stats_error": adapt.evaluate(model, x, test.labels, cfg.adapt.batch_size, netzoo.BATCH),
    }


# ---------------------------------------------------------------------------
# command line


def _overrides(tokens):
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"option --{key} needs a value")
            val = tokens[i + 1]
            i += 2
        key = key.replace("-", "_") if key.replace("-", "_") in KEYS else key
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = val
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="ecotta", description="Memory-light continual test-time adaptation runner.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("warmup", "pre-train the source model and warm up meta networks; writes a checkpoint"),
        ("run", "run an adaptation scenario from a warm-up checkpoint"),
        ("memreport", "write the analytic memory table for all presets and policies"),
        ("eval", "evaluate a checkpoint on the clean or corrupted test split"),
    ]:
        sp = sub.add_parser(name, help=helptext, description=helptext,
                            epilog="Any config key can be given as --key value.")
        sp.add_argument("--config", help="INI-style config file")
        if name == "eval":
            sp.add_argument("--corruption", choices=stream.KINDS)
            sp.add_argument("--severity", type=int, default=5, choices=range(0, 6))
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _overrides(rest)
        if args.command == "warmup":
            overrides["scenario"] = "warmup"
        elif args.command == "memreport":
            overrides["scenario"] = "memreport"
        cfg = load_config(args.config, overrides)
        if args.command == "run" and cfg.scenario not in ADAPT_SCENARIOS:
            raise ConfigError(f"`run` needs an adaptation scenario ({', '.join(ADAPT_SCENARIOS)}), got {cfg.scenario!r}")
        if args.command == "eval":
            print(json.dumps(run_eval(cfg, args.corruption, args.severity), sort_keys=True))
        else:
            summary = run(cfg)
            print(json.dumps({k: v for k, v in summary.items() if k != "config"}, sort_keys=True))
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
