"""Shared fixtures: a pre-trained source encoder and warmed-up eco models.

Training is the slow part of the suite, so results are cached under
pytest's cache directory, keyed by a hash of the package sources and the
training settings. Set ``ECOTTA_NO_CACHE=1`` to force retraining.
"""

import hashlib
import os
from pathlib import Path

import pytest

import ecotta
from ecotta import adapt, benchcli, netzoo, stream

SOURCE_SEED = 0
EVAL_SEEDS = (0, 1, 2)
N_TRAIN, N_TEST, N_POOL = 4000, 1000, 2000

_PKG = Path(ecotta.__file__).parent
_CRITERIA = {}


def _code_hash():
    h = hashlib.sha256()
    for name in ("tensorcore.py", "netzoo.py", "adapt.py", "stream.py", "benchcli.py"):
        h.update((_PKG / name).read_bytes())
    return h.hexdigest()[:16]


def record_criterion(number, name, passed, detail):
    _CRITERIA[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def criterion():
    return record_criterion


@pytest.fixture(scope="session")
def cache_dir(request):
    d = Path(request.config.cache.mkdir("ecotta")) / _code_hash()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cached(path, build):
    if path.exists() and not os.environ.get("ECOTTA_NO_CACHE"):
        return benchcli.load_checkpoint(path)
    model = build()
    benchcli.save_checkpoint(model, path)
    return benchcli.load_checkpoint(path)


@pytest.fixture(scope="session")
def source_data():
    tr, te, _ = benchcli.data_seeds(SOURCE_SEED)
    return stream.gen_source(tr, N_TRAIN), stream.gen_source(te, N_TEST)


@pytest.fixture(scope="session")
def target_pools():
    return {s: stream.gen_source(benchcli.data_seeds(s)[2], N_POOL) for s in EVAL_SEEDS}


@pytest.fixture(scope="session")
def source_model(source_data, cache_dir):
    train, _ = source_data

    def build():
        enc = netzoo.build_mini_encoder(SOURCE_SEED)
        return adapt.train_source(enc, train.images, train.labels, epochs=10, lr=0.1, seed=SOURCE_SEED)

    enc = _cached(cache_dir / f"source_{SOURCE_SEED}.ckpt", build)
    enc.set_frozen(True)
    return enc


@pytest.fixture(scope="session")
def warm_ecos(source_model, source_data, cache_dir):
    train, _ = source_data
    out = {}
    for s in EVAL_SEEDS:
        def build(s=s):
            eco = netzoo.attach_meta(netzoo.copy_model(source_model), netzoo.plan_partition(source_model.spec, 4),
                                     seed=s, calib=train.images[:512])
            adapt.warmup(eco, train.images, train.labels, adapt.AdaptConfig(), seed=s)
            return eco

        out[s] = _cached(cache_dir / f"warm_{s}.ckpt", build)
    return out
