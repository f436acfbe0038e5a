import os
import time

import pytest
from hypothesis import settings

from uda_forge import trainer as tr
from uda_forge.config import RunConfig

settings.register_profile("default", max_examples=100, deadline=None)
settings.register_profile("ci", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


DEFAULT_SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture(scope="session")
def default_runs():
    """Pretrain, full adaptation and the no-MA/no-ACR baseline on the default config, per seed."""
    runs = {}
    for seed in DEFAULT_SEEDS:
        cfg = RunConfig(seed=seed, froc_every=0)
        t0 = time.perf_counter()
        data = tr.build_datasets(cfg)
        source = tr.pretrain_source(cfg, data)
        full = tr.adapt(cfg, source, data)
        recall_full = tr.evaluate(full.teacher, data.target).curve.recall_at(0.3)
        elapsed = time.perf_counter() - t0
        recall_src = tr.evaluate(source, data.target).curve.recall_at(0.3)
        holdout = tr.evaluate(source, data.source_holdout).curve.recall_at(0.5)
        base = tr.adapt(cfg.replace(enable_ma=False, enable_acr=False), source, data)
        recall_base = tr.evaluate(base.teacher, data.target).curve.recall_at(0.3)
        runs[seed] = dict(source=recall_src, full=recall_full, baseline=recall_base, holdout=holdout,
                          seconds=elapsed, report=full, data=data)
    return runs
