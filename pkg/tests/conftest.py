"""Shared fixtures: the trained runs used by the acceptance trend checks.

Training at desk scale is the expensive part of the suite, so the three
seeds of each scheme are trained once per session and shared between the
training-trend and sweep-trend criteria.
"""

import dataclasses

import pytest

from fasloc import marl
from fasloc.config import default_config

ACCEPTANCE_SEEDS = (0, 1, 2)
ACCEPTANCE_EPOCHS = 200


def _train(scheme: str, seed: int):
    cfg = default_config()
    cfg = dataclasses.replace(
        cfg, run=dataclasses.replace(cfg.run, epochs=ACCEPTANCE_EPOCHS,
                                     seed=seed, scheme=scheme))
    trainer = marl.MarlTrainer(cfg)
    log = trainer.run()
    return cfg, trainer, log


@pytest.fixture(scope="session")
def trained_runs():
    """{scheme: {seed: (cfg, trainer, log)}} for the trend criteria."""
    runs = {}
    for scheme in ("ar_marl", "no_fas", "random"):
        runs[scheme] = {seed: _train(scheme, seed) for seed in ACCEPTANCE_SEEDS}
    return runs
