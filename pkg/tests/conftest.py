from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedfit.cox import SurvivalDataset


def make_survival(rng, n=30, p=3, ties=False, names=None):
    """Random small survival dataset; optional duplicated times for ties."""
    x = rng.standard_normal((n, p))
    beta = rng.uniform(-0.5, 0.5, size=p)
    time = rng.exponential(np.exp(-(x @ beta)))
    if ties:
        time = np.round(time, 1) + 0.1  # collapse onto a coarse grid
    event = (rng.random(n) < 0.7).astype(int)
    if event.sum() == 0:
        event[0] = 1
    names = names or tuple(f"x{j + 1}" for j in range(p))
    return SurvivalDataset(time=time, event=event, covariates=x, covariate_names=names)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
