import numpy as np
import pytest

from utils.ingest import PressurePanel, TimeAxis

START = '2019-01-01T00:00:00+00:00'


def balanced_panel(length=600, noise=0.0, seed=0, with_demand=True):
    """Three sensors that satisfy the pairwise balance exactly (up to noise)."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    line = 60.0 + 2.5 * np.sin(2 * np.pi * t / 288) + 0.3 * rng.standard_normal(length).cumsum() / np.sqrt(length)
    k0 = np.array([0.0, 1.8, -1.2])
    k1 = np.array([1.0, 0.92, 1.07])
    kd = np.array([[0.0, 0.004, -0.003]]) if with_demand else np.zeros((1, 3))
    flow = np.clip(8.0 + 4.0 * np.sin(2 * np.pi * t / 97) + rng.standard_normal(length), 0.0, None)
    values = (line[None, :] - k0[:, None] - kd.T * flow[None, :] ** 2) / k1[:, None]
    values = values + noise * rng.standard_normal(values.shape)
    axis = TimeAxis(start=START, step=300, length=length)
    if not with_demand:
        return PressurePanel(axis=axis, sensor_ids=('s1', 's2', 's3'), values=values)
    return PressurePanel(
        axis=axis, sensor_ids=('s1', 's2', 's3'), values=values,
        demand_ids=('q1',), demands=flow[None, :],
    )


@pytest.fixture
def panel():
    return balanced_panel()


@pytest.fixture
def plain_panel():
    return balanced_panel(with_demand=False)
