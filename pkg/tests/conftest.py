import numpy as np
import pytest

from atlasslam.config import RunConfig, SensorMode
from atlasslam.models import Atlas
from atlasslam.sim import build_reference_map, default_rig


def numeric_jacobian(f, x, dimension: int, plus=None, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` at ``x`` along ``dimension`` tangent coordinates.

    ``plus(x, delta)`` applies an increment; plain addition by default.
    """
    plus = plus or (lambda value, delta: value + delta)
    columns = []
    for k in range(dimension):
        delta = np.zeros(dimension)
        delta[k] = eps
        high = np.atleast_1d(np.asarray(f(plus(x, delta)), dtype=float))
        low = np.atleast_1d(np.asarray(f(plus(x, -delta)), dtype=float))
        columns.append((high - low) / (2.0 * eps))
    return np.stack(columns, axis=-1)


def overlapping_maps(world, warp, split=1.0):
    """A matched map over ``[0, 2s]`` and an active map from ``split`` on, expressed through ``warp``.

    Returns the atlas, both maps and the keyframes of each map at ``split``.
    """
    atlas = Atlas()
    matched = build_reference_map(world, atlas, stride=10, end=2.0)
    active = build_reference_map(world, atlas, stride=10, start=split, transform=warp)

    def at(slam_map):
        return next(kf for kf in slam_map.keyframes.values() if np.isclose(kf.timestamp, split))

    return atlas, matched, active, at(matched), at(active)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def rig():
    return default_rig(stereo=False)


@pytest.fixture
def stereo_rig():
    return default_rig(stereo=True)


@pytest.fixture
def config():
    return RunConfig(mode=SensorMode.STEREO)


@pytest.fixture
def atlas():
    atlas = Atlas()
    atlas.new_active_map()
    return atlas
