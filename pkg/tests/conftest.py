from pathlib import Path

import numpy as np
import pytest

from gbill.core import ColorGridConfig, ImagePlaneCamera, SplatSet

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def target_path():
    return DATA / "astronaut_256.png"


def make_splats(positions, *, n=1, sigma=0.5, depth=None, theta=0.0, scale=1.0,
                logit=0.0, grids=None):
    """Small helper for hand-built scenes; scalars broadcast over splats."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    k = len(positions)
    depth = np.arange(k, dtype=float) if depth is None else depth
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (k, 2)) if np.ndim(scale) < 2 else scale
    if grids is None:
        grids = np.full((k, n, n, 3), 0.5)
    return SplatSet(positions, depth, np.broadcast_to(theta, (k,)), np.log(scale),
                    np.broadcast_to(logit, (k,)), grids, ColorGridConfig(n, sigma))


def random_splats(rng, k, n=4, sigma=0.5, width=32, height=32, margin=0.0):
    return SplatSet(
        positions=np.column_stack([rng.uniform(-margin, width + margin, k),
                                   rng.uniform(-margin, height + margin, k)]),
        depth_keys=rng.permutation(k) + rng.uniform(0.1, 0.9, k),
        thetas=rng.uniform(-np.pi, np.pi, k),
        log_scales=np.log(rng.uniform(0.7, 6.0, (k, 2))),
        opacity_logits=rng.uniform(-2.0, 3.0, k),
        grids=rng.uniform(0.0, 1.0, (k, n, n, 3)),
        grid_config=ColorGridConfig(n, sigma),
    )


@pytest.fixture
def camera32():
    return ImagePlaneCamera(32, 32, (0.1, 0.2, 0.3))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
