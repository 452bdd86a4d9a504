import numpy as np
import pytest

from hubreg.volume_io import Volume


def gaussian_blob(shape=(64, 64, 64), centre=None, sigma=6.0, amplitude=100.0, spacing=1.0):
    """``amplitude * exp(-r^2 / 2 sigma^2)`` sampled on a ``(z, y, x)`` grid,
    ``centre`` given as (x, y, z) in mm."""
    nz, ny, nx = shape
    centre = np.array([nx, ny, nz], dtype=float) * spacing / 2 if centre is None else np.asarray(centre)
    z, y, x = np.meshgrid(*(np.arange(n) * spacing for n in shape), indexing="ij")
    r2 = (x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2
    return amplitude * np.exp(-r2 / (2 * sigma * sigma))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_volume():
    return Volume.from_array(gaussian_blob().astype(np.float32))


DESK_SPEC = dict(seed=7, n_images=5, n_points=2000, noise_sigma=1.0, outlier_rate=0.6,
                 warp_spacing=100.0, max_displacement=35.0)


@pytest.fixture(scope="session")
def desk_run():
    """The desk-scale synthetic registration, shared by all tests that read it."""
    import time

    from hubreg.optimizer import OptimizerConfig, register
    from hubreg.synthetic import SyntheticSpec, generate_synthetic

    group = generate_synthetic(SyntheticSpec(**DESK_SPEC))
    start = time.perf_counter()
    result = register(group.point_sets, group.graph, OptimizerConfig())
    return group, result, time.perf_counter() - start


def inlier_residual(group, common):
    g = group.graph
    d = np.linalg.norm(common[g.a] - common[g.b], axis=1)
    return float(d[~group.is_outlier].mean())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
