import numpy as np
import pytest

from bldgraph.geometry import Polygon
from bldgraph.ingest import BuildingRecord, RasterImage


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def square(x, y, s=10.0):
    return Polygon.from_coords([(x, y), (x + s, y), (x + s, y + s), (x, y + s)])


def record(i, x, y, label=None, s=10.0, chip=None, meta=None):
    return BuildingRecord(f"b{i}", square(x, y, s), label, chip, dict(meta or {}))


def flat_raster(value=128, size=200, origin=(-50.0, -50.0)):
    data = np.full((size, size, 3), value, dtype=np.uint8)
    return RasterImage(data, (origin[0], 1.0, 0.0, origin[1], 0.0, 1.0))


_VERDICTS: dict[int, str] = {}


def verdict(criterion: int, ok: bool, detail: str) -> None:
    """Record the one-line acceptance outcome for ``criterion``."""
    _VERDICTS[criterion] = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
