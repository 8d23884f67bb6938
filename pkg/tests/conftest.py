import pytest

from core.allocator import AllocatorParams, AllocatorState
from core.dram import KIB, DramGeometry, TransformConfig, build_geometry, build_grt


@pytest.fixture(scope="session")
def small_geo():
    """256 global rows of 4 pages: sixteen 16-row chunks."""
    return build_geometry({"rows_per_bank": 256, "global_row_bytes": 16 * KIB})


@pytest.fixture(scope="session")
def small_grt(small_geo):
    return build_grt(small_geo, TransformConfig())


@pytest.fixture(scope="session")
def medium_geo():
    return build_geometry({"rows_per_bank": 4096, "global_row_bytes": 16 * KIB})


@pytest.fixture(scope="session")
def medium_grt(medium_geo):
    return build_grt(medium_geo, TransformConfig())


@pytest.fixture(scope="session")
def complex_grt(medium_geo):
    return build_grt(medium_geo, TransformConfig(mode="complex"))


@pytest.fixture(scope="session")
def default_geo():
    return DramGeometry()


@pytest.fixture(scope="session")
def default_grt(default_geo):
    return build_grt(default_geo, TransformConfig())


@pytest.fixture(scope="session")
def default_complex_grt(default_geo):
    return build_grt(default_geo, TransformConfig(mode="complex"))


@pytest.fixture
def make_state(small_geo, small_grt):
    """Allocator over the small geometry; the switch threshold is 16 pages."""

    def factory(**overrides):
        values = {"switch_threshold_bytes": 16 * small_geo.page_bytes, **overrides}
        return AllocatorState(small_geo, small_grt, AllocatorParams(**values))

    return factory
