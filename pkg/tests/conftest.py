import pytest

from _support import make_population
from srsrr.simlab import DgpSpec, generate_population
from srsrr.statkit import RngStream


@pytest.fixture(scope="session")
def case1_population():
    return generate_population(DgpSpec.for_case(1), RngStream(0))


@pytest.fixture
def toy():
    return make_population((12, 16), seed=3)
