import os

import pytest
from hypothesis import settings

from mpptsim.pvmodel import ShadingPattern, default_module, string_curve

settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")

PSC = (600.0, 800.0, 1000.0)
GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture(scope="session")
def spec():
    return default_module()


@pytest.fixture(scope="session")
def specs3(spec):
    return (spec,) * 3


@pytest.fixture(scope="session")
def psc_curve(specs3):
    return string_curve(specs3, ShadingPattern(PSC))
