import pytest
from hypothesis import HealthCheck, settings

from mlip import numerics as nm

settings.register_profile("mlip", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mlip")


@pytest.fixture
def f64():
    with nm.precision("f64"):
        yield
