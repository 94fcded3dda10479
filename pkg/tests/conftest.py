import pytest

from trajvid import tensor


@pytest.fixture(autouse=True)
def _nan_check_on():
    # Finite checking is on throughout the test suite, off in timed runs.
    tensor.set_nan_check(True)
    yield
    tensor.set_nan_check(False)
