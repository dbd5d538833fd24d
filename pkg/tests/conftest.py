from pathlib import Path

import numpy as np
import pytest


@pytest.fixture
def assert_array_equal(request):
    """Compare against a golden ``.npz``; a missing golden file is recorded and the test skipped."""
    testname = request.node.name
    filename = Path(request.module.__file__)
    test_dir = filename.parent / filename.stem

    def _assert_array_equal(actual, index=0, atol=1e-12):
        expected_file = test_dir / f"{testname}_{index}_expected.npz"
        actual = np.asarray(actual, dtype=np.float64)

        if not expected_file.exists():
            test_dir.mkdir(exist_ok=True)
            np.savez_compressed(expected_file, data=actual)
            pytest.skip(f"Recorded golden values to {expected_file}")

        expected = np.load(expected_file)["data"]
        np.testing.assert_allclose(actual, expected, atol=atol)

    return _assert_array_equal
