from __future__ import annotations

import pytest

from mobigg.percolation import calibrate_lambda_c


@pytest.fixture(scope="session")
def lambda_c_2d():
    """Calibrated critical intensity for d=2, r=1 (Q_30 crossing, 100 samples)."""
    return calibrate_lambda_c(2, 1.0, 30.0, 100, seed=2024)
