from pathlib import Path
import sys

import pytest


PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))


@pytest.fixture
def params():
    from conetank.tank_model import TankParams

    return TankParams()


@pytest.fixture
def ocp_config():
    from conetank.nmpc_solver import OcpConfig

    return OcpConfig()


@pytest.fixture
def steady_flow(params):
    """Inflow holding the default 0.4 m operating level."""
    from conetank.tank_model import steady_state_flow

    return float(steady_state_flow(params, 0.4))
