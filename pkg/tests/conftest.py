import sys
from pathlib import Path

import pytest

ROOT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT_DIR / 'scripts'))

from detection_chain import ChannelEfficiencies, DetectorSpec  # noqa: E402
from source_model import BackgroundParams, EmitterParams  # noqa: E402


@pytest.fixture
def emitter():
    return EmitterParams(tau_on=4.4, tau_off=25.4, gamma_c_ratio=0.0, polarized_fraction=0.331)


@pytest.fixture
def no_background():
    return BackgroundParams(amplitude=0.0, power_exponent=2.0, tau_bg=4.4)


@pytest.fixture
def lossless_channel():
    return ChannelEfficiencies(beta=1.0, eta_extract=1.0, lens=1.0, polarizer_linear=1.0,
                               polarizer_unpol=1.0, detector=1.0)


@pytest.fixture
def ideal_detectors():
    return DetectorSpec(jitter_sigma=0.0, dead_time=0.0, dark_count_rate=0.0)
