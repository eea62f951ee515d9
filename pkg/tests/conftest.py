import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import TEST_MATRIX, melanin_spot_image  # noqa: E402

from skinchroma.retouch import PipelineConfig, prepare_roi  # noqa: E402


@pytest.fixture(scope="session")
def spot_fixture():
    """(image, roi, blemish) with one smooth melanin spot centred in the roi."""
    return melanin_spot_image()


@pytest.fixture(scope="session")
def spot_cfg():
    return PipelineConfig(sigma=1.0, matrix=TEST_MATRIX)


@pytest.fixture(scope="session")
def spot_prepared(spot_fixture, spot_cfg):
    """The fixture's fitted region, shared so the fit runs once per session."""
    img, roi, _ = spot_fixture
    prepared, _ = prepare_roi(img, roi, spot_cfg)
    return prepared
