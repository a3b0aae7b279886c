import numpy as np
import pytest

from tritex import ChannelLayout, ExtractorConfig, MaterialStack, load_extractor


@pytest.fixture(scope="session")
def mock_extractor():
    """Deterministic float64 mock backbone shared by the whole suite."""
    return load_extractor(ExtractorConfig.mock())


@pytest.fixture
def random_stack():
    def make(channels: int, size: int = 16, seed: int = 0) -> MaterialStack:
        rng = np.random.default_rng(seed)
        return MaterialStack(rng.random((size, size, channels)), ChannelLayout.flat(channels))

    return make
