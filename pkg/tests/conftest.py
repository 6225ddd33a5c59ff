import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agingtree.attention import FeatureBlock, TokenLayout
from agingtree.toybackend import ToyBackend, ToyModelSpec, make_toy_input


@pytest.fixture
def layout():
    return TokenLayout(text_tokens=3, image_tokens=5, heads=2, head_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_block(rng):
    def _make(layout, scale=1.0):
        values = rng.uniform(-scale, scale, size=(layout.heads, layout.total_tokens, layout.head_dim))
        return FeatureBlock(values.astype(np.float32), layout)

    return _make


@pytest.fixture
def toy_spec():
    return ToyModelSpec()


@pytest.fixture
def toy_backend(toy_spec):
    return ToyBackend(toy_spec)


@pytest.fixture
def toy_image(tmp_path, toy_spec):
    path = tmp_path / "input.png"
    make_toy_input(path, toy_spec, seed=7)
    return path
