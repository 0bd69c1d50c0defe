from pathlib import Path

import numpy as np
import pytest

from latent_advection.checks import toy_spec
from latent_advection.config_loader import train_config_from_text
from latent_advection.networks import ModelBundle
from latent_advection.synthetic import make_synthetic

PRESETS = Path(__file__).resolve().parent.parent / "presets"

TINY_CONFIG = """\
# small widths so a couple of iterations run in seconds
encoder_hidden = [4, 4]
decoder_input = 4
decoder_down = [4, 4, 8]
decoder_bottleneck = 8
decoder_output = 4
field_input = 4
field_down = [4, 4, 8]
field_bottleneck = 8
field_output = 4
n_evolution = 3
stride_h = 4
stride_w = 4
lambda_ae = 1.0
lambda_magnitude = 0.01
lambda_smooth = 0.01
alpha = 1e-3
gamma = 0.8
patch_height = 16
patch_width = 16
batch_size = 2
iterations = 2
log_every = 1
"""


@pytest.fixture
def tiny_config():
    return train_config_from_text(TINY_CONFIG, "tiny.cfg")


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def scene():
    return make_synthetic("translation", 24, 24, n_steps=3, seed=1)


@pytest.fixture
def toy_bundle():
    return ModelBundle.build(toy_spec(n_steps=3, size=16), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
