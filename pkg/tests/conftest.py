import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_model_config():
    from pdse.network import ModelConfig

    return ModelConfig(pyramid_width=32, backbone_blocks=(1, 1, 1, 1), backbone_width=8,
                       head_depth=2, se_ratio=8)


@pytest.fixture(scope="session")
def tiny_phantom_dir(tmp_path_factory):
    """A 12-image phantom set shared by data/train/cli tests."""
    from pdse.phantom import PhantomSpec, generate_phantoms

    out = tmp_path_factory.mktemp("phantoms")
    generate_phantoms(PhantomSpec(count=12, seed=5), out)
    return out
