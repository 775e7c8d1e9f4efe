import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgellm import model as mdl
from edgellm import sparse_codec as sc
from edgellm.compiler import lowering
from edgellm.config import preset

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_cfg():
    return preset("toy")


@pytest.fixture(scope="session")
def glm_cfg():
    return preset("glm6b")


@pytest.fixture(scope="session")
def toy_package(toy_cfg):
    pkg, _ = mdl.pack_model(toy_cfg, seed=0)
    return pkg


@pytest.fixture(scope="session")
def toy_weights(toy_cfg, toy_package):
    return mdl.ModelWeights(toy_cfg, toy_package)


@pytest.fixture(scope="session")
def toy_image_bytes(toy_cfg, toy_package):
    img = lowering.build_image(toy_cfg, weights=sc.dumps(toy_package))
    return lowering.dumps(img)


@pytest.fixture(scope="session")
def toy_prompt(toy_cfg):
    return np.random.default_rng(7).integers(0, toy_cfg.vocab, size=16)
