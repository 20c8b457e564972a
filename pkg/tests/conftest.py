import numpy as np
import pytest

from avatarfield.body import icosphere_body, load_body_model
from avatarfield.fields import FieldConfig, FieldSet, LatentCode

SMALL = FieldConfig(triplane_res=16, triplane_channels=8, latent_dim=8, mapping_layers=2,
                    mapping_width=16, decoder_width=16)


@pytest.fixture(scope="session")
def biped():
    return load_body_model("builtin:capsule_biped")


@pytest.fixture(scope="session")
def sphere_body():
    return icosphere_body(0.5, 3)


@pytest.fixture(scope="session")
def small_fs(biped):
    return FieldSet.generate(biped, SMALL, 1, 2)


@pytest.fixture(scope="session")
def small_latents():
    return LatentCode.sample(SMALL.latent_dim, 1, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
