import pytest

from edgeframe import facerec


@pytest.fixture(scope="session")
def standard_gallery():
    """10 identities x 5 images, 32x32, seed 42: the canonical synthetic set."""
    return facerec.make_synthetic_gallery(identities=10, per_identity=5,
                                          width=32, height=32, seed=42)


@pytest.fixture(scope="session")
def standard_model(standard_gallery):
    return facerec.train(standard_gallery, k=10)
