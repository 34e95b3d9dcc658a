import pytest

from tadlab.featbank import BankConfig, generate_bank


@pytest.fixture(scope="session")
def default_bank():
    # reference config: 40 categories x 50 clips, D=64
    return generate_bank(BankConfig(seed=7))


@pytest.fixture(scope="session")
def tiny_bank():
    return generate_bank(BankConfig(num_categories=6, feature_dim=16,
                                    clips_per_category=4, seed=3))


@pytest.fixture(scope="session")
def flat_bank():
    # noise-free: every clip row equals its category prototype exactly
    return generate_bank(BankConfig(num_categories=5, feature_dim=12,
                                    clips_per_category=3, prototype_noise=0.0,
                                    drift_amplitude=0.0, seed=11))
