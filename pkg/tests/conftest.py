import numpy as np
import pytest

from terraseg.config import ModelConfig
from terraseg.data import load_manifest
from terraseg.synthetic import generate_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(out, n_frames=4, size=64)
    return out


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    return load_manifest(synth_dir / "manifest.jsonl")
