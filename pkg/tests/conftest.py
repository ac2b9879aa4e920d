import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from contraspk.dataset import SyntheticSpec, generate_synthetic
from contraspk.model import SpeakerContentVAE, tiny_config

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    """4 speakers x 3 utterances, 12-dim features, 80 frames each."""
    return generate_synthetic(
        SyntheticSpec(num_speakers=4, utts_per_speaker=3, feat_dim=12, utt_frames=80, seed=11)
    )


@pytest.fixture(scope="session")
def tiny_model():
    return SpeakerContentVAE(tiny_config(feat_dim=12, seed=5))


@pytest.fixture(scope="session")
def tiny_model_f64():
    return SpeakerContentVAE(tiny_config(feat_dim=12, seed=5, dtype="float64"))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_batch(rng: np.random.Generator, n_pairs=3, t=16, f=12) -> np.ndarray:
    """(2N, T, F) feature stack with CMN-like zero mean per segment."""
    x = rng.standard_normal((2 * n_pairs, t, f))
    return x - x.mean(axis=1, keepdims=True)
