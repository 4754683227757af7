import pytest
import torch

from sasvmeta.datagen import CorpusSpec, synth_corpus, with_spoofs

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec():
    return CorpusSpec(num_speakers=6, utterances_per_speaker_genre=4, frames=8, feature_dim=12, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    """Bona fide utterances plus one spoofed counterpart each."""
    return with_spoofs(synth_corpus(small_spec), small_spec.spoof_scale, small_spec.seed)
