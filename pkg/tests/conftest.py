import numpy as np
import pytest

from storyseq import data, model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_corpus():
    """The 4-story seed-7 corpus with toy-sized features."""
    samples = data.synth_stories(7, 4)
    ids = [i for s in samples for i in s.image_ids]
    features = data.synth_features(7, ids, 16)
    vocab = data.build_vocab([x for s in samples for x in s.sentences], 4)
    return samples, features, vocab


@pytest.fixture
def tiny_config():
    return model.ModelConfig(vocab_size=9, feature_dim=5, embed_dim=4, img_hidden=3, sent_hidden=2,
                             dec_hidden=5, max_sentence_len=4, window=3, dropout_in=0.0,
                             dropout_pre_softmax=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    return model.init_params(tiny_config, seed=3)
