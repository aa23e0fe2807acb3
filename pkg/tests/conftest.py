import numpy as np
import pytest
from hypothesis import settings

from fashionsap.data_io import SynthSpec, generate_synthetic, load_corpus
from fashionsap.model.config import ModelConfig
from fashionsap.model.network import FashionSAPModel
from fashionsap.pretrain import corpus_vocabulary
from fashionsap.textpipe import LexicalResource, Vocabulary

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        d=8, d_e=8, d_1=4, text_layers=1, image_layers=1, fusion_layers=1,
        heads=2, patch_size=4, image_size=8, vocab_size=24, max_text_len=12,
        queue_size=8, tau_init=0.25,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(n_items=60, seed=5), out)
    return out


@pytest.fixture(scope="session")
def synth_records(synth_dir):
    return load_corpus(synth_dir / "corpus.jsonl")


@pytest.fixture(scope="session")
def synth_lexicon(synth_dir):
    return LexicalResource.load(synth_dir / "lexicon.json")


@pytest.fixture(scope="session")
def synth_vocab(synth_records) -> Vocabulary:
    return corpus_vocabulary(synth_records)


@pytest.fixture
def tiny_model_f64():
    def build(seed=0, **overrides):
        return FashionSAPModel(tiny_config(**overrides), seed=seed, dtype=np.float64)

    return build
