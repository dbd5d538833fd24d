import numpy as np
from corpus import CorpusSpec
from models import LabelDecoderConfig, ModelConfig, ModelParams, Variant


class MockTime:
    def __init__(self, init=0):
        self.time = init
        self.mock = None

    def __call__(self):
        return self.time

    @classmethod
    def patch(cls, mocker, target, init=0):
        mock_time = cls(init)
        mock_time.mock = mocker.patch(target, side_effect=mock_time)
        return mock_time


def tiny_config(variant=Variant.MHAT, vocab_size=5, feature_dim=3, kind="recurrent", dim=4, **kwargs):
    """Smallest model that still has every component."""
    variant = Variant(variant)
    extra = {"blank_decoder_dim": 3} if variant is Variant.MHAT else {"joint_dim": dim}
    extra.update(kwargs)
    return ModelConfig(
        variant=variant,
        vocab_size=vocab_size,
        feature_dim=feature_dim,
        encoder_dim=dim,
        encoder_layers=2,
        label_decoder=LabelDecoderConfig(kind=kind, width=dim, embed_dim=dim),
        **extra,
    )


def tiny_params(variant=Variant.MHAT, seed=0, **kwargs):
    return ModelParams.initialize(tiny_config(variant, **kwargs), seed)


def tiny_corpus_spec(**kwargs):
    defaults = {
        "paired_count": 60,
        "unpaired_count": 600,
        "frequent_per_domain": 2,
        "rare_per_domain": 2,
        "rare_unpaired_min": 10,
        "base_test_count": 6,
        "rare_test_count": 4,
        "heldout_text_count": 40,
        "feature_dim": 4,
        "noise_level": 0.1,
        "seed": 0,
    }
    defaults.update(kwargs)
    return CorpusSpec(**defaults)


def random_features(rng, T, feature_dim=3):
    return rng.standard_normal((T, feature_dim))
