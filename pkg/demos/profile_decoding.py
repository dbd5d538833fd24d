"""Profile greedy and beam decoding of an untrained model on a small corpus.

Run from the repo root::

    python demos/profile_decoding.py
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "lib"))

import uprofiler  # noqa: E402
from corpus import CorpusSpec, generate_corpus  # noqa: E402
from decoding import FusionConfig, decode_utterances  # noqa: E402
from models import LabelDecoderConfig, ModelConfig, ModelParams, Variant  # noqa: E402

spec = CorpusSpec(
    paired_count=60,
    unpaired_count=600,
    frequent_per_domain=2,
    rare_per_domain=2,
    rare_unpaired_min=10,
    base_test_count=6,
    rare_test_count=4,
    heldout_text_count=40,
    feature_dim=4,
)
bundle = generate_corpus(spec)
config = ModelConfig(
    variant=Variant.MHAT,
    vocab_size=spec.vocab_size,
    feature_dim=spec.feature_dim,
    encoder_dim=8,
    label_decoder=LabelDecoderConfig(width=8, embed_dim=8),
    blank_decoder_dim=4,
)
params = ModelParams.initialize(config, seed=0)
utterances = [u for utts in bundle.test_sets().values() for u in utts]

uprofiler.reset()
decode_utterances(params, utterances, FusionConfig(lambda_lm=0.0, lambda_ilm=0.0, beam_width=1))
decode_utterances(params, utterances, FusionConfig(lambda_lm=0.0, lambda_ilm=0.0, beam_width=4))

print(uprofiler.format_results())
