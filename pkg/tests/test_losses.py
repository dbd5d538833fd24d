import numpy as np
import pytest
from common import tiny_params
from corpus import Utterance
from losses import (
    Mode,
    ObjectiveError,
    ObjectiveSpec,
    RepeatPolicy,
    TextSource,
    UpsampleMaskConfig,
    composite_objective,
    e2e_loss_paired,
    e2e_loss_unpaired,
    ilm_loss,
    ilm_perplexity,
    kld_regularizer,
    upsample_mask,
)
from models import Variant
from numerics import grad_check, no_grad


@pytest.fixture
def paired():
    rng = np.random.default_rng(10)
    return [
        Utterance(rng.standard_normal((5, 3)), [1, 2], 0, "a"),
        Utterance(rng.standard_normal((4, 3)), [4, 0, 3], 2, "b"),
        Utterance(rng.standard_normal((3, 3)), [], 1, "c"),
    ]


@pytest.fixture
def text():
    return [[1, 3, 3], [0], [2, 4, 1, 0]]


def value(spec, paired, text, params, **kwargs):
    with no_grad():
        return composite_objective(spec, paired, text, params, **kwargs)


################
# ObjectiveSpec #
################
def test_default_weights():
    assert ObjectiveSpec.for_mode("jeit", Variant.HAT).beta == 0.2
    assert ObjectiveSpec.for_mode("jeit", Variant.MHAT).beta == 4.0
    cjjt = ObjectiveSpec.for_mode(Mode.CJJT)
    assert (cjjt.alpha, cjjt.beta) == (0.25, 1.5)
    assert ObjectiveSpec.for_mode("ilmt").ilm_text_source is TextSource.PAIRED_TRANSCRIPTS
    assert ObjectiveSpec.for_mode("jeit").ilm_text_source is TextSource.UNPAIRED
    for mode in Mode:
        ObjectiveSpec.for_mode(mode).validate()


@pytest.mark.parametrize(
    "mode, weights",
    [
        ("base", {"alpha": 0.1}),
        ("ilmt", {"beta": 0.0}),
        ("jeit", {"alpha": 0.2, "beta": 1.0}),
        ("joist", {"alpha": 0.0}),
        ("cjjt", {"alpha": 0.25, "beta": 0.0}),
        ("ilma", {"beta": 1.0}),
        ("jeit", {"beta": 1.0, "kld_weight": 0.5}),
    ],
)
def test_inconsistent_weights_rejected(mode, weights):
    with pytest.raises(ObjectiveError):
        ObjectiveSpec(mode, **weights).validate()


def test_text_source_mismatch_rejected():
    with pytest.raises(ObjectiveError):
        ObjectiveSpec("ilmt", beta=0.1, ilm_text_source="unpaired").validate()
    with pytest.raises(ObjectiveError):
        ObjectiveSpec("jeit", beta=0.1, ilm_text_source="paired_transcripts").validate()


def test_bad_weight_values():
    with pytest.raises(ObjectiveError):
        ObjectiveSpec("jeit", beta=-1.0)
    with pytest.raises(ObjectiveError):
        ObjectiveSpec("joist", alpha=np.nan)
    with pytest.raises(ObjectiveError):
        ObjectiveSpec("nope")


def test_upsample_config_validation():
    with pytest.raises(ObjectiveError):
        UpsampleMaskConfig(k=0)
    with pytest.raises(ObjectiveError):
        UpsampleMaskConfig(k_min=3, k_max=2)
    with pytest.raises(ObjectiveError):
        UpsampleMaskConfig(mask_prob=1.5)
    with pytest.raises(ObjectiveError):
        UpsampleMaskConfig(repeat_policy="sometimes")
    spec = ObjectiveSpec("joist", alpha=0.1, upsample={"k": 3})
    assert spec.upsample.k == 3


#################
# Upsample/mask #
#################
def test_upsample_fixed_repeat():
    cfg = UpsampleMaskConfig(k=3, mask_prob=0.0)
    np.testing.assert_array_equal(upsample_mask([1, 2], cfg, mask_id=5), [1, 1, 1, 2, 2, 2])


def test_upsample_random_repeat_range():
    cfg = UpsampleMaskConfig(repeat_policy=RepeatPolicy.RANDOM, k_min=1, k_max=3, mask_prob=0.0)
    out = upsample_mask([0, 1, 2, 3, 4] * 10, cfg, mask_id=5)
    assert 50 <= len(out) <= 150
    assert set(out) == {0, 1, 2, 3, 4}


def test_upsample_mask_fraction():
    cfg = UpsampleMaskConfig(repeat_policy=RepeatPolicy.RANDOM, k_min=1, k_max=3, mask_prob=0.15, rng_seed=11)
    sentence = np.random.default_rng(0).integers(0, 5, size=100_000)
    out = upsample_mask(sentence, cfg, mask_id=5)
    assert len(sentence) <= len(out) <= 3 * len(sentence)
    assert np.mean(out == 5) == pytest.approx(cfg.mask_prob, abs=0.01)
    # Mean repeat count of RANDOM(1, 3).
    assert len(out) / len(sentence) == pytest.approx(2.0, abs=0.02)


def test_upsample_mask_all():
    out = upsample_mask([1, 2, 3], UpsampleMaskConfig(k=2, mask_prob=1.0), mask_id=5)
    np.testing.assert_array_equal(out, [5] * 6)


def test_upsample_deterministic_in_seed():
    cfg = UpsampleMaskConfig(k=2, mask_prob=0.5, rng_seed=3)
    sentence = list(range(5)) * 4
    np.testing.assert_array_equal(upsample_mask(sentence, cfg, 5), upsample_mask(sentence, cfg, 5))
    other = UpsampleMaskConfig(k=2, mask_prob=0.5, rng_seed=4)
    assert not np.array_equal(upsample_mask(sentence, cfg, 5), upsample_mask(sentence, other, 5))


##########
# Losses #
##########
def test_e2e_loss_paired_is_sum_of_utterances(paired):
    params = tiny_params()
    with no_grad():
        together = e2e_loss_paired(paired, params).item()
        apart = sum(e2e_loss_paired([u], params).item() for u in paired)
    assert together > 0
    assert together == pytest.approx(apart, rel=1e-10)


def test_losses_reject_empty_batches(paired):
    params = tiny_params()
    with pytest.raises(ObjectiveError):
        e2e_loss_paired([], params)
    with pytest.raises(ObjectiveError):
        ilm_loss([], params)
    with pytest.raises(ObjectiveError):
        e2e_loss_unpaired([[1], []], params, UpsampleMaskConfig())


@pytest.mark.parametrize("variant", list(Variant))
def test_ilm_loss_touches_only_ilm(variant, text):
    params = tiny_params(variant)
    params.zero_grad()
    ilm_loss(text, params).backward()
    for p in params:
        if p.name not in params.ilm_names:
            assert not p.grad.any(), p.name
    assert any(p.grad.any() for p in params.ilm_parameters())


def test_ilm_perplexity_bounds(text):
    params = tiny_params()
    ppl = ilm_perplexity(text, params)
    # A near-uniform untrained ILM sits close to the vocabulary size.
    assert 1.0 < ppl < 25.0
    with pytest.raises(ObjectiveError):
        ilm_perplexity([[]], params)


def test_kld_zero_for_identical_models(text):
    params = tiny_params()
    with no_grad():
        assert kld_regularizer(text, params, params.copy()).item() == pytest.approx(0.0, abs=1e-12)


def test_kld_positive_after_change(text):
    params = tiny_params()
    frozen = params.copy()
    params["joint.W4"].values = params["joint.W4"].values + 0.5
    with no_grad():
        assert kld_regularizer(text, params, frozen).item() > 0


#############
# Composite #
#############
def test_base_is_normalized_e2e(paired):
    params = tiny_params()
    out = value(ObjectiveSpec.for_mode("base"), paired, None, params)
    with no_grad():
        expected = e2e_loss_paired(paired, params).item() / len(paired)
    assert out.components["total"] == pytest.approx(expected)
    assert set(out.components) == {"e2e_paired", "total"}


def test_cjjt_components_add_up(paired, text):
    params = tiny_params()
    spec = ObjectiveSpec.for_mode("cjjt", alpha=0.3, beta=0.7)
    out = value(spec, paired, text, params)
    c = out.components
    assert c["total"] == pytest.approx(c["e2e_paired"] + 0.3 * c["e2e_unpaired"] + 0.7 * c["ilm"])
    with no_grad():
        B = len(paired)
        assert c["ilm"] == pytest.approx(ilm_loss(text, params).item() / B)
        assert c["e2e_unpaired"] == pytest.approx(e2e_loss_unpaired(text, params, spec.upsample).item() / B)


def objective_and_gradients(spec, paired, text, params, **kwargs):
    params.zero_grad()
    out = composite_objective(spec, paired, text, params, **kwargs)
    out.loss.backward()
    return out.components["total"], {p.name: p.grad.copy() for p in params}


def assert_same_objective(actual, expected):
    assert actual[0] == expected[0]
    assert actual[1].keys() == expected[1].keys()
    for name, grad in expected[1].items():
        np.testing.assert_array_equal(actual[1][name], grad, err_msg=name)


@pytest.mark.parametrize("variant", list(Variant))
def test_zero_weights_reduce_to_simpler_modes(variant, paired, text):
    params = tiny_params(variant, seed=2)

    def run(mode, check=True, **weights):
        return objective_and_gradients(ObjectiveSpec(mode, **weights), paired, text, params, check=check)

    base = run("base")
    joist = run("joist", alpha=0.25)
    jeit = run("jeit", beta=1.5)

    assert_same_objective(run("jeit", check=False, beta=0.0), base)
    assert_same_objective(run("cjjt", check=False, alpha=0.25, beta=0.0), joist)
    assert_same_objective(run("cjjt", check=False, alpha=0.0, beta=1.5), jeit)
    assert_same_objective(run("cjjt", check=False, alpha=0.0, beta=0.0), base)
    # The reduced modes differ from the full one.
    assert run("cjjt", alpha=0.25, beta=1.5)[0] != base[0]



def test_ilmt_uses_paired_transcripts(paired, text):
    params = tiny_params()
    out = value(ObjectiveSpec.for_mode("ilmt"), paired, text, params)
    with no_grad():
        expected = ilm_loss([u.transcript for u in paired], params).item() / len(paired)
    assert out.components["ilm"] == pytest.approx(expected)
    # ILMT needs no unpaired text.
    assert value(ObjectiveSpec.for_mode("ilmt"), paired, None, params).components == out.components


def test_ilma_normalized_by_text_batch(paired, text):
    params = tiny_params()
    frozen = params.copy()
    out = value(ObjectiveSpec.for_mode("ilma", kld_weight=0.5), paired, text, params, frozen=frozen)
    with no_grad():
        expected = ilm_loss(text, params).item() / len(text)
    assert out.components["ilm"] == pytest.approx(expected)
    assert out.components["kld"] == pytest.approx(0.0, abs=1e-12)
    assert "e2e_paired" not in out.components


def test_ilma_requires_frozen(text):
    with pytest.raises(ObjectiveError):
        value(ObjectiveSpec.for_mode("ilma"), [], text, tiny_params())


def test_text_modes_require_text(paired):
    for mode in ("jeit", "joist", "cjjt"):
        with pytest.raises(ObjectiveError):
            value(ObjectiveSpec.for_mode(mode), paired, [], tiny_params())


def test_joist_batch_size_limits_unpaired_term(paired, text):
    params = tiny_params()
    spec = ObjectiveSpec.for_mode("joist")
    limited = value(spec, paired, text, params, joist_batch_size=1).components["e2e_unpaired"]
    with no_grad():
        expected = e2e_loss_unpaired(text[:1], params, spec.upsample).item() / len(paired)
    assert limited == pytest.approx(expected)


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("mode", ["base", "ilmt", "jeit", "joist", "cjjt", "ilma"])
def test_composite_gradients(variant, mode, paired, text):
    params = tiny_params(variant, seed=1)
    frozen = params.copy()
    # Move away from the snapshot so the KLD term has a gradient.
    for p in params.ilm_parameters():
        p.values = p.values * 1.1
    spec = ObjectiveSpec.for_mode(mode, variant, **({"kld_weight": 0.5} if mode == "ilma" else {}))

    def f(_):
        return composite_objective(spec, paired, text, params, frozen=frozen).loss

    assert grad_check(f, list(params), max_coordinates=2, floor=1e-4) < 1e-4


def test_blank_decoder_embedding_gradient(paired):
    params = tiny_params(Variant.MHAT, seed=4)
    embed = params["blank_decoder.embed"]

    def f(_):
        return e2e_loss_paired(paired, params)

    assert grad_check(f, [embed], floor=1e-4) < 1e-5
    params.zero_grad()
    e2e_loss_paired(paired, params).backward()
    # The blank path reaches the table through the decoder history.
    assert np.abs(embed.grad).sum() > 0
