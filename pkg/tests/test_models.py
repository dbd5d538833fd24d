import numpy as np
import pytest
from common import tiny_config, tiny_params
from models import (
    DecoderKind,
    LabelDecoderConfig,
    ModelConfig,
    ModelConfigError,
    ModelParams,
    TextEncoderConfig,
    TokenError,
    Variant,
    VariantError,
    blank_decode,
    check_tokens,
    decoder_init,
    decoder_step,
    encode,
    encode_batch,
    hat_emissions,
    hat_joint,
    ilm_from_embedding,
    ilm_logprobs,
    inject_text_batch,
    label_decode,
    mhat_emissions,
    mhat_scores,
    parameter_layout,
    text_encode,
)
from numerics import ShapeError, Tensor, add, gather_last, grad_check, no_grad, total


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_config_mhat_requires_blank_decoder():
    with pytest.raises(ModelConfigError):
        ModelConfig(Variant.MHAT, vocab_size=5, feature_dim=3)


def test_config_hat_rejects_blank_decoder():
    with pytest.raises(ModelConfigError):
        ModelConfig(Variant.HAT, vocab_size=5, feature_dim=3, joint_dim=4, blank_decoder_dim=3)


def test_config_hat_requires_joint_dim():
    with pytest.raises(ModelConfigError):
        ModelConfig(Variant.HAT, vocab_size=5, feature_dim=3)


def test_config_injection_layer_range():
    with pytest.raises(ModelConfigError):
        tiny_config(text_encoder=TextEncoderConfig(injection_layer=3))


def test_config_unknown_decoder_kind():
    with pytest.raises(ModelConfigError):
        LabelDecoderConfig(kind="transformer")


def test_config_dict_roundtrip():
    config = tiny_config(Variant.HAT, kind="v4_embed")
    restored = ModelConfig.from_dict(config.to_dict())
    assert restored == config
    assert restored.label_decoder.history == 4


def test_reserved_ids():
    config = tiny_config()
    assert config.start_id == config.mask_id == config.vocab_size
    assert config.domain_slots == config.num_domains + 1


def test_parameter_layout_variants():
    hat = {name for name, _, _ in parameter_layout(tiny_config(Variant.HAT))}
    mhat = {name for name, _, _ in parameter_layout(tiny_config(Variant.MHAT))}
    assert {"joint.W1", "joint.W2", "joint.w", "joint.W"} <= hat
    assert not any(n.startswith("blank") for n in hat)
    assert {"blank_decoder.embed", "blank_joint.w", "joint.W3", "joint.W4"} <= mhat
    assert "joint.W1" not in mhat


def test_ilm_names():
    hat = tiny_params(Variant.HAT)
    assert hat.ilm_names == {n for n in hat.names() if n.startswith("label_decoder.")} | {"joint.W2", "joint.W"}

    mhat = tiny_params(Variant.MHAT)
    assert mhat.ilm_names == {n for n in mhat.names() if n.startswith("label_decoder.")} | {"joint.W4"}
    assert 0 < mhat.count(mhat.ilm_names) < mhat.count()


def test_initialize_deterministic_and_bounded():
    a = tiny_params(seed=3)
    b = tiny_params(seed=3)
    c = tiny_params(seed=4)
    for name, _, fan_in in parameter_layout(a.config):
        np.testing.assert_array_equal(a[name].values, b[name].values)
        assert np.abs(a[name].values).max() <= 1 / np.sqrt(fan_in)
    assert any(not np.array_equal(a[n].values, c[n].values) for n in a.names())


def test_params_mismatch_rejected():
    params = tiny_params()
    parameters = {p.name: p for p in params}
    del parameters["joint.W4"]
    with pytest.raises(ModelConfigError):
        ModelParams(params.config, parameters)


def test_params_save_load(tmp_path):
    params = tiny_params(Variant.HAT, seed=1)
    params.save(tmp_path / "m.ckpt", extra_arrays={"extra": np.arange(3.0)}, meta={"step": 7})
    loaded, arrays, meta = ModelParams.load(tmp_path / "m.ckpt")
    assert loaded.config == params.config
    assert meta["step"] == 7
    np.testing.assert_array_equal(arrays["extra"], np.arange(3.0))
    for p in params:
        np.testing.assert_array_equal(loaded[p.name].values, p.values)


def test_copy_is_independent():
    params = tiny_params()
    snapshot = params.copy()
    params["joint.W4"].values = params["joint.W4"].values + 1
    assert not np.array_equal(params["joint.W4"].values, snapshot["joint.W4"].values)


def test_check_tokens():
    np.testing.assert_array_equal(check_tokens([0, 4], 5), [0, 4])
    with pytest.raises(TokenError):
        check_tokens([5], 5)
    with pytest.raises(TokenError):
        check_tokens([-1], 5)
    np.testing.assert_array_equal(check_tokens([5], 5, allow_extra=True), [5])


def test_encode_shape_and_validation(rng):
    params = tiny_params()
    assert encode(rng.standard_normal((6, 3)), params).shape == (6, 4)
    with pytest.raises(ShapeError):
        encode(rng.standard_normal((6, 2)), params)
    with pytest.raises(ShapeError):
        encode(np.zeros((0, 3)), params)
    with pytest.raises(ShapeError):
        encode(rng.standard_normal((6, 3)), params, domain_id=5)


def test_encode_causal(rng):
    params = tiny_params()
    x = rng.standard_normal((7, 3))
    y = x.copy()
    y[4:] = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(encode(x, params).values[:4], encode(y, params).values[:4])


def test_encode_domain_changes_output(rng):
    params = tiny_params()
    x = rng.standard_normal((3, 3))
    assert not np.allclose(encode(x, params, 0).values, encode(x, params, 1).values)


def test_encode_batch_padding_harmless(rng):
    params = tiny_params()
    xs = [rng.standard_normal((T, 3)) for T in (2, 5, 3)]
    batch = encode_batch(xs, [0, 1, 2], params)
    for x, d, out in zip(xs, [0, 1, 2], batch):
        np.testing.assert_allclose(out.values, encode(x, params, d).values, rtol=0, atol=1e-12)


def test_hat_emission_normalized():
    rng = np.random.default_rng(0)
    for seed in range(1000):
        params = tiny_params(Variant.HAT, seed=seed, vocab_size=2 + seed % 7)
        for p in params:
            p.values = p.values * rng.uniform(0.5, 5.0)
        T, U = rng.integers(1, 4, size=2)
        f = Tensor(rng.standard_normal((T, 1, 4)) * 3)
        g = Tensor(rng.standard_normal((1, U, 4)) * 3)
        log_b, log_nb, log_p = hat_emissions(f, g, params)
        mass = np.exp(log_b.values) + np.exp(log_nb.values) * np.exp(log_p.values).sum(axis=-1)
        np.testing.assert_allclose(mass, 1.0, rtol=0, atol=1e-12, err_msg=f"seed={seed}")



def test_hat_joint_wrong_variant():
    with pytest.raises(VariantError):
        hat_joint(np.zeros(4), np.zeros(4), tiny_params(Variant.MHAT))
    with pytest.raises(VariantError):
        mhat_scores(np.zeros(4), np.zeros(4), np.zeros(3), tiny_params(Variant.HAT))
    with pytest.raises(VariantError):
        blank_decode([1], tiny_params(Variant.HAT))


def test_mhat_ilm_score_ignores_acoustics():
    rng = np.random.default_rng(0)
    for seed in range(1000):
        params = tiny_params(Variant.MHAT, seed=seed, vocab_size=2 + seed % 7)
        g = rng.standard_normal(4)
        g_b = rng.standard_normal(3)
        _, a1, l1, p1 = mhat_scores(rng.standard_normal(4), g, g_b, params)
        _, a2, l2, _ = mhat_scores(rng.standard_normal(4) * 10, g, g_b, params)
        np.testing.assert_array_equal(l1.values, l2.values, err_msg=f"seed={seed}")
        assert not np.array_equal(a1.values, a2.values)
        np.testing.assert_allclose(np.exp(p1.values).sum(), 1.0, atol=1e-12, err_msg=f"seed={seed}")



def test_hat_ilm_is_joint_without_acoustics(rng):
    params = tiny_params(Variant.HAT)
    g = Tensor(rng.standard_normal(4))
    _, _, label_logprobs = hat_emissions(np.zeros(4), g, params)
    np.testing.assert_allclose(ilm_from_embedding(g, params).values, label_logprobs.values, atol=1e-15)


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("kind", list(DecoderKind))
def test_ilm_normalized(variant, kind):
    params = tiny_params(variant, kind=kind)
    for prefix in ([], [1], [4, 0, 2]):
        np.testing.assert_allclose(np.exp(ilm_logprobs(prefix, params).values).sum(), 1.0, atol=1e-12)


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("kind", list(DecoderKind))
def test_decoder_step_matches_full_decode(variant, kind):
    params = tiny_params(variant, kind=kind)
    tokens = [3, 0, 4, 4, 1]
    with no_grad():
        state = decoder_init(params)
        for u in range(len(tokens) + 1):
            prefix = tokens[:u]
            np.testing.assert_allclose(state.g_label.values, label_decode(prefix, params).values, atol=1e-12)
            if variant is Variant.MHAT:
                np.testing.assert_allclose(state.g_blank.values, blank_decode(prefix, params).values, atol=1e-12)
            if u < len(tokens):
                state = decoder_step(state, tokens[u], params)


def test_embedding_decoder_limited_history():
    params = tiny_params(kind="v2_embed")
    a = label_decode([0, 1, 2, 3], params).values
    b = label_decode([4, 4, 2, 3], params).values
    c = label_decode([0, 1, 1, 3], params).values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_blank_decoder_depends_on_last_two_tokens():
    params = tiny_params(Variant.MHAT)
    np.testing.assert_array_equal(blank_decode([0, 1, 2], params).values, blank_decode([4, 1, 2], params).values)


def test_text_encode():
    params = tiny_params()
    assert text_encode([], params).shape == (0, 4)
    assert text_encode([1, 1, 5, 2], params).shape == (4, 4)
    with pytest.raises(TokenError):
        text_encode([6], params)


def test_inject_text_batch():
    params = tiny_params()
    outs = inject_text_batch([[1, 2, 2], [5, 0]], params)
    assert [o.shape for o in outs] == [(3, 4), (2, 4)]
    with pytest.raises(ShapeError):
        inject_text_batch([[1], []], params)


@pytest.mark.parametrize("variant", list(Variant))
def test_emissions_golden(variant, assert_array_equal):
    params = tiny_params(variant, seed=3)
    features = np.random.default_rng(0).standard_normal((4, 3))
    with no_grad():
        encoded = encode(features, params)
        ilm = ilm_logprobs([1, 2, 3], params)
    assert_array_equal(encoded.values, index=0)
    assert_array_equal(ilm.values, index=1)


@pytest.mark.parametrize("variant", list(Variant))
def test_joint_emission_gradients(variant):
    variant = Variant(variant)
    rng = np.random.default_rng(5)
    for draw in range(100):
        params = tiny_params(variant, seed=draw)
        joint = [p for p in params if p.name.startswith(("joint.", "blank_joint."))]
        f = rng.standard_normal((2, 1, 4))
        g = rng.standard_normal((1, 3, 4))
        g_b = rng.standard_normal((1, 3, 3))
        labels = rng.integers(0, 5, size=(2, 3))

        def loss(_, params=params, f=f, g=g, g_b=g_b, labels=labels):
            if variant is Variant.HAT:
                log_b, log_nb, log_p = hat_emissions(f, g, params)
            else:
                log_b, log_nb, _, _, log_p = mhat_emissions(f, g, g_b, params)
            return add(total(log_b), total(add(log_nb, gather_last(log_p, labels))))

        err = grad_check(loss, joint, max_coordinates=4, seed=draw, floor=1e-4)
        assert err < 1e-5, f"{variant.value} draw {draw}: {err}"
