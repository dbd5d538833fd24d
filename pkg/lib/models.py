"""HAT and MHAT transducer components.

A model is a ``ModelConfig`` plus a ``ModelParams`` name-to-``Parameter`` store.
Every function here is stateless: it reads parameters, builds a ``numerics``
graph and returns ``Tensor`` outputs.

* ``encode`` - causal LSTM stack over feature frames (a domain one-hot is appended
  to every frame).
* ``label_decode`` / ``blank_decode`` - prefix embeddings. Label decoders are an
  LSTM, or V2/V4 embedding decoders with one look-up table per history slot.
  The MHAT blank decoder is a V2 embedding decoder whose two slots share one table.
* ``hat_joint`` / ``mhat_scores`` - emission distributions.
* ``ilm_logprobs`` - the internal LM: HAT with the encoder output zeroed (blank
  dropped, labels renormalized), MHAT's ``l_u``.
* ``text_encode`` - JOIST text encoder; its output enters the acoustic encoder
  at ``text_encoder.injection_layer``.

Token ids live in ``[0, vocab_size)``. Embedding tables carry one extra row at
index ``vocab_size``: the start-of-sentence token for decoders, the MASK symbol
for the text encoder.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from numerics import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    affine,
    as_tensor,
    concat,
    embedding,
    load_container,
    log_sigmoid,
    log_softmax,
    mul,
    neg,
    recurrent_step,
    reshape,
    save_container,
    stack,
    tanh,
    total,
)

log = logging.getLogger(__name__)


class ModelConfigError(ValueError):
    """Invalid model configuration."""


class VariantError(ValueError):
    """Operation is not defined for this model variant."""


class TokenError(ValueError):
    """Token id outside the vocabulary."""


class Variant(str, Enum):
    HAT = "hat"
    MHAT = "mhat"


class DecoderKind(str, Enum):
    RECURRENT = "recurrent"
    V2_EMBED = "v2_embed"
    V4_EMBED = "v4_embed"


_HISTORY = {DecoderKind.V2_EMBED: 2, DecoderKind.V4_EMBED: 4}


@dataclass(frozen=True)
class LabelDecoderConfig:
    kind: DecoderKind = DecoderKind.RECURRENT
    layers: int = 1
    width: int = 16
    embed_dim: int = 16

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", DecoderKind(self.kind))
        except ValueError:
            raise ModelConfigError(f"Unknown label decoder kind {self.kind!r}")
        if min(self.layers, self.width, self.embed_dim) < 1:
            raise ModelConfigError("label decoder dims must be >= 1")

    @property
    def history(self):
        """Conditioning window in tokens; ``None`` for the unbounded recurrent decoder."""
        return _HISTORY.get(self.kind)

    @property
    def output_dim(self):
        return self.width if self.kind is DecoderKind.RECURRENT else self.embed_dim


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int = 1
    injection_layer: int = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant
    vocab_size: int
    feature_dim: int
    encoder_dim: int = 16
    encoder_layers: int = 2
    label_decoder: LabelDecoderConfig = field(default_factory=LabelDecoderConfig)
    blank_decoder_dim: int | None = None
    joint_dim: int | None = None
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    num_domains: int = 5

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise ModelConfigError(f"Unknown variant {self.variant!r}")
        if isinstance(self.label_decoder, dict):
            object.__setattr__(self, "label_decoder", LabelDecoderConfig(**self.label_decoder))
        if isinstance(self.text_encoder, dict):
            object.__setattr__(self, "text_encoder", TextEncoderConfig(**self.text_encoder))

        if self.vocab_size < 2:
            raise ModelConfigError("vocab_size must be >= 2")
        if min(self.feature_dim, self.encoder_dim, self.encoder_layers, self.num_domains) < 1:
            raise ModelConfigError("all dims must be >= 1")
        if self.variant is Variant.MHAT:
            if self.blank_decoder_dim is None:
                raise ModelConfigError("MHAT requires blank_decoder_dim")
            if self.blank_decoder_dim < 1:
                raise ModelConfigError("blank_decoder_dim must be >= 1")
        else:
            if self.blank_decoder_dim is not None:
                raise ModelConfigError("HAT does not have a blank decoder")
            if self.joint_dim is None or self.joint_dim < 1:
                raise ModelConfigError("HAT requires joint_dim >= 1")
        if self.text_encoder.layers < 1:
            raise ModelConfigError("text_encoder.layers must be >= 1")
        if not (1 <= self.text_encoder.injection_layer <= self.encoder_layers):
            raise ModelConfigError(f"text_encoder.injection_layer must be in [1, {self.encoder_layers}]")

    @property
    def start_id(self):
        return self.vocab_size

    @property
    def mask_id(self):
        return self.vocab_size

    @property
    def domain_slots(self):
        """Acoustic domains plus the dedicated unpaired-text domain (last slot)."""
        return self.num_domains + 1

    @property
    def text_domain(self):
        return self.num_domains

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        d["label_decoder"]["kind"] = self.label_decoder.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def parameter_layout(config):
    """Ordered ``(name, shape, fan_in)`` for every parameter of ``config``."""
    V = config.vocab_size
    d_f = config.encoder_dim
    layout = []

    def lstm(prefix, d_in, hidden):
        layout.append((f"{prefix}.W_ih", (4 * hidden, d_in), d_in))
        layout.append((f"{prefix}.W_hh", (4 * hidden, hidden), hidden))
        layout.append((f"{prefix}.b", (4 * hidden,), hidden))

    for i in range(config.encoder_layers):
        lstm(f"encoder.layer{i}", config.feature_dim + config.domain_slots if i == 0 else d_f, d_f)

    dec = config.label_decoder
    if dec.kind is DecoderKind.RECURRENT:
        layout.append(("label_decoder.embed", (V + 1, dec.width), 1))
        for i in range(dec.layers):
            lstm(f"label_decoder.layer{i}", dec.width, dec.width)
    else:
        for k in range(dec.history):
            layout.append((f"label_decoder.slot{k}.embed", (V + 1, dec.embed_dim), 1))
        layout.append(("label_decoder.proj.W", (dec.embed_dim, dec.history * dec.embed_dim), dec.history * dec.embed_dim))
        layout.append(("label_decoder.proj.b", (dec.embed_dim,), dec.history * dec.embed_dim))
    d_g = dec.output_dim

    if config.variant is Variant.HAT:
        d_h = config.joint_dim
        layout.append(("joint.W1", (d_h, d_f), d_f))
        layout.append(("joint.W2", (d_h, d_g), d_g))
        layout.append(("joint.w", (d_h,), d_h))
        layout.append(("joint.W", (V, d_h), d_h))
    else:
        d_b = config.blank_decoder_dim
        layout.append(("blank_decoder.embed", (V + 1, d_b), 1))
        layout.append(("blank_decoder.proj.W", (d_b, 2 * d_b), 2 * d_b))
        layout.append(("blank_decoder.proj.b", (d_b,), 2 * d_b))
        layout.append(("blank_joint.W1", (d_b, d_f), d_f))
        layout.append(("blank_joint.W2", (d_b, d_b), d_b))
        layout.append(("blank_joint.w", (d_b,), d_b))
        layout.append(("joint.W3", (V, d_f), d_f))
        layout.append(("joint.W4", (V, d_g), d_g))

    layout.append(("text_encoder.embed", (V + 1, d_f), 1))
    for i in range(config.text_encoder.layers):
        lstm(f"text_encoder.layer{i}", d_f + config.domain_slots if i == 0 else d_f, d_f)
    return layout


def _is_ilm_name(config, name):
    if name.startswith("label_decoder."):
        return True
    if config.variant is Variant.HAT:
        return name in ("joint.W2", "joint.W")
    return name == "joint.W4"


class ModelParams:
    def __init__(self, config, parameters):
        """All trainable weights of one model.

        Parameters
        ----------
        config: ModelConfig
        parameters: dict[str, Parameter]
            Must match ``parameter_layout(config)`` in names and shapes.
        """
        expected = {name: shape for name, shape, _ in parameter_layout(config)}
        if set(parameters) != set(expected):
            missing = sorted(set(expected) - set(parameters))
            extra = sorted(set(parameters) - set(expected))
            raise ModelConfigError(f"parameter names mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if parameters[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {parameters[name].shape}")

        self.config = config
        self._parameters = {name: parameters[name] for name, _, _ in parameter_layout(config)}
        self.ilm_names = frozenset(n for n in self._parameters if _is_ilm_name(config, n))

    @classmethod
    def initialize(cls, config, seed=0):
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization, fixed by ``seed``."""
        rng = np.random.default_rng(seed)
        parameters = {}
        for name, shape, fan_in in parameter_layout(config):
            bound = 1.0 / np.sqrt(fan_in)
            parameters[name] = Parameter(name, rng.uniform(-bound, bound, size=shape))
        return cls(config, parameters)

    @classmethod
    def zeros(cls, config):
        return cls(config, {name: Parameter(name, np.zeros(shape)) for name, shape, _ in parameter_layout(config)})

    def __getitem__(self, name):
        return self._parameters[name]

    def __contains__(self, name):
        return name in self._parameters

    def __iter__(self):
        """Iterate parameters in layout order."""
        yield from self._parameters.values()

    def __len__(self):
        return len(self._parameters)

    def names(self):
        return list(self._parameters)

    def ilm_parameters(self):
        return [p for p in self if p.name in self.ilm_names]

    def count(self, names=None):
        """Number of scalar weights (optionally restricted to ``names``)."""
        return sum(p.values.size for p in self if names is None or p.name in names)

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def copy(self):
        """Deep copy with fresh gradient buffers (e.g. a frozen ILMA snapshot)."""
        return ModelParams(
            self.config,
            {p.name: Parameter(p.name, p.values, trainable=p.trainable) for p in self},
        )

    def to_arrays(self, prefix="param/"):
        return {prefix + p.name: p.values for p in self}

    @classmethod
    def from_arrays(cls, config, arrays, prefix="param/"):
        parameters = {}
        for name, _, _ in parameter_layout(config):
            try:
                parameters[name] = Parameter(name, arrays[prefix + name])
            except KeyError:
                raise ModelConfigError(f"checkpoint is missing parameter {name}")
        return cls(config, parameters)

    def save(self, path, extra_arrays=None, meta=None):
        arrays = self.to_arrays()
        arrays.update(extra_arrays or {})
        save_container(path, arrays, meta={"config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path):
        """Returns ``(params, arrays, meta)`` so callers can read extra entries."""
        arrays, meta = load_container(path)
        params = cls.from_arrays(ModelConfig.from_dict(meta["config"]), arrays)
        return params, arrays, meta


def check_tokens(tokens, vocab_size, allow_extra=False):
    """Validate a token sequence and return it as an int64 array.

    Parameters
    ----------
    tokens: Iterable[int]
    vocab_size: int
    allow_extra: bool
        Also accept the reserved id ``vocab_size`` (MASK in upsampled text).

    Raises
    ------
    TokenError
    """
    tokens = np.asarray(list(tokens), dtype=np.int64)
    upper = vocab_size + 1 if allow_extra else vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= upper):
        bad = sorted({int(t) for t in tokens if not 0 <= t < upper})
        what = "mask symbol" if allow_extra else "token"
        raise TokenError(f"{what} out of range [0, {upper}): {bad}")
    return tokens


def _require(params, variant, op):
    if params.config.variant is not variant:
        raise VariantError(f"{op} requires a {variant.value.upper()} model, got {params.config.variant.value.upper()}")


def _domain_columns(config, domain_id, shape):
    onehot = np.zeros(shape + (config.domain_slots,))
    onehot[..., domain_id] = 1.0
    return onehot


###########
# Encoder #
###########
def _lstm_stack(x, params, prefix, layers, start=0):
    """Run ``layers`` LSTM layers (from ``start``) over a ``(B, T, d)`` sequence."""
    B, T = x.shape[:2]
    for i in range(start, layers):
        cell = tuple(params[f"{prefix}.layer{i}.{w}"] for w in ("W_ih", "W_hh", "b"))
        hidden = cell[1].shape[1]
        state = (Tensor(np.zeros((B, hidden))), Tensor(np.zeros((B, hidden))))
        outputs = []
        for t in range(T):
            state, out = recurrent_step(state, x[:, t, :], cell)
            outputs.append(out)
        x = stack(outputs, axis=1)
    return x


def _pad(rows, width):
    """Right-pad 2-D arrays to a common length; returns ``(B, T_max, width)``."""
    T_max = max(len(r) for r in rows)
    out = np.zeros((len(rows), T_max, width))
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def encode(features, params, domain_id=0):
    """Acoustic encoder ``F = Encoder(X)``.

    Parameters
    ----------
    features: array_like
        Shape ``(T, feature_dim)``, ``T >= 1``.
    params: ModelParams
    domain_id: int
        Appended to every frame as a one-hot.

    Returns
    -------
    Tensor
        Shape ``(T, encoder_dim)``; row ``t`` depends on feature rows ``0..t`` only.
    """
    return encode_batch([features], [domain_id], params)[0]


def encode_batch(features_list, domain_ids, params):
    """Encode several utterances at once; right-padding is harmless because the encoder is causal."""
    config = params.config
    rows = []
    for features, domain_id in zip(features_list, domain_ids):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != config.feature_dim:
            raise ShapeError(f"encode: expected features of shape (T, {config.feature_dim}), got {features.shape}")
        if features.shape[0] < 1:
            raise ShapeError("encode: need at least one frame")
        if not 0 <= domain_id < config.num_domains:
            raise ShapeError(f"encode: domain_id {domain_id} outside [0, {config.num_domains})")
        rows.append(np.concatenate([features, _domain_columns(config, domain_id, (len(features),))], axis=1))

    x = Tensor(_pad(rows, config.feature_dim + config.domain_slots))
    out = _lstm_stack(x, params, "encoder", config.encoder_layers)
    return [out[i, : len(r)] for i, r in enumerate(rows)]


def encode_from(hidden, params, start_layer):
    """Run the encoder from ``start_layer`` onward on ``(B, T, encoder_dim)`` activations."""
    return _lstm_stack(as_tensor(hidden), params, "encoder", params.config.encoder_layers, start=start_layer)


################
# Text encoder #
################
def text_encode(upsampled_tokens, params):
    """Embed an upsampled, masked token sequence for encoder injection.

    Parameters
    ----------
    upsampled_tokens: array_like of int
        Output of ``losses.upsample_mask``; ids in ``[0, vocab_size]`` where
        ``vocab_size`` is MASK.
    params: ModelParams

    Returns
    -------
    Tensor
        Shape ``(T', encoder_dim)`` with ``T' = len(upsampled_tokens)``.
    """
    tokens = check_tokens(upsampled_tokens, params.config.vocab_size, allow_extra=True)
    if tokens.size == 0:
        return Tensor(np.zeros((0, params.config.encoder_dim)))
    return text_encode_batch([tokens], params)[0]


def _text_encode_padded(token_list, params):
    config = params.config
    T_max = max(len(t) for t in token_list)
    ids = np.full((len(token_list), T_max), config.mask_id, dtype=np.int64)
    for i, t in enumerate(token_list):
        ids[i, : len(t)] = t
    emb = embedding(params["text_encoder.embed"], ids)
    x = concat([emb, Tensor(_domain_columns(config, config.text_domain, ids.shape))], axis=-1)
    return _lstm_stack(x, params, "text_encoder", config.text_encoder.layers)


def text_encode_batch(token_list, params):
    config = params.config
    token_list = [check_tokens(t, config.vocab_size, allow_extra=True) for t in token_list]
    out = _text_encode_padded(token_list, params)
    return [out[i, : len(t)] for i, t in enumerate(token_list)]


def inject_text_batch(token_list, params):
    """Text encoder followed by the encoder layers from ``injection_layer`` on.

    Returns one ``(T'_i, encoder_dim)`` tensor per (nonempty) upsampled sequence,
    standing in for acoustic encoder output.
    """
    config = params.config
    token_list = [check_tokens(t, config.vocab_size, allow_extra=True) for t in token_list]
    if any(len(t) == 0 for t in token_list):
        raise ShapeError("inject_text_batch: empty upsampled sequence")
    hidden = _text_encode_padded(token_list, params)
    out = encode_from(hidden, params, config.text_encoder.injection_layer)
    return [out[i, : len(t)] for i, t in enumerate(token_list)]


############
# Decoders #
############
def _window_ids(inputs, history, start_id):
    """``(B, L)`` ids -> ``(B, L, history)``; slot ``k`` holds the token ``k`` steps back."""
    B, L = inputs.shape
    padded = np.concatenate([np.full((B, history - 1), start_id, dtype=np.int64), inputs], axis=1)
    return np.stack([padded[:, history - 1 - k : history - 1 - k + L] for k in range(history)], axis=-1)


def _embed_decoder(windows, params, prefix, shared):
    """V^N embedding decoder over precomputed windows ``(..., N)``."""
    history = windows.shape[-1]
    if shared:
        emb = embedding(params[f"{prefix}.embed"], windows)
        flat = reshape(emb, windows.shape[:-1] + (history * emb.shape[-1],))
    else:
        flat = concat(
            [embedding(params[f"{prefix}.slot{k}.embed"], windows[..., k]) for k in range(history)],
            axis=-1,
        )
    return tanh(affine(flat, params[f"{prefix}.proj.W"], params[f"{prefix}.proj.b"]))


def label_decode_batch(inputs, params):
    """Label decoder over decoder input ids ``(B, L)`` (start token first).

    Row ``u`` of the output conditions on ``inputs[:, :u+1]``; ``(B, L, d_g)``.
    """
    config = params.config
    inputs = np.asarray(inputs, dtype=np.int64)
    dec = config.label_decoder
    if dec.kind is DecoderKind.RECURRENT:
        return _lstm_stack(embedding(params["label_decoder.embed"], inputs), params, "label_decoder", dec.layers)
    return _embed_decoder(_window_ids(inputs, dec.history, config.start_id), params, "label_decoder", shared=False)


def blank_decode_batch(inputs, params):
    _require(params, Variant.MHAT, "blank_decode")
    inputs = np.asarray(inputs, dtype=np.int64)
    return _embed_decoder(_window_ids(inputs, 2, params.config.start_id), params, "blank_decoder", shared=True)


def decoder_inputs(prefix, config):
    """Prepend the start token: ``[y0, y1, ..., yU]``."""
    tokens = check_tokens(prefix, config.vocab_size)
    return np.concatenate([[config.start_id], tokens]).astype(np.int64)


def label_decode(prefix, params):
    """``g^L_u = LabelDecoder(Y_{0:u-1})`` for one prefix; shape ``(d_g,)``."""
    inputs = decoder_inputs(prefix, params.config)[None, :]
    return label_decode_batch(inputs, params)[0, -1]


def blank_decode(prefix, params):
    """``g^B_u = BlankDecoder(Y_{0:u-1})`` (MHAT only); depends on the last 2 tokens."""
    _require(params, Variant.MHAT, "blank_decode")
    inputs = decoder_inputs(prefix, params.config)[None, :]
    return blank_decode_batch(inputs, params)[0, -1]


class DecoderState:
    """Incremental label/blank decoder state for one hypothesis.

    Recurrent decoders keep per-layer ``(h, c)``; embedding decoders keep the
    token window. ``g_label``/``g_blank`` are the embeddings for the current prefix.
    """

    __slots__ = ("lstm", "window", "g_label", "g_blank")

    def __init__(self, lstm, window, g_label, g_blank):
        self.lstm = lstm
        self.window = window
        self.g_label = g_label
        self.g_blank = g_blank


def decoder_init(params):
    return decoder_step(None, params.config.start_id, params)


def decoder_step(state, token, params):
    """Advance decoder state by one token (the start token when ``state`` is None)."""
    config = params.config
    dec = config.label_decoder
    history = dec.history or 0
    window_len = max(history, 2)
    if state is None:
        window = (config.start_id,) * window_len
    else:
        window = (state.window + (int(token),))[-window_len:]

    lstm = None
    if dec.kind is DecoderKind.RECURRENT:
        x = embedding(params["label_decoder.embed"], [int(token)])
        lstm = []
        for i in range(dec.layers):
            cell = tuple(params[f"label_decoder.layer{i}.{w}"] for w in ("W_ih", "W_hh", "b"))
            if state is None:
                prev = (Tensor(np.zeros((1, dec.width))), Tensor(np.zeros((1, dec.width))))
            else:
                prev = state.lstm[i]
            new, x = recurrent_step(prev, x, cell)
            lstm.append(new)
        g_label = x[0]
    else:
        ids = np.array(window[::-1][:history], dtype=np.int64)
        g_label = _embed_decoder(ids, params, "label_decoder", shared=False)

    g_blank = None
    if config.variant is Variant.MHAT:
        ids = np.array(window[::-1][:2], dtype=np.int64)
        g_blank = _embed_decoder(ids, params, "blank_decoder", shared=True)
    return DecoderState(lstm, window, g_label, g_blank)


##########
# Joints #
##########
def _hat_hidden(f, g, params):
    return tanh(add(affine(f, params["joint.W1"]), affine(g, params["joint.W2"])))


def hat_emissions(f, g, params):
    """HAT ``(log b, log(1-b), log P(y|.))``; ``f`` and ``g`` broadcast against each other."""
    _require(params, Variant.HAT, "hat_joint")
    hidden = _hat_hidden(f, g, params)
    z = total(mul(hidden, params["joint.w"]), axis=-1)
    return log_sigmoid(z), log_sigmoid(neg(z)), log_softmax(affine(hidden, params["joint.W"]))


def hat_joint(f_t, g_u, params):
    """HAT joint network.

    ``b = Sigmoid(w^T tanh(W1 f + W2 g))`` and ``P(y) = Softmax(W tanh(W1 f + W2 g))``.

    Returns
    -------
    tuple[Tensor, Tensor]
        ``(log b, log P(y))``. The emission distribution is ``{b} U {(1-b) P(y)}``.
    """
    blank_lp, _, label_logprobs = hat_emissions(f_t, g_u, params)
    return blank_lp, label_logprobs


def mhat_emissions(f, g, g_b, params):
    """MHAT ``(log b, log(1-b), a_t, l_u, log P(y|.))`` with broadcasting."""
    _require(params, Variant.MHAT, "mhat_scores")
    hidden = tanh(add(affine(f, params["blank_joint.W1"]), affine(g_b, params["blank_joint.W2"])))
    z = total(mul(hidden, params["blank_joint.w"]), axis=-1)
    a_t = log_softmax(affine(f, params["joint.W3"]))
    l_u = log_softmax(affine(g, params["joint.W4"]))
    label_logprobs = log_softmax(add(a_t, l_u))
    return log_sigmoid(z), log_sigmoid(neg(z)), a_t, l_u, label_logprobs


def mhat_scores(f_t, g_u, g_b, params):
    """MHAT factorized scores.

    Returns
    -------
    tuple[Tensor, Tensor, Tensor, Tensor]
        ``(log b, a_t, l_u, log Softmax(a_t + l_u))``.
    """
    blank_lp, _, a_t, l_u, label_logprobs = mhat_emissions(f_t, g_u, g_b, params)
    return blank_lp, a_t, l_u, label_logprobs


def ilm_from_embedding(g, params):
    """ILM log-distribution from label decoder embeddings ``(..., d_g)``."""
    if params.config.variant is Variant.HAT:
        return log_softmax(affine(tanh(affine(g, params["joint.W2"])), params["joint.W"]))
    return log_softmax(affine(g, params["joint.W4"]))


def ilm_logprobs(prefix, params):
    """Internal LM ``log P(y | prefix)`` over the labels; no acoustic input involved."""
    return ilm_from_embedding(label_decode(prefix, params), params)


def ilm_logprobs_batch(inputs, params):
    """ILM log-distributions for decoder inputs ``(B, L)``; ``(B, L, vocab_size)``."""
    return ilm_from_embedding(label_decode_batch(inputs, params), params)
