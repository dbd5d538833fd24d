"""Training objectives.

Raw losses are sums over the batch, matching their definitions:

* ``e2e_loss_paired``: ``-sum log P(Y | X)`` over paired utterances.
* ``e2e_loss_unpaired``: JOIST, ``-sum log P(Y | F(Y))`` where ``F`` upsamples,
  masks and text-encodes the sentence.
* ``ilm_loss``: ``-sum_u log P_ILM(y_u | Y_{0:u-1})``; touches only the ILM parameters.
* ``kld_regularizer``: ``sum KL(frozen ILM || adapted ILM)`` over label positions.

``composite_objective`` combines them per training mode and divides by the
paired batch size (text batch size for ILMA).
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from lattice import grid_from_encoded, lattice_loglik
from models import (
    Variant,
    check_tokens,
    encode_batch,
    ilm_logprobs_batch,
    inject_text_batch,
)
from numerics import Tensor, add, gather_last, mul, neg, no_grad, scale, sub, total

log = logging.getLogger(__name__)


class ObjectiveError(ValueError):
    """Mode and loss weights are inconsistent."""


class Mode(str, Enum):
    BASE = "base"
    ILMT = "ilmt"
    JEIT = "jeit"
    JOIST = "joist"
    CJJT = "cjjt"
    ILMA = "ilma"


class TextSource(str, Enum):
    PAIRED_TRANSCRIPTS = "paired_transcripts"
    UNPAIRED = "unpaired"


class RepeatPolicy(str, Enum):
    FIXED = "fixed"
    RANDOM = "random"


TEXT_MODES = frozenset({Mode.JEIT, Mode.JOIST, Mode.CJJT, Mode.ILMA})


@dataclass(frozen=True)
class UpsampleMaskConfig:
    """Upsampling and masking policy of the JOIST text path.

    ``FIXED`` repeats every token ``k`` times; ``RANDOM`` draws each token's
    repeat count uniformly from ``[k_min, k_max]``.
    """

    repeat_policy: RepeatPolicy = RepeatPolicy.FIXED
    k: int = 2
    k_min: int = 1
    k_max: int = 3
    mask_prob: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "repeat_policy", RepeatPolicy(self.repeat_policy))
        except ValueError:
            raise ObjectiveError(f"Unknown repeat policy {self.repeat_policy!r}")
        if self.k < 1 or self.k_min < 1:
            raise ObjectiveError("repeat counts must be >= 1")
        if self.k_min > self.k_max:
            raise ObjectiveError(f"k_min={self.k_min} exceeds k_max={self.k_max}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ObjectiveError(f"mask_prob={self.mask_prob} outside [0, 1]")


_DEFAULT_WEIGHTS = {
    Mode.BASE: {},
    Mode.ILMT: {"beta": 0.1},
    Mode.JOIST: {"alpha": 0.25},
    Mode.CJJT: {"alpha": 0.25, "beta": 1.5},
    Mode.ILMA: {"kld_weight": 0.5},
}
_JEIT_BETA = {Variant.HAT: 0.2, Variant.MHAT: 4.0}


@dataclass(frozen=True)
class ObjectiveSpec:
    mode: Mode
    alpha: float = 0.0
    beta: float = 0.0
    kld_weight: float = 0.0
    ilm_text_source: TextSource | None = None
    upsample: UpsampleMaskConfig = field(default_factory=UpsampleMaskConfig)

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
        except ValueError:
            raise ObjectiveError(f"Unknown mode {self.mode!r}")
        if self.ilm_text_source is None:
            source = TextSource.PAIRED_TRANSCRIPTS if self.mode is Mode.ILMT else TextSource.UNPAIRED
        else:
            source = TextSource(self.ilm_text_source)
        object.__setattr__(self, "ilm_text_source", source)
        if isinstance(self.upsample, dict):
            object.__setattr__(self, "upsample", UpsampleMaskConfig(**self.upsample))
        for name in ("alpha", "beta", "kld_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ObjectiveError(f"{name}={value} must be a finite non-negative number")

    @classmethod
    def for_mode(cls, mode, variant=Variant.MHAT, **overrides):
        """Objective with the default weights of ``mode`` (JEIT's beta depends on ``variant``)."""
        mode = Mode(mode)
        weights = dict(_DEFAULT_WEIGHTS.get(mode, {}))
        if mode is Mode.JEIT:
            weights["beta"] = _JEIT_BETA[Variant(variant)]
        weights.update(overrides)
        return cls(mode=mode, **weights)

    @property
    def uses_text(self):
        return self.mode in TEXT_MODES

    def validate(self):
        """Reject weights inconsistent with ``mode``.

        Raises
        ------
        ObjectiveError
        """
        mode, alpha, beta = self.mode, self.alpha, self.beta
        needs = {
            Mode.BASE: (alpha == 0 and beta == 0, "alpha=beta=0"),
            Mode.ILMT: (alpha == 0 and beta > 0, "alpha=0 and beta>0"),
            Mode.JEIT: (alpha == 0 and beta > 0, "alpha=0 and beta>0"),
            Mode.JOIST: (alpha > 0 and beta == 0, "alpha>0 and beta=0"),
            Mode.CJJT: (alpha > 0 and beta > 0, "alpha>0 and beta>0"),
            Mode.ILMA: (alpha == 0 and beta == 0, "alpha=beta=0"),
        }
        ok, what = needs[mode]
        if not ok:
            raise ObjectiveError(f"{mode.value.upper()} requires {what}; got alpha={alpha}, beta={beta}")
        if mode is not Mode.ILMA and self.kld_weight != 0:
            raise ObjectiveError(f"kld_weight is only meaningful for ILMA, got {self.kld_weight}")
        if mode is Mode.ILMT and self.ilm_text_source is not TextSource.PAIRED_TRANSCRIPTS:
            raise ObjectiveError("ILMT draws its ILM text from paired transcripts")
        if mode in (Mode.JEIT, Mode.CJJT, Mode.ILMA) and self.ilm_text_source is not TextSource.UNPAIRED:
            raise ObjectiveError(f"{mode.value.upper()} draws its ILM text from unpaired text")
        return self


##########
# Losses #
##########
def _nonempty(batch, what):
    if len(batch) == 0:
        raise ObjectiveError(f"{what}: empty batch")


def _sum(terms):
    out = terms[0]
    for term in terms[1:]:
        out = add(out, term)
    return out


def e2e_loss_paired(batch, params):
    """``-sum log P(Y | X)`` over ``batch``.

    Parameters
    ----------
    batch: list[corpus.Utterance]
    params: ModelParams

    Returns
    -------
    Tensor
        Scalar; ``+inf`` if any transcript is unreachable.
    """
    _nonempty(batch, "e2e_loss_paired")
    encoded = encode_batch([u.features for u in batch], [u.domain_id for u in batch], params)
    terms = []
    for utt, f in zip(batch, encoded):
        loglik, fb = lattice_loglik(grid_from_encoded(f, utt.transcript, params))
        if not fb.reachable:
            log.warning("Unreachable transcript (T=%d, U=%d)", len(utt.features), len(utt.transcript))
        terms.append(neg(loglik))
    return _sum(terms)


def upsample_mask(sentence, cfg, mask_id, rng=None):
    """The ``F`` text pipeline minus embedding: repeat tokens, then mask positions.

    Parameters
    ----------
    sentence: Sequence[int]
    cfg: UpsampleMaskConfig
    mask_id: int
        Reserved MASK id (``ModelConfig.mask_id``).
    rng: Optional[np.random.Generator]
        Defaults to a fresh generator seeded with ``cfg.rng_seed``.

    Returns
    -------
    np.ndarray
        int64 ids; masked positions hold ``mask_id``.
    """
    tokens = check_tokens(sentence, mask_id)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    if cfg.repeat_policy is RepeatPolicy.FIXED:
        counts = np.full(len(tokens), cfg.k)
    else:
        counts = rng.integers(cfg.k_min, cfg.k_max + 1, size=len(tokens))
    upsampled = np.repeat(tokens, counts)
    upsampled[rng.random(len(upsampled)) < cfg.mask_prob] = mask_id
    return upsampled


def e2e_loss_unpaired(text_batch, params, cfg):
    """JOIST loss: transducer loss of each sentence against its own upsampled, masked copy."""
    _nonempty(text_batch, "e2e_loss_unpaired")
    if any(len(y) == 0 for y in text_batch):
        raise ObjectiveError("e2e_loss_unpaired: empty sentence")
    rng = np.random.default_rng(cfg.rng_seed)
    upsampled = [upsample_mask(y, cfg, params.config.mask_id, rng) for y in text_batch]
    terms = []
    for y, f in zip(text_batch, inject_text_batch(upsampled, params)):
        loglik, _ = lattice_loglik(grid_from_encoded(f, y, params))
        terms.append(neg(loglik))
    return _sum(terms)


def _ilm_positions(text_batch, config):
    """Padded decoder inputs, targets and validity mask for next-token prediction."""
    text_batch = [check_tokens(y, config.vocab_size) for y in text_batch]
    L = max(len(y) for y in text_batch)
    inputs = np.zeros((len(text_batch), max(L, 1)), dtype=np.int64)
    targets = np.zeros_like(inputs)
    valid = np.zeros(inputs.shape)
    for i, y in enumerate(text_batch):
        inputs[i, 0] = config.start_id
        inputs[i, 1 : len(y)] = y[:-1]
        targets[i, : len(y)] = y
        valid[i, : len(y)] = 1.0
    return inputs, targets, valid


def ilm_loss(text_batch, params):
    """``-sum_Y sum_u log P_ILM(y_u | Y_{0:u-1})``; gradients reach only ``params.ilm_names``."""
    _nonempty(text_batch, "ilm_loss")
    inputs, targets, valid = _ilm_positions(text_batch, params.config)
    picked = gather_last(ilm_logprobs_batch(inputs, params), targets)
    return neg(total(mul(picked, Tensor(valid))))


def ilm_perplexity(text, params):
    """``exp(ILM loss / token count)`` on ``text``."""
    tokens = sum(len(y) for y in text)
    if tokens == 0:
        raise ObjectiveError("ilm_perplexity: no tokens")
    with no_grad():
        return float(np.exp(ilm_loss(text, params).item() / tokens))


def kld_regularizer(text_batch, params, frozen):
    """``sum_positions KL(P_frozen || P_adapted)`` over the ILM's next-label distributions."""
    _nonempty(text_batch, "kld_regularizer")
    inputs, _, valid = _ilm_positions(text_batch, params.config)
    with no_grad():
        frozen_lp = ilm_logprobs_batch(inputs, frozen).values
    adapted_lp = ilm_logprobs_batch(inputs, params)
    weights = Tensor(np.exp(frozen_lp) * valid[..., None])
    return total(mul(weights, sub(Tensor(frozen_lp), adapted_lp)))


#############
# Composite #
#############
@dataclass
class ObjectiveValue:
    """Scalar loss plus per-component values (each divided by the same normalizer)."""

    loss: Tensor
    components: dict

    def backward(self):
        self.loss.backward()


def composite_objective(
    spec,
    paired_batch,
    text_batch,
    params,
    frozen=None,
    check=True,
    joist_batch_size=None,
    upsample_seed=None,
):
    """Mode-dependent training loss.

    =====  ======================================================
    BASE   E2E
    ILMT   E2E + beta * ILM(paired transcripts)
    JOIST  E2E + alpha * E2E_unpaired
    JEIT   E2E + beta * ILM(unpaired)
    CJJT   E2E + alpha * E2E_unpaired + beta * ILM(unpaired)
    ILMA   ILM(unpaired) + kld_weight * KLD(frozen || adapted)
    =====  ======================================================

    Parameters
    ----------
    spec: ObjectiveSpec
    paired_batch: list[corpus.Utterance]
        Ignored by ILMA.
    text_batch: list[Sequence[int]]
        Unpaired sentences; required by JEIT/JOIST/CJJT/ILMA.
    params: ModelParams
    frozen: Optional[ModelParams]
        ILMA snapshot.
    check: bool
        Validate ``spec`` first. Disable to evaluate the formula for arbitrary
        non-negative weights.
    joist_batch_size: Optional[int]
        Use only the first ``joist_batch_size`` sentences for the unpaired E2E term.
    upsample_seed: Optional[int]
        Overrides ``spec.upsample.rng_seed``.

    Returns
    -------
    ObjectiveValue
    """
    if check:
        spec.validate()
    components = {}

    if spec.mode is Mode.ILMA:
        if frozen is None:
            raise ObjectiveError("ILMA requires a frozen snapshot")
        _nonempty(text_batch or [], "ILMA text batch")
        norm = 1.0 / len(text_batch)
        ilm = scale(ilm_loss(text_batch, params), norm)
        components["ilm"] = ilm.item()
        loss = ilm
        if spec.kld_weight > 0:
            kld = scale(kld_regularizer(text_batch, params, frozen), norm)
            components["kld"] = kld.item()
            loss = add(loss, scale(kld, spec.kld_weight))
        components["total"] = loss.item()
        return ObjectiveValue(loss, components)

    _nonempty(paired_batch, "paired batch")
    norm = 1.0 / len(paired_batch)
    loss = scale(e2e_loss_paired(paired_batch, params), norm)
    components["e2e_paired"] = loss.item()

    if spec.alpha > 0:
        _nonempty(text_batch or [], "unpaired text batch")
        joist_text = text_batch[:joist_batch_size] if joist_batch_size else text_batch
        upsample = spec.upsample if upsample_seed is None else replace(spec.upsample, rng_seed=upsample_seed)
        unpaired = scale(e2e_loss_unpaired(joist_text, params, upsample), norm)
        components["e2e_unpaired"] = unpaired.item()
        loss = add(loss, scale(unpaired, spec.alpha))

    if spec.beta > 0:
        if spec.ilm_text_source is TextSource.PAIRED_TRANSCRIPTS:
            ilm_text = [u.transcript for u in paired_batch]
        else:
            ilm_text = text_batch or []
            _nonempty(ilm_text, "unpaired text batch")
        ilm = scale(ilm_loss(ilm_text, params), norm)
        components["ilm"] = ilm.item()
        loss = add(loss, scale(ilm, spec.beta))

    components["total"] = loss.item()
    return ObjectiveValue(loss, components)
