"""Transducer decoding, external LM and scoring.

``beam_search`` is frame-synchronous: at every frame, hypotheses may emit up to
``max_symbols_per_frame`` labels before the blank that moves them to the next
frame. Hypotheses with equal token sequences are merged by log-adding their
E2E scores. Pruning and n-best order use the fused score::

    fused = e2e + lambda_lm * lm - lambda_ilm * ilm

LM and ILM scores accumulate on label expansions only; blank arcs contribute
to ``e2e`` alone. Ties are broken by the token sequence (lexicographically
smaller first).
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from models import (
    Variant,
    check_tokens,
    decoder_init,
    decoder_step,
    encode,
    hat_emissions,
    ilm_from_embedding,
    mhat_emissions,
)
from numerics import (
    Parameter,
    Tensor,
    affine,
    embedding,
    gather_last,
    load_container,
    log_softmax,
    mul,
    neg,
    no_grad,
    recurrent_step,
    save_container,
    stack,
    total,
)
from optim import Adam
from uprofiler import profile

log = logging.getLogger(__name__)


class DecodingError(ValueError):
    """Invalid fusion setup or scoring input."""


@dataclass(frozen=True)
class FusionConfig:
    lambda_lm: float = 0.3
    lambda_ilm: float = 0.1
    beam_width: int = 4
    max_symbols_per_frame: int = 4

    def __post_init__(self):
        if self.lambda_lm < 0 or self.lambda_ilm < 0:
            raise DecodingError("fusion weights must be >= 0")
        if self.lambda_ilm > 0 and self.lambda_lm == 0:
            raise DecodingError("lambda_ilm > 0 requires lambda_lm > 0")
        if self.beam_width < 1:
            raise DecodingError("beam_width must be >= 1")
        if self.max_symbols_per_frame < 1:
            raise DecodingError("max_symbols_per_frame must be >= 1")

    @property
    def fused(self):
        return self.lambda_lm > 0


@dataclass
class Hypothesis:
    tokens: tuple
    e2e_logscore: float = 0.0
    lm_logscore: float = 0.0
    ilm_logscore: float = 0.0
    fused_score: float = 0.0
    state: object = field(default=None, compare=False, repr=False)
    lm_state: object = field(default=None, compare=False, repr=False)
    lm_next: object = field(default=None, compare=False, repr=False)

    def rescore(self, cfg):
        self.fused_score = fusion_score(self.e2e_logscore, self.lm_logscore, self.ilm_logscore, cfg)
        return self


def fusion_score(e2e, lm, ilm, cfg):
    return e2e + cfg.lambda_lm * lm - cfg.lambda_ilm * ilm


def _order(hyps):
    return sorted(hyps, key=lambda h: (-h.fused_score, h.tokens))


def _emissions(f_t, hyps, params):
    """Blank log-probs ``(n,)``, label arc log-probs ``(n, V)`` and ILM ``(n, V)`` per hypothesis."""
    g = stack([h.state.g_label for h in hyps])
    if params.config.variant is Variant.HAT:
        blank, nonblank, label = hat_emissions(f_t, g, params)
    else:
        g_b = stack([h.state.g_blank for h in hyps])
        blank, nonblank, _, _, label = mhat_emissions(f_t, g, g_b, params)
    arcs = nonblank.values[:, None] + label.values
    return blank.values, arcs, g


@profile(name="beam_search")
def beam_search(params, features, cfg, ext_lm=None, domain_id=0):
    """N-best transducer decoding with optional LM fusion and ILM subtraction.

    Parameters
    ----------
    params: ModelParams
    features: array_like
        ``(T, feature_dim)``.
    cfg: FusionConfig
    ext_lm: Optional[ExternalLM]
        Required when ``cfg.lambda_lm > 0``.
    domain_id: int

    Returns
    -------
    list[Hypothesis]
        At most ``beam_width`` hypotheses sorted by fused score.
    """
    if cfg.fused and ext_lm is None:
        raise DecodingError("lambda_lm > 0 requires an external LM")
    V = params.config.vocab_size
    beam = cfg.beam_width

    with no_grad():
        encoded = encode(features, params, domain_id).values
        root = Hypothesis(tokens=(), state=decoder_init(params))
        if cfg.fused:
            root.lm_state, root.lm_next = lm_init(ext_lm)
        B = [root]

        for f_t in encoded:
            A = {}
            C = B
            for v in range(cfg.max_symbols_per_frame + 1):
                blank, arcs, g = _emissions(f_t, C, params)
                for i, hyp in enumerate(C):
                    score = hyp.e2e_logscore + blank[i]
                    merged = A.get(hyp.tokens)
                    if merged is None:
                        A[hyp.tokens] = Hypothesis(
                            hyp.tokens, score, hyp.lm_logscore, hyp.ilm_logscore, 0.0, hyp.state, hyp.lm_state, hyp.lm_next
                        ).rescore(cfg)
                    else:
                        merged.e2e_logscore = float(np.logaddexp(merged.e2e_logscore, score))
                        merged.rescore(cfg)

                if v == cfg.max_symbols_per_frame:
                    break

                ilm = ilm_from_embedding(g, params).values if cfg.lambda_ilm > 0 else np.zeros((len(C), V))
                candidates = []
                for i, hyp in enumerate(C):
                    lm_next = hyp.lm_next if cfg.fused else np.zeros(V)
                    inc = arcs[i] + cfg.lambda_lm * lm_next - cfg.lambda_ilm * ilm[i]
                    for k in np.lexsort((np.arange(V), -inc))[:beam]:
                        candidates.append(
                            (
                                hyp.fused_score + inc[k],
                                hyp.tokens + (int(k),),
                                hyp,
                                arcs[i, k],
                                lm_next[k],
                                ilm[i, k],
                            )
                        )
                candidates.sort(key=lambda c: (-c[0], c[1]))

                C = []
                for _, tokens, parent, arc, lm_lp, ilm_lp in candidates[:beam]:
                    child = Hypothesis(
                        tokens,
                        parent.e2e_logscore + arc,
                        parent.lm_logscore + lm_lp,
                        parent.ilm_logscore + ilm_lp,
                        state=decoder_step(parent.state, tokens[-1], params),
                    ).rescore(cfg)
                    if cfg.fused:
                        child.lm_state, child.lm_next = lm_step(ext_lm, parent.lm_state, tokens[-1])
                    C.append(child)
                if not C:
                    break

            B = _order(A.values())[:beam]
    return B


@profile(name="greedy_search")
def greedy_search(params, features, max_symbols_per_frame=4, domain_id=0):
    """Best-path decoding: per frame, emit the top label while it beats blank."""
    with no_grad():
        encoded = encode(features, params, domain_id).values
        hyp = Hypothesis(tokens=(), state=decoder_init(params))
        for f_t in encoded:
            for _ in range(max_symbols_per_frame):
                blank, arcs, _ = _emissions(f_t, [hyp], params)
                k = int(np.argmax(arcs[0]))
                if blank[0] >= arcs[0, k]:
                    hyp.e2e_logscore += blank[0]
                    break
                hyp = Hypothesis(
                    hyp.tokens + (k,), hyp.e2e_logscore + arcs[0, k], state=decoder_step(hyp.state, k, params)
                )
            else:
                blank, _, _ = _emissions(f_t, [hyp], params)
                hyp.e2e_logscore += blank[0]
        hyp.fused_score = hyp.e2e_logscore
    return hyp


def decode_utterances(params, utterances, cfg, ext_lm=None):
    """``{uid: n-best}``; beam width 1 without fusion uses greedy search."""
    results = {}
    for utt in utterances:
        if cfg.beam_width == 1 and not cfg.fused:
            results[utt.uid] = [greedy_search(params, utt.features, cfg.max_symbols_per_frame, utt.domain_id)]
        else:
            results[utt.uid] = beam_search(params, utt.features, cfg, ext_lm, utt.domain_id)
    return results


def write_nbest(path, results, vocab):
    """One line per hypothesis: uid, rank, fused, e2e, lm, ilm, words (tab separated)."""
    lines = []
    for uid in sorted(results):
        for rank, h in enumerate(results[uid]):
            words = " ".join(vocab.decode(h.tokens))
            lines.append(
                f"{uid}\t{rank}\t{h.fused_score!r}\t{h.e2e_logscore!r}\t{h.lm_logscore!r}\t{h.ilm_logscore!r}\t{words}"
            )
    with open(path, "w") as f:
        f.writelines(line + "\n" for line in lines)


def read_nbest(path, vocab):
    results = {}
    with open(path) as f:
        for line in f:
            uid, _, fused, e2e, lm, ilm, words = line.rstrip("\n").split("\t")
            tokens = tuple(int(t) for t in vocab.encode(words.split()))
            results.setdefault(uid, []).append(Hypothesis(tokens, float(e2e), float(lm), float(ilm), float(fused)))
    return results


###############
# External LM #
###############
@dataclass(frozen=True)
class LMConfig:
    layers: int = 2
    width: int = 32
    embed_dim: int = 32
    steps: int = 400
    batch_size: int = 32
    learning_rate: float = 3e-3
    transcript_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.layers, self.width, self.embed_dim, self.batch_size) < 1 or self.steps < 0:
            raise DecodingError("LM dims and batch size must be >= 1, steps >= 0")
        if not 0.0 <= self.transcript_fraction <= 1.0:
            raise DecodingError("transcript_fraction must be in [0, 1]")


class ExternalLM:
    def __init__(self, config, vocab_size, parameters=None, seed=0):
        """Recurrent autoregressive LM over the label vocabulary.

        Parameters
        ----------
        config: LMConfig
        vocab_size: int
            Row ``vocab_size`` of the embedding table is the start token.
        parameters: Optional[dict[str, Parameter]]
            Defaults to a seeded uniform initialization.
        """
        self.config = config
        self.vocab_size = vocab_size
        if parameters is None:
            parameters = {}
            rng = np.random.default_rng(seed)
            for name, shape, fan_in in self.layout():
                bound = 1.0 / np.sqrt(fan_in)
                parameters[name] = Parameter(name, rng.uniform(-bound, bound, size=shape))
        self.parameters = parameters

    def layout(self):
        c, V = self.config, self.vocab_size
        layout = [("lm.embed", (V + 1, c.embed_dim), 1)]
        for i in range(c.layers):
            d_in = c.embed_dim if i == 0 else c.width
            layout += [
                (f"lm.layer{i}.W_ih", (4 * c.width, d_in), d_in),
                (f"lm.layer{i}.W_hh", (4 * c.width, c.width), c.width),
                (f"lm.layer{i}.b", (4 * c.width,), c.width),
            ]
        layout += [("lm.out.W", (V, c.width), c.width), ("lm.out.b", (V,), c.width)]
        return layout

    def __getitem__(self, name):
        return self.parameters[name]

    def __iter__(self):
        yield from self.parameters.values()

    def _cell(self, i):
        return tuple(self.parameters[f"lm.layer{i}.{w}"] for w in ("W_ih", "W_hh", "b"))

    def logprobs_batch(self, inputs):
        """``(B, L)`` inputs (start token first) -> ``(B, L, V)`` next-token log-probabilities."""
        x = embedding(self["lm.embed"], inputs)
        B, L = inputs.shape
        for i in range(self.config.layers):
            state = (Tensor(np.zeros((B, self.config.width))), Tensor(np.zeros((B, self.config.width))))
            outputs = []
            for t in range(L):
                state, out = recurrent_step(state, x[:, t, :], self._cell(i))
                outputs.append(out)
            x = stack(outputs, axis=1)
        return log_softmax(affine(x, self["lm.out.W"], self["lm.out.b"]))

    def save(self, path):
        save_container(
            path,
            {name: p.values for name, p in self.parameters.items()},
            meta={"lm_config": asdict(self.config), "vocab_size": self.vocab_size},
        )

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path)
        return cls(
            LMConfig(**meta["lm_config"]),
            meta["vocab_size"],
            {name: Parameter(name, values) for name, values in arrays.items()},
        )


def lm_init(lm):
    return lm_step(lm, None, lm.vocab_size)


def lm_step(lm, state, token):
    """Feed ``token``; returns ``(state', next-token log-probabilities (V,))``."""
    with no_grad():
        x = embedding(lm["lm.embed"], [int(token)])
        new_state = []
        for i in range(lm.config.layers):
            if state is None:
                prev = (Tensor(np.zeros((1, lm.config.width))), Tensor(np.zeros((1, lm.config.width))))
            else:
                prev = state[i]
            s, x = recurrent_step(prev, x, lm._cell(i))
            new_state.append(s)
        logprobs = log_softmax(affine(x, lm["lm.out.W"], lm["lm.out.b"])).values[0]
    return new_state, logprobs


def _lm_inputs(text, start_id):
    text = [np.asarray(y, dtype=np.int64) for y in text]
    L = max(len(y) for y in text) + 1
    inputs = np.zeros((len(text), L), dtype=np.int64)
    targets = np.zeros_like(inputs)
    valid = np.zeros(inputs.shape)
    for i, y in enumerate(text):
        inputs[i, 0] = start_id
        inputs[i, 1 : len(y) + 1] = y
        targets[i, : len(y)] = y
        valid[i, : len(y)] = 1.0
    return inputs, targets, valid


def lm_sequence_loss(lm, text):
    """``-sum_Y sum_u log P_LM(y_u | Y_{0:u-1})``."""
    inputs, targets, valid = _lm_inputs(text, lm.vocab_size)
    picked = gather_last(lm.logprobs_batch(inputs)[:, :-1, :], targets[:, :-1])
    return neg(total(mul(picked, Tensor(valid[:, :-1]))))


def lm_logprob(lm, prefix, next_token):
    """Normalized ``log P_LM(next_token | prefix)``."""
    prefix = check_tokens(prefix, lm.vocab_size)
    next_token = int(check_tokens([next_token], lm.vocab_size)[0])
    with no_grad():
        inputs = np.concatenate([[lm.vocab_size], prefix]).astype(np.int64)[None, :]
        return float(lm.logprobs_batch(inputs).values[0, -1, next_token])


def lm_perplexity(lm, text):
    tokens = sum(len(y) for y in text)
    if tokens == 0:
        raise DecodingError("lm_perplexity: no tokens")
    with no_grad():
        return float(np.exp(lm_sequence_loss(lm, text).item() / tokens))


@dataclass
class LMTrainResult:
    lm: ExternalLM
    losses: list
    transcript_share: float


def train_external_lm(transcripts, unpaired_text, cfg, vocab_size):
    """Fit an ``ExternalLM`` on a transcript/unpaired-text mixture.

    Transcripts fill a cumulative quota of ``transcript_fraction`` of all drawn
    sentences, so each batch holds the floor or ceiling of
    ``batch_size * transcript_fraction`` of them and the run-level share stays
    within ``1 / (2 * steps * batch_size)`` of the fraction. Unpaired sentences
    fill the rest. Draws use a generator seeded by ``(cfg.seed, step)``.

    Returns
    -------
    LMTrainResult
        ``losses`` are per-token cross-entropies, one per step.
    """
    transcripts = [y for y in transcripts if len(y)]
    unpaired_text = [y for y in unpaired_text if len(y)]
    fraction = cfg.transcript_fraction
    if (fraction > 0 and not transcripts) or (fraction < 1 and not unpaired_text):
        raise DecodingError("train_external_lm: a mixture component is empty")

    lm = ExternalLM(cfg, vocab_size, seed=cfg.seed)
    opt = Adam(cfg.learning_rate)
    losses = []
    drawn_transcripts = drawn_total = 0
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        n_transcripts = int(np.floor(fraction * cfg.batch_size * (step + 1) + 0.5)) - drawn_transcripts
        batch = [transcripts[i] for i in rng.integers(len(transcripts), size=n_transcripts)] if n_transcripts else []
        n_unpaired = cfg.batch_size - n_transcripts
        if n_unpaired:
            batch += [unpaired_text[i] for i in rng.integers(len(unpaired_text), size=n_unpaired)]
        drawn_transcripts += n_transcripts
        drawn_total += len(batch)

        for p in lm:
            p.zero_grad()
        loss = lm_sequence_loss(lm, batch)
        tokens = sum(len(y) for y in batch)
        loss.backward()
        for p in lm:
            p.grad[...] /= tokens
        opt.update(lm)
        losses.append(loss.item() / tokens)
        if step % 50 == 0:
            log.info("LM step %d: cross-entropy %.4f", step, losses[-1])
    share = drawn_transcripts / drawn_total if drawn_total else 0.0
    return LMTrainResult(lm, losses, share)


###########
# Scoring #
###########
@dataclass(frozen=True)
class WerResult:
    rate: float
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions


def _edit_counts(ref, hyp):
    """Minimum-edit alignment counts ``(S, D, I)``; ties prefer substitutions, then deletions."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(
                cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                cost[i - 1, j] + 1,
                cost[i, j - 1] + 1,
            )

    S = D = I = 0  # noqa: E741
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1  # noqa: E741
            j -= 1
    return S, D, I


def wer(ref, hyp):
    """Word error rate ``(S + D + I) / len(ref)`` with its edit breakdown.

    Raises
    ------
    DecodingError
        ``ref`` is empty.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise DecodingError("wer: empty reference")
    S, D, I = _edit_counts(ref, hyp)  # noqa: E741
    return WerResult((S + D + I) / len(ref), S, D, I, len(ref))


def corpus_wer(pairs):
    """Pooled WER over ``(ref, hyp)`` pairs."""
    S = D = I = N = 0  # noqa: E741
    for ref, hyp in pairs:
        r = wer(ref, hyp)
        S, D, I, N = S + r.substitutions, D + r.deletions, I + r.insertions, N + r.ref_len  # noqa: E741
    if N == 0:
        raise DecodingError("corpus_wer: no reference tokens")
    return WerResult((S + D + I) / N, S, D, I, N)


def score_sets(results, test_sets):
    """``{set name: WerResult}`` using the top hypothesis per utterance."""
    return {
        name: corpus_wer((u.transcript.tolist(), list(results[u.uid][0].tokens)) for u in utterances)
        for name, utterances in test_sets.items()
    }


@dataclass
class SweepResult:
    best: tuple
    best_wer: float
    table: list


def fusion_sweep(params, utterances, ext_lm, lambda_lm_grid, lambda_ilm_grid, beam_width=4, max_symbols_per_frame=4):
    """Corpus WER for every valid ``(lambda_lm, lambda_ilm)`` pair; best is the lowest (smallest weights on ties)."""
    table = []
    for lam_lm in sorted(lambda_lm_grid):
        for lam_ilm in sorted(lambda_ilm_grid):
            if lam_ilm > 0 and lam_lm == 0:
                continue
            cfg = FusionConfig(lam_lm, lam_ilm, beam_width, max_symbols_per_frame)
            results = decode_utterances(params, utterances, cfg, ext_lm if cfg.fused else None)
            rate = corpus_wer((u.transcript.tolist(), list(results[u.uid][0].tokens)) for u in utterances).rate
            log.info("Sweep lambda_lm=%.3f lambda_ilm=%.3f: WER %.4f", lam_lm, lam_ilm, rate)
            table.append((lam_lm, lam_ilm, rate))
    if not table:
        raise DecodingError("fusion_sweep: empty grid")
    best = min(table, key=lambda row: (row[2], row[0], row[1]))
    return SweepResult((best[0], best[1]), best[2], table)
