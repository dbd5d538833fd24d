"""Transducer alignment lattice.

Cell ``(t, u)`` means "``t`` frames entered, ``u`` labels emitted". From it a
blank arc moves to ``(t+1, u)`` and a label arc emitting ``y_{u+1}`` moves to
``(t, u+1)``. Every alignment starts at ``(0, 0)`` and terminates with the blank
arc out of ``(T-1, U)``, so an alignment holds exactly ``T`` blanks and ``U``
labels and there are ``C(T+U-1, U)`` of them.

All arithmetic is in the log domain.
"""

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from models import (
    Variant,
    blank_decode_batch,
    check_tokens,
    decoder_inputs,
    encode,
    hat_emissions,
    label_decode_batch,
    mhat_emissions,
)
from numerics import Tensor, add, as_tensor, custom_node, gather_last

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 20


class LatticeError(ValueError):
    """Malformed grid or an instance the oracle refuses."""


@dataclass
class LatticeGrid:
    """Blank and label arc log-probabilities over a ``T x (U+1)`` lattice.

    Attributes
    ----------
    blank: Tensor
        Shape ``(T, U+1)``; ``log b_{t,u}``.
    label: Tensor
        Shape ``(T, U)``; ``log[(1-b_{t,u}) P(y_{u+1} | t, u)]``.
    """

    blank: Tensor
    label: Tensor

    def __post_init__(self):
        self.blank = as_tensor(self.blank)
        self.label = as_tensor(self.label)
        if self.blank.ndim != 2 or self.blank.shape[0] < 1:
            raise LatticeError(f"blank arcs must have shape (T>=1, U+1), got {self.blank.shape}")
        T, U1 = self.blank.shape
        if self.label.shape != (T, U1 - 1):
            raise LatticeError(f"label arcs must have shape {(T, U1 - 1)}, got {self.label.shape}")
        for name, values in (("blank", self.blank.values), ("label", self.label.values)):
            if np.isnan(values).any() or (values == np.inf).any():
                raise LatticeError(f"{name} arcs must be finite or -inf")
        mass = np.exp(self.blank.values[:, :-1]) + np.exp(self.label.values)
        if (mass > 1 + 1e-9).any():
            raise LatticeError("blank and label arc mass exceeds 1 at some cell")

    @property
    def T(self):
        return self.blank.shape[0]

    @property
    def U(self):
        return self.blank.shape[1] - 1

    @property
    def blank_lp(self):
        return self.blank.values

    @property
    def label_lp(self):
        return self.label.values


@dataclass
class ForwardBackward:
    loglik: float
    reachable: bool
    blank_occupancy: np.ndarray
    label_occupancy: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def forward_backward(grid):
    """Total alignment log-likelihood and per-arc posteriors.

    Parameters
    ----------
    grid: LatticeGrid

    Returns
    -------
    ForwardBackward
        ``loglik`` is ``-inf`` with ``reachable=False`` when no alignment has
        nonzero probability; occupancies are then all zero. Otherwise
        ``blank_occupancy``/``label_occupancy`` are ``d loglik / d arc`` and sum
        to ``T + U``.
    """
    blank, label = grid.blank_lp, grid.label_lp
    T, U = grid.T, grid.U

    alpha = np.full((T, U + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            from_blank = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            from_label = alpha[t, u - 1] + label[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(from_blank, from_label)

    beta = np.full((T, U + 1), -np.inf)
    beta[T - 1, U] = blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            to_blank = blank[t, u] + beta[t + 1, u] if t < T - 1 else -np.inf
            to_label = label[t, u] + beta[t, u + 1] if u < U else -np.inf
            beta[t, u] = np.logaddexp(to_blank, to_label)

    loglik = float(alpha[T - 1, U] + blank[T - 1, U])
    blank_occ = np.zeros((T, U + 1))
    label_occ = np.zeros((T, U))
    if loglik == -np.inf:
        log.debug("Transcript unreachable on a %dx%d lattice", T, U + 1)
        return ForwardBackward(loglik, False, blank_occ, label_occ, alpha, beta)

    beta_after_blank = np.full((T, U + 1), -np.inf)
    beta_after_blank[:-1] = beta[1:]
    beta_after_blank[T - 1, U] = 0.0
    with np.errstate(invalid="ignore"):
        blank_occ = np.exp(alpha + blank + beta_after_blank - loglik)
        label_occ = np.exp(alpha[:, :-1] + label + beta[:, 1:] - loglik)
    blank_occ = np.nan_to_num(blank_occ, nan=0.0)
    label_occ = np.nan_to_num(label_occ, nan=0.0)
    return ForwardBackward(loglik, True, blank_occ, label_occ, alpha, beta)


def lattice_loglik(grid):
    """Differentiable ``log P(Y | X)``: a scalar ``Tensor`` whose gradient is the arc occupancy."""
    fb = forward_backward(grid)

    def backward(g):
        return [g * fb.blank_occupancy, g * fb.label_occupancy]

    return custom_node(fb.loglik, [grid.blank, grid.label], backward), fb


def brute_force_likelihood(grid):
    """Enumerate every alignment and log-sum-exp their scores.

    Raises
    ------
    LatticeError
        ``T + U`` exceeds ``BRUTE_FORCE_LIMIT``.
    """
    T, U = grid.T, grid.U
    if T + U > BRUTE_FORCE_LIMIT:
        raise LatticeError(f"brute force refuses T+U={T + U} > {BRUTE_FORCE_LIMIT}")
    blank, label = grid.blank_lp, grid.label_lp

    scores = []
    moves = T - 1 + U
    for label_positions in itertools.combinations(range(moves), U):
        label_positions = set(label_positions)
        t = u = 0
        score = 0.0
        for k in range(moves):
            if k in label_positions:
                score += label[t, u]
                u += 1
            else:
                score += blank[t, u]
                t += 1
        scores.append(score + blank[T - 1, U])
    assert len(scores) == math.comb(moves, U)
    return float(np.logaddexp.reduce(scores))


def grid_from_encoded(encoded, transcript, params):
    """Build the lattice for ``transcript`` from encoder output ``(T, d_f)``."""
    config = params.config
    tokens = check_tokens(transcript, config.vocab_size)
    U = len(tokens)
    inputs = decoder_inputs(tokens, config)[None, :]
    f = encoded[:, None, :]
    g = label_decode_batch(inputs, params)[0][None, :, :]

    if config.variant is Variant.HAT:
        blank, nonblank, label_logprobs = hat_emissions(f, g, params)
    else:
        g_b = blank_decode_batch(inputs, params)[0][None, :, :]
        blank, nonblank, _, _, label_logprobs = mhat_emissions(f, g, g_b, params)

    T = encoded.shape[0]
    if U == 0:
        return LatticeGrid(blank, Tensor(np.zeros((T, 0))))
    picked = gather_last(label_logprobs[:, :U, :], np.broadcast_to(tokens, (T, U)))
    return LatticeGrid(blank, add(nonblank[:, :U], picked))


def fill_grid(params, features, transcript, domain_id=0):
    """Encode ``features`` and build the lattice for ``transcript``.

    Parameters
    ----------
    params: ModelParams
    features: array_like
        Shape ``(T, feature_dim)``.
    transcript: Sequence[int]
    domain_id: int

    Returns
    -------
    LatticeGrid
    """
    check_tokens(transcript, params.config.vocab_size)
    return grid_from_encoded(encode(features, params, domain_id), transcript, params)
