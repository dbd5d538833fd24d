"""Answers the question "how slow is XYZ?".

Times the kernels every training step leans on: a batched affine map, one
LSTM step (forward and backward) and the lattice forward-backward pass.

Usage::

    python tools/benchmark.py --affine --lstm --lattice -n 200
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "lib"))

from lattice import LatticeGrid, forward_backward  # noqa: E402
from numerics import Parameter, Tensor, affine, log_sigmoid, log_softmax, recurrent_step, total  # noqa: E402


def _rate(f, n):
    f()  # warmup
    t_start = time.perf_counter()
    for _ in range(n):
        f()
    t_diff = time.perf_counter() - t_start
    return n / t_diff


def affine_kernel(rng, batch=16, d_in=32, d_out=32):
    x = Tensor(rng.standard_normal((batch, d_in)))
    W = Parameter("W", rng.standard_normal((d_out, d_in)))
    b = Parameter("b", rng.standard_normal(d_out))

    def run():
        total(affine(x, W, b)).backward()

    return run


def lstm_kernel(rng, batch=16, d_in=16, hidden=16):
    x = Tensor(rng.standard_normal((batch, d_in)))
    cell = (
        Parameter("W_ih", 0.1 * rng.standard_normal((4 * hidden, d_in))),
        Parameter("W_hh", 0.1 * rng.standard_normal((4 * hidden, hidden))),
        Parameter("b", np.zeros(4 * hidden)),
    )
    state = (np.zeros((batch, hidden)), np.zeros((batch, hidden)))

    def run():
        _, h = recurrent_step(state, x, cell)
        total(h).backward()

    return run


def lattice_kernel(rng, T=40, U=12, V=30):
    blank_logits = rng.standard_normal((T, U + 1))
    label_logits = rng.standard_normal((T, U, V))
    label = log_sigmoid(Tensor(-blank_logits[:, :U])).values + log_softmax(Tensor(label_logits)).values[..., 0]
    grid = LatticeGrid(log_sigmoid(Tensor(blank_logits)), Tensor(label))

    def run():
        forward_backward(grid)

    return run


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--affine", action="store_true")
    parser.add_argument("--lstm", action="store_true")
    parser.add_argument("--lattice", action="store_true")
    parser.add_argument("-n", type=int, default=100, help="Iterations per kernel.")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    if args.affine:
        print(f"{_rate(affine_kernel(rng), args.n):,.1f} affine forward+backward per second.")
    if args.lstm:
        print(f"{_rate(lstm_kernel(rng), args.n):,.1f} LSTM steps (forward+backward) per second.")
    if args.lattice:
        print(f"{_rate(lattice_kernel(rng), args.n):,.1f} 40x12 lattice forward-backward passes per second.")


if __name__ == "__main__":
    main()
