"""Adam with global gradient-norm clipping over named ``Parameter`` objects."""

import logging

import numpy as np
from numerics import NonFiniteError

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, learning_rate=3e-3, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=5.0):
        """Adaptive-moment optimizer.

        Parameters
        ----------
        learning_rate: float
            Default step size; ``update`` may override it (warmup).
        beta1, beta2: float
            Moment decay rates.
        eps: float
            Denominator floor.
        grad_clip: Optional[float]
            Rescale gradients so their global L2 norm is at most this value.
        """
        if learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {}
        self.v = {}

    def update(self, parameters, learning_rate=None):
        """Apply one step to ``parameters`` (an iterable of ``Parameter``).

        Returns
        -------
        float
            Global gradient norm before clipping.

        Raises
        ------
        NonFiniteError
            Some gradient is NaN or infinite; nothing is updated.
        """
        parameters = list(parameters)
        bad = [p.name for p in parameters if not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradient in {bad}")

        norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in parameters)))
        factor = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            factor = self.grad_clip / norm

        lr = self.learning_rate if learning_rate is None else learning_rate
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p in parameters:
            g = p.grad * factor
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(g)
                self.v[p.name] = np.zeros_like(g)
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if lr:
                p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def to_arrays(self, prefix="adam/"):
        arrays = {f"{prefix}t": np.array(float(self.t))}
        for name in sorted(self.m):
            arrays[f"{prefix}m/{name}"] = self.m[name]
            arrays[f"{prefix}v/{name}"] = self.v[name]
        return arrays

    def load_arrays(self, arrays, prefix="adam/"):
        """Restore moments and step counter written by ``to_arrays``."""
        self.t = int(arrays[f"{prefix}t"])
        self.m, self.v = {}, {}
        for key, value in arrays.items():
            if key.startswith(f"{prefix}m/"):
                self.m[key[len(prefix) + 2 :]] = value.copy()
            elif key.startswith(f"{prefix}v/"):
                self.v[key[len(prefix) + 2 :]] = value.copy()
        return self
