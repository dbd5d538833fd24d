"""Reverse-mode differentiable kernels on double-precision numpy arrays.

Every kernel takes ``Tensor`` (or ``Parameter``) inputs, computes its forward
value eagerly and, when any input requires a gradient, records a closure that
maps the output gradient to input gradients. ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates into the ``grad``
buffers of the leaves. Leaf buffers are only ever added to; zero them between
optimizer steps with ``Parameter.zero_grad``.

Example::

    from numerics import Parameter, affine, log_softmax

    W = Parameter("proj.W", [[1.0, 2.0], [3.0, 4.0]])
    out = log_softmax(affine([1.0, 1.0], W))
    out[0].backward()
    print(W.grad)

Checkpoints use a small self-describing container: magic bytes, a version
number, a JSON header listing ``name``/``shape``/``offset`` per entry, then the
row-major little-endian float64 payload. Writing the same arrays twice produces
byte-identical files.
"""

import json
import logging
import os
import struct
from contextlib import contextmanager

import numpy as np

log = logging.getLogger(__name__)

CONTAINER_MAGIC = b"JEITNUM\x00"
CONTAINER_VERSION = 1

_grad_enabled = True


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class CheckpointError(ValueError):
    """Container file is malformed, truncated or of an unknown version."""


@contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        name = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{name}, values={self.values!r})"

    def item(self):
        return float(self.values)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf reachable from ``self``.

        Parameters
        ----------
        grad: Optional[array_like]
            Seed gradient. Defaults to ones (i.e. ``d self / d self``).
        """
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad.")

        order = _topological_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None

        seed = np.ones_like(self.values) if grad is None else np.asarray(grad, dtype=np.float64)
        _accumulate(self, seed)

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node.grad)):
                if parent_grad is not None and parent.requires_grad:
                    _accumulate(parent, parent_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter:
    def __init__(self, name, values, trainable=True):
        """Named trainable tensor.

        Parameters
        ----------
        name: str
            Dotted path, e.g. ``"joint.W1"``. Unique within one parameter set.
        values: array_like
            Initial values, copied to float64.
        trainable: bool
            Whether optimizers may update this parameter.
        """
        self.name = name
        self.tensor = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self.trainable = trainable

    @property
    def values(self):
        return self.tensor.values

    @values.setter
    def values(self, val):
        val = np.asarray(val, dtype=np.float64)
        if val.shape != self.tensor.values.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {val.shape} to shape {self.tensor.values.shape}")
        self.tensor.values = val.copy()

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(node, grad):
    if grad.shape != node.values.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {node.values.shape}")
    if node.grad is None:
        node.grad = np.array(grad, dtype=np.float64)
    else:
        node.grad += grad


def as_tensor(x):
    """Coerce ``Tensor``, ``Parameter`` or array-like into a ``Tensor``."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _node(values, parents, backward):
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_node(values, parents, backward):
    """Record a kernel computed outside this module.

    Parameters
    ----------
    values: array_like
        Forward result.
    parents: list
        Inputs (``Tensor``/``Parameter``) the result depends on.
    backward: callable
        ``backward(g) -> list`` of gradients, one per parent (``None`` to skip).
    """
    return _node(np.asarray(values, dtype=np.float64), [as_tensor(p) for p in parents], backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(values, kernel):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{kernel}: input contains NaN or Inf")


###########
# Algebra #
###########
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.values, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _node(a.values * c, (a,), lambda g: (g * c,))


def total(a, axis=None):
    """Sum of elements (optionally along ``axis``)."""
    a = as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.values.sum(axis=axis), (a,), backward)


def affine(x, W, b=None):
    """Dense affine map ``y = W x (+ b)`` over the last axis of ``x``.

    Parameters
    ----------
    x: Tensor
        Shape ``(..., d_in)``.
    W: Parameter
        Shape ``(d_out, d_in)``.
    b: Optional[Parameter]
        Shape ``(d_out,)``.

    Returns
    -------
    Tensor
        Shape ``(..., d_out)``.

    Raises
    ------
    ShapeError
        Inner dimensions disagree.
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim == 0 or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"affine: input {x.shape} has {x.shape[-1] if x.ndim else 0} features, "
            f"weight {W.name or ''}{W.shape} expects {W.shape[1] if W.ndim == 2 else '?'}"
        )
    y = x.values @ W.values.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"affine: bias {b.name or ''}{b.shape} does not match output size {W.shape[0]}")
        y = y + b.values
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.values.reshape(-1, W.shape[1])
        grads = [g @ W.values, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _node(y, parents, backward)


##################
# Nonlinearities #
##################
def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.values)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    """Logistic function, computed as ``exp(-log1p(exp(-x)))`` to stay in (0, 1)."""
    x = as_tensor(x)
    y = np.exp(-np.logaddexp(0.0, -x.values))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x):
    """``log(sigmoid(x))``; finite for any finite input."""
    x = as_tensor(x)
    _check_finite(x.values, "log_sigmoid")
    y = -np.logaddexp(0.0, -x.values)
    return _node(y, (x,), lambda g: (g * np.exp(-np.logaddexp(0.0, x.values)),))


def log_softmax(v, axis=-1):
    """Log-normalize along ``axis`` with a max-shift for overflow safety.

    Raises
    ------
    ShapeError
        ``v`` is empty along ``axis``.
    NonFiniteError
        ``v`` contains NaN or Inf.
    """
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError("log_softmax: empty input")
    _check_finite(v.values, "log_softmax")
    shifted = v.values - v.values.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (v,), backward)


############
# Indexing #
############
def _is_basic_index(index):
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in index)


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.values)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(x.values[index], (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.values for t in tensors], axis=axis),
        tensors,
        lambda g: np.split(g, splits, axis=axis),
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _node(np.stack([t.values for t in tensors], axis=axis), tensors, backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; repeated ids accumulate their gradients.

    Parameters
    ----------
    table: Parameter
        Shape ``(rows, dim)``.
    ids: array_like of int
        Any shape; every id must be in ``[0, rows)``.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.name or ''}")

    def backward(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.values[ids], (table,), backward)


def gather_last(x, ids):
    """Pick one element per row along the last axis: ``out[...] = x[..., ids[...]]``."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: ids shape {ids.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.values, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(picked, (x,), backward)


#############
# Recurrent #
#############
def recurrent_step(state, x, cell):
    """One LSTM step with input/forget/cell/output gates.

    Parameters
    ----------
    state: tuple[Tensor, Tensor]
        ``(h, c)``, each of shape ``(..., hidden)``.
    x: Tensor
        Shape ``(..., d_in)``.
    cell: tuple
        ``(W_ih, W_hh, b)`` with shapes ``(4*hidden, d_in)``, ``(4*hidden, hidden)``,
        ``(4*hidden,)``. Gate order along the first axis is i, f, g, o.

    Returns
    -------
    tuple
        ``((h', c'), h')``.
    """
    h, c = (as_tensor(s) for s in state)
    W_ih, W_hh, b = (as_tensor(p) for p in cell)
    hidden = W_hh.shape[1]
    if W_hh.shape != (4 * hidden, hidden) or h.shape[-1] != hidden or c.shape != h.shape:
        raise ShapeError(
            f"recurrent_step: state {h.shape}/{c.shape} does not match recurrent weight {W_hh.shape}"
        )
    if W_ih.shape[0] != 4 * hidden:
        raise ShapeError(f"recurrent_step: input weight {W_ih.shape} does not match hidden size {hidden}")

    z = add(affine(x, W_ih, b), affine(h, W_hh))
    i = sigmoid(z[..., 0:hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    g = tanh(z[..., 2 * hidden : 3 * hidden])
    o = sigmoid(z[..., 3 * hidden :])
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return (h_next, c_next), h_next


##############
# Validation #
##############
def grad_check(f, params, eps=1e-5, max_coordinates=None, seed=0, floor=1e-8):
    """Compare reverse-mode gradients against central finite differences.

    Parameters
    ----------
    f: callable
        ``f(params) -> Tensor`` returning a scalar.
    params: list[Parameter]
        Parameters to perturb.
    eps: float
        Finite-difference step.
    max_coordinates: Optional[int]
        If set, check a seeded random subset of at most this many coordinates per parameter.
    seed: int
        Seed for coordinate subsampling.
    floor: float
        Denominator floor of the relative error; gradients far below it are compared absolutely.

    Returns
    -------
    float
        Maximum relative error ``|a - n| / max(|a|, |n|, floor)``.

    Raises
    ------
    NonFiniteError
        ``f`` evaluates to a non-finite value.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    for p in params:
        p.zero_grad()
    out = f(params)
    if not np.isfinite(out.values).all():
        raise NonFiniteError("grad_check: f is not finite at params")
    out.backward()
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a_grad in zip(params, analytic):
            flat = p.tensor.values.reshape(-1)
            coords = np.arange(flat.size)
            if max_coordinates is not None and flat.size > max_coordinates:
                coords = np.sort(rng.choice(flat.size, size=max_coordinates, replace=False))
            for k in coords:
                original = flat[k]
                flat[k] = original + eps
                f_plus = f(params).item()
                flat[k] = original - eps
                f_minus = f(params).item()
                flat[k] = original
                numeric = (f_plus - f_minus) / (2 * eps)
                a = a_grad.reshape(-1)[k]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


#############
# Container #
#############
def save_container(path, arrays, meta=None):
    """Atomically write named float64 arrays to ``path``.

    Parameters
    ----------
    path: Union[str, Path]
        Destination file.
    arrays: dict[str, array_like]
        Written in iteration order.
    meta: Optional[dict]
        JSON-serializable metadata stored in the header.
    """
    entries = []
    payload = []
    offset = 0
    for name, values in arrays.items():
        values = np.ascontiguousarray(values, dtype="<f8")
        entries.append({"name": name, "shape": list(values.shape), "offset": offset})
        payload.append(values.tobytes())
        offset += values.nbytes

    header = json.dumps(
        {"version": CONTAINER_VERSION, "entries": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()

    path = str(path)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)
    os.replace(tmp_path, path)
    log.debug("Wrote %d arrays to %s", len(entries), path)


def load_container(path):
    """Read a container written by ``save_container``.

    Returns
    -------
    tuple[dict[str, np.ndarray], dict]
        Arrays in file order, and the metadata dictionary.

    Raises
    ------
    CheckpointError
        Bad magic, unknown version, or truncated payload.
    """
    with open(path, "rb") as f:
        data = f.read()

    prefix = len(CONTAINER_MAGIC)
    if data[:prefix] != CONTAINER_MAGIC:
        raise CheckpointError(f"{path}: not a numerics container")
    try:
        version, header_len = struct.unpack_from("<IQ", data, prefix)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header")
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")

    start = prefix + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start : start + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupted header")
    body = memoryview(data)[start + header_len :]

    arrays = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(body):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body[entry["offset"] : end], dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]
