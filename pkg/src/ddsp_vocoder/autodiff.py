"""Minimal tape-based reverse-mode automatic differentiation.

Only the primitives needed by the decoder network, the DSP generators and the
spectral loss are provided.  Every primitive computes its forward value with
numpy and, when a :class:`Tape` is active and one of its inputs requires a
gradient, records a vector-Jacobian product on that tape.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> tape.backward(loss)[x]
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import functools
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse
from scipy.special import expit

from .errors import ContractError, DimensionError, InsufficientInputError, NonFiniteGradientError

LOG_FLOOR = 1e-5
LEAKY_SLOPE = 0.2

_dtype = np.float64
_state = threading.local()


def set_precision(bits: int) -> None:
    """Select the global float width (64 for training and gradcheck, 32 for benchmarking)."""
    global _dtype
    if bits == 64:
        _dtype = np.float64
    elif bits == 32:
        _dtype = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits: int):
    previous = 64 if _dtype == np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """An n-dimensional float array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if requires_grad:
            self.data = np.array(data, dtype=_dtype, copy=True)
        else:
            self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of primitives executed while the tape is active.

    A tape is single-use: :meth:`backward` consumes it.  Only one thread may
    write to a given tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self._consumed:
            raise ContractError("tape has already been consumed by backward()")
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every grad-enabled leaf seen on the tape.

        Leaf gradients are also stored on ``leaf.grad``.  Leaves recorded on
        the tape that do not influence the loss receive zeros.
        """
        if self._consumed:
            raise ContractError("tape has already been consumed by backward()")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.is_leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    gi = np.reshape(gi, t.data.shape)
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
                if t.is_leaf:
                    leaves[key] = t
        for _, inputs, _ in self._records:
            for t in inputs:
                if t.is_leaf and t.requires_grad and id(t) not in leaves:
                    leaves[id(t)] = t
        self._records = []
        self._consumed = True
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=leaf.data.dtype)
            result[leaf] = leaf.grad
        return result


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Evaluate primitives without recording, even inside an active tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive and record it if needed.

    ``vjp(g)`` must return one gradient (or None) per input.  Modules outside
    this one use this hook to define fused differentiable operations.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


# ---------------------------------------------------------------- elementwise


def _operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}: only equal shapes or scalar-vs-tensor")
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return record_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return record_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
    )


def sin(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(x, floor)``; the gradient is zero where the floor is active."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    return record_op(np.log(clamped), (x,), lambda g: (np.where(x.data > floor, g / clamped, 0.0),))


def pow_const(x, p: float) -> Tensor:
    x = as_tensor(x)
    y = np.power(x.data, p)
    return record_op(y, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sin": sin,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "pow_const": pow_const,
    "abs": abs_,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    """Leaky ReLU; the derivative at exactly 0 is 1 (positive branch)."""
    x = as_tensor(x)
    mask = x.data >= 0
    scale = np.where(mask, 1.0, slope).astype(x.data.dtype)
    return record_op(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- reductions and reshaping


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record_op(data, tensors, vjp)


def columns(x, start: int, stop: int) -> Tensor:
    """Channel slice ``x[:, start:stop]`` of a frames x channels tensor."""
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record_op(x.data[:, start:stop], (x,), vjp)


def cumsum(x, axis: int = 0) -> Tensor:
    """Inclusive running sum; the adjoint is the reversed running sum."""
    x = as_tensor(x)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return record_op(np.cumsum(x.data, axis=axis), (x,), vjp)


def normalize_rows(x) -> Tensor:
    """Divide every row of a positive frames x channels tensor by its sum."""
    x = as_tensor(x)
    s = x.data.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ContractError("normalize_rows needs strictly positive row sums")
    y = x.data / s

    def vjp(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) / s,)

    return record_op(y, (x,), vjp)


# ---------------------------------------------------------------- interpolation


@functools.lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Sparse (n_out x n_in) linear-interpolation matrix and its transpose.

    Output position ``t`` samples the input at ``t * (n_in - 1) / (n_out - 1)``
    so the first and last samples coincide.
    """
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    left = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - left
    rows = np.repeat(np.arange(n_out), 2)
    cols = np.stack([left, left + 1], axis=1).reshape(-1)
    vals = np.stack([1.0 - frac, frac], axis=1).reshape(-1)
    w = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))
    return w, w.T.tocsr()


def linear_interp(x, out_len: int) -> Tensor:
    """Resample a frames x channels tensor (or a 1-D sequence) along time."""
    x = as_tensor(x)
    n_in = x.shape[0]
    if n_in < 2:
        raise InsufficientInputError(f"linear_interp needs at least 2 frames, got {n_in}")
    if out_len < 1:
        raise ContractError(f"out_len must be >= 1, got {out_len}")
    w, wt = interp_matrix(n_in, int(out_len))
    flat = x.data.reshape(n_in, -1)
    data = np.asarray(w @ flat, dtype=x.data.dtype).reshape((out_len,) + x.shape[1:])

    def vjp(g):
        return (np.asarray(wt @ g.reshape(out_len, -1), dtype=x.data.dtype).reshape(x.shape),)

    return record_op(data, (x,), vjp)


# ---------------------------------------------------------------- network layers


def dense(x, w, b=None) -> Tensor:
    """Per-frame affine map ``x @ w + b`` (a ConvNet layer with filter size 1)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: input shape {x.shape} does not match weight shape {w.shape}")
    out = x.data @ w.data
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense: bias shape {b.shape} does not match weight shape {w.shape}")
        out = out + b.data
        inputs.append(b)

    def vjp(g):
        grads = [g @ w.data.T if x.requires_grad else None, x.data.T @ g if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record_op(out, inputs, vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize every row to zero mean and unit (biased) variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise InsufficientInputError(f"layer_norm needs a non-empty channel axis, got shape {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: input shape {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xc = x.data - x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record_op(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


GRU_KEYS = ("w_x", "w_h", "b_x", "b_h")


def _gru_weights(params: Mapping, n_in: int) -> tuple[Tensor, Tensor, Tensor, Tensor, int]:
    w_x, w_h, b_x, b_h = (as_tensor(params[k]) for k in GRU_KEYS)
    units = w_h.shape[0]
    if (
        w_x.shape != (n_in, 3 * units)
        or w_h.shape != (units, 3 * units)
        or b_x.shape != (3 * units,)
        or b_h.shape != (3 * units,)
    ):
        raise DimensionError(
            f"GRU parameter shapes w_x {w_x.shape}, w_h {w_h.shape}, b_x {b_x.shape}, b_h {b_h.shape} "
            f"do not fit input width {n_in}"
        )
    return w_x, w_h, b_x, b_h, units


def _gru_step(xp, h, w_h, b_h, u):
    """One recurrence step; gates are stacked as [update | reset | candidate]."""
    hp = h @ w_h + b_h
    z = expit(xp[..., :u] + hp[..., :u])
    r = expit(xp[..., u : 2 * u] + hp[..., u : 2 * u])
    hn = hp[..., 2 * u :]
    n = np.tanh(xp[..., 2 * u :] + r * hn)
    return (1.0 - z) * n + z * h, (z, r, n, hn)


def _gru_step_grad(dh, h_prev, cache, u):
    z, r, n, hn = cache
    dn = dh * (1.0 - z) * (1.0 - n * n)
    dz = dh * (h_prev - n) * z * (1.0 - z)
    dr = dn * hn * r * (1.0 - r)
    dxp = np.concatenate([dz, dr, dn], axis=-1)
    dhp = np.concatenate([dz, dr, dn * r], axis=-1)
    return dxp, dhp, dh * z


def gru_cell(x, h, params: Mapping) -> Tensor:
    """Single GRU step on a batch: ``x`` is B x I, ``h`` is B x U.

    ``params`` maps ``w_x`` (I x 3U), ``w_h`` (U x 3U) and the input-side and
    recurrent-side biases ``b_x``, ``b_h`` (3U each).
    """
    x, h = as_tensor(x), as_tensor(h)
    if x.data.ndim != 2 or h.data.ndim != 2 or x.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_cell: input shape {x.shape} and state shape {h.shape} disagree")
    w_x, w_h, b_x, b_h, u = _gru_weights(params, x.shape[1])
    if h.shape[1] != u:
        raise DimensionError(f"gru_cell: state shape {h.shape} does not match {u} units")
    xp = x.data @ w_x.data + b_x.data
    h_new, cache = _gru_step(xp, h.data, w_h.data, b_h.data, u)

    def vjp(g):
        dxp, dhp, dh = _gru_step_grad(g, h.data, cache, u)
        dh = dh + dhp @ w_h.data.T
        return (
            dxp @ w_x.data.T,
            dh,
            x.data.T @ dxp,
            h.data.T @ dhp,
            dxp.sum(axis=0),
            dhp.sum(axis=0),
        )

    return record_op(h_new, (x, h, w_x, w_h, b_x, b_h), vjp)


def gru(x, params: Mapping, h0=None) -> Tensor:
    """Run a GRU left to right over a T x I sequence, returning the T x U states.

    Fused primitive: the input projections are computed for all frames at once
    and backpropagation through time runs inside the adjoint.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"gru expects a frames x channels input, got shape {x.shape}")
    w_x, w_h, b_x, b_h, u = _gru_weights(params, x.shape[1])
    h0 = Tensor(np.zeros(u, dtype=x.data.dtype)) if h0 is None else as_tensor(h0)
    if h0.shape != (u,):
        raise DimensionError(f"gru: initial state shape {h0.shape} does not match {u} units")
    steps = x.shape[0]
    xp = x.data @ w_x.data + b_x.data
    wh, bh = w_h.data, b_h.data
    states = np.empty((steps, u), dtype=x.data.dtype)
    caches = []
    h = h0.data
    for t in range(steps):
        h, cache = _gru_step(xp[t], h, wh, bh, u)
        states[t] = h
        caches.append(cache)

    def vjp(g):
        dxp = np.empty_like(xp)
        dhp = np.empty_like(xp)
        dh = np.zeros(u, dtype=g.dtype)
        wh_t = wh.T
        for t in range(steps - 1, -1, -1):
            h_prev = states[t - 1] if t > 0 else h0.data
            dxp[t], dhp[t], carry = _gru_step_grad(dh + g[t], h_prev, caches[t], u)
            dh = carry + dhp[t] @ wh_t
        prev = np.concatenate([h0.data[None, :], states[:-1]], axis=0)
        return (
            dxp @ w_x.data.T,
            prev.T @ dhp,
            x.data.T @ dxp,
            dxp.sum(axis=0),
            dhp.sum(axis=0),
            dh,
        )

    return record_op(states, (x, w_h, w_x, b_x, b_h, h0), vjp)


# ---------------------------------------------------------------- verification


def _numeric(f: Callable[[], Tensor]) -> float:
    with no_tape():
        return float(np.asarray(f().data, dtype=np.float64).reshape(-1)[0])


def gradcheck_report(
    f: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    step: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> list[dict]:
    """Compare tape gradients of ``f`` with central differences.

    Returns one entry per leaf with the worst relative error and where it
    occurred.  ``f`` takes no arguments and must be deterministic.
    """
    if step <= 0:
        raise ContractError("gradcheck step must be > 0")
    leaves = list(leaves)
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = []
    for n, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data)).reshape(-1)
        size = leaf.data.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        bad = coords[~np.isfinite(analytic[coords])]
        if bad.size:
            label = leaf.name or f"leaf {n}"
            raise NonFiniteGradientError(
                f"non-finite analytic gradient for {label} at index {int(bad[0])}", name=label, index=int(bad[0])
            )
        flat = leaf.data.reshape(-1)
        worst, where = 0.0, None
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = _numeric(f)
            flat[i] = orig - step
            fm = _numeric(f)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst or where is None:
                worst, where = err, (int(i), a, numeric)
        report.append({"name": leaf.name or f"leaf {n}", "max_rel_error": worst, "worst": where, "checked": len(coords)})
    return report


def gradcheck(
    f: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    step: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    report = gradcheck_report(f, leaves, step=step, max_coords=max_coords, seed=seed)
    return max((r["max_rel_error"] for r in report), default=0.0)
