"""Dense tensors with tape-scoped reverse-mode autodiff.

Operations only record onto a tape while a :class:`GradTape` is active and at
least one input requires a gradient.  Everything else runs as plain numpy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

RMS_EPS = 1e-6
NORM_EPS = 1e-12

_default_dtype = np.float32
_tape_stack: list["GradTape"] = []


class DegenerateEmbeddingError(ValueError):
    """Raised when a vector is too close to zero to normalize."""


class NumericError(ArithmeticError):
    """Raised when an iterative routine fails to converge."""


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Run the enclosed code with 64-bit tensors (used by gradient checks)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Records operations for one backward pass.

    Use as a context manager; the tape is cleared on exit so nothing leaks
    between optimizer steps.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss was not produced from any tensor requiring grad")
        if self._used:
            raise RuntimeError("tape already consumed; open a new GradTape per step")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        # recording order is topological, so a reverse sweep visits each node once
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if p.grad is None:
                    p.grad = pg
                else:
                    p.grad = p.grad + pg


def active_tape() -> GradTape | None:
    return _tape_stack[-1] if _tape_stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that fed ``loss`` and requires grad."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward() called outside an active GradTape")
    tape.backward(loss)


def no_grad() -> contextlib.AbstractContextManager:
    """Suspend recording by pushing a throwaway tape-less scope."""

    @contextlib.contextmanager
    def scope():
        saved = list(_tape_stack)
        _tape_stack.clear()
        try:
            yield
        finally:
            _tape_stack.extend(saved)

    return scope()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data / b.data, (a, b), bw)


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = x.data**exponent
    return _record(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows and keeps relative precision for z << 0
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return _record(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def swiglu(gate, up) -> Tensor:
    """silu(gate) * up, fused."""
    gate, up = as_tensor(gate), as_tensor(up)
    sg = _sigmoid(gate.data)
    act = gate.data * sg

    def bw(g):
        gg = g * up.data * (sg + act * (1.0 - sg)) if gate.requires_grad else None
        gu = g * act if up.requires_grad else None
        return gg, gu

    return _record(act * up.data, (gate, up), bw)


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# ------------------------------------------------------------------ reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# ------------------------------------------------------------------- shapes


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(x.data[index]), (x,), bw)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _record(table.data[ids], (table,), bw)


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """np.matmul semantics; batch dims broadcast and reduce in the gradient."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


def linear(x, weight, wide_accumulate: bool = False) -> Tensor:
    """``x @ weight.T`` for a weight stored as [out, in].

    With ``wide_accumulate`` a 32-bit product is summed in 64-bit and rounded
    once, which makes the result independent of exact-zero input columns
    (dropping them cannot change the rounding).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}")
    w = weight.data
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        return gx, gw

    # the wide path only matters for bit-exact inference; training skips it
    if wide_accumulate and x2.dtype == np.float32 and not (x.requires_grad or weight.requires_grad):
        out = (x2.astype(np.float64) @ w.T.astype(np.float64)).astype(np.float32)
    else:
        out = x2 @ w.T
    out = out.reshape(lead + (w.shape[0],))
    return _record(out, (x, weight), bw)


# ---------------------------------------------------------------- normalizers


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bw)


def logsumexp(x, axis: int = -1) -> Tensor:
    """Stable log-sum-exp; entries equal to -inf contribute nothing."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * e / tot,)

    return _record(out, (x,), bw)


def rms_norm(x, gain, eps: float = RMS_EPS) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"rms_norm gain shape {gain.shape} does not match last extent {x.shape[-1]}")
    d = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    out = xhat * gain.data

    def bw(g):
        gx = ggain = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gy = g * gain.data
            gx = r * (gy - xhat * (gy * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, ggain

    return _record(out, (x, gain), bw)


def l2_normalize(x, eps: float = NORM_EPS) -> Tensor:
    """Scale vectors along the last axis to unit norm.

    Raises DegenerateEmbeddingError when any norm is <= eps.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateEmbeddingError("cannot normalize a (near-)zero vector")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _record(y, (x,), bw)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis (half-split convention)."""
    x = as_tensor(x)
    h = x.shape[-1] // 2

    def forward(a):
        # [a1, a2] -> [a1 cos1 - a2 sin1, a2 cos2 + a1 sin2]
        out = a * cos
        out[..., :h] -= a[..., h:] * sin[..., :h]
        out[..., h:] += a[..., :h] * sin[..., h:]
        return out

    def backward(g):
        # transpose of the forward map
        out = g * cos
        out[..., :h] += g[..., h:] * sin[..., h:]
        out[..., h:] -= g[..., :h] * sin[..., :h]
        return out

    return _record(forward(x.data), (x,), lambda g: (backward(g),))


def attention(q, k, v, bias: np.ndarray, scale: float) -> Tensor:
    """softmax(q k^T * scale + bias) v over the last two axes.

    ``k`` and ``v`` may carry a size-1 axis that broadcasts against the query
    groups (grouped-query attention); their gradients are summed back.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    kt = np.swapaxes(k.data, -1, -2)
    z = (q.data @ kt) * scale + bias
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gp = g @ np.swapaxes(v.data, -1, -2)
        gz = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gz @ k.data if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(gz, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, v.shape) if v.requires_grad else None
        return gq, gk, gv

    return _record(out, (q, k, v), bw)


def where_mask(x, mask: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``mask`` is True by the constant ``fill``."""
    x = as_tensor(x)
    return _record(np.where(mask, fill, x.data).astype(x.data.dtype), (x,), lambda g: (np.where(mask, 0.0, g),))


# ------------------------------------------------------------------------ SVD


def svd_square(m, max_sweeps: int = 100, tol: float = 1e-12):
    """SVD of a small square matrix by one-sided Jacobi rotations.

    Returns ``(U, S, V)`` in float64 with ``m = U @ diag(S) @ V.T`` and S
    sorted nonincreasing.  Columns of U belonging to zero singular values are
    completed to an orthonormal basis.
    """
    a = np.array(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"svd_square expects a square matrix, got {a.shape}")
    n = a.shape[0]
    if n > 128:
        raise ValueError("svd_square is limited to d <= 128")
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.eye(n), np.zeros(n), np.eye(n)
    converged = False
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = a[:, i], a[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if gamma == 0.0 or alpha == 0.0 or beta == 0.0:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, rel)
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, i], a[:, j] = c * ai - s * aj, s * ai + c * aj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if off <= tol:
            converged = True
            break
    if not converged:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sv = np.linalg.norm(a, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, a, v = sv[order], a[:, order], v[:, order]
    u = np.zeros((n, n))
    keep = sv > sv[0] * 1e-14 if sv[0] > 0 else np.zeros(n, bool)
    u[:, keep] = a[:, keep] / sv[keep]
    sv = np.where(keep, sv, 0.0)
    if not keep.all():
        u = _complete_basis(u, keep)
    return u, sv, v


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    n = u.shape[0]
    basis = [u[:, i] for i in range(n) if keep[i]]
    out = u.copy()
    for i in range(n):
        if keep[i]:
            continue
        for e in np.eye(n):
            w = e - sum((b @ e) * b for b in basis) if basis else e.copy()
            nw = np.linalg.norm(w)
            if nw > 1e-8:
                w = w / nw
                basis.append(w)
                out[:, i] = w
                break
    return out


# ----------------------------------------------------------- gradient checking


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    build_loss: Callable[[dict[str, Tensor]], Tensor],
    inputs: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, float]:
    """Compare tape gradients against central differences in 64-bit.

    ``build_loss`` maps named leaf tensors to a scalar loss.  Returns the
    relative error ``|a - n| / max(|a|, |n|, tiny)`` (max-norm) per input.
    """
    with float64_mode():
        arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        with GradTape() as tape:
            loss = build_loss(leaves)
            tape.backward(loss)
        errors = {}
        for name, arr in arrays.items():
            analytic = leaves[name].grad
            if analytic is None:
                analytic = np.zeros_like(arr)

            def f():
                with no_grad():
                    fresh = {k: Tensor(v) for k, v in arrays.items()}
                    return float(build_loss(fresh).data)

            num = numeric_grad(f, arr, h)
            scale = max(np.abs(analytic).max(), np.abs(num).max(), 1e-8)
            errors[name] = float(np.abs(analytic - num).max() / scale)
    return errors
