"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on a :class:`Tape` as they run (define-by-run).
Every op accepts plain arrays as well as :class:`Var` values; when no input
is traced the op runs eagerly on numpy and returns an ``ndarray``, so the
kinematics, camera and loss code is written once and serves both plain
evaluation and gradient computation.

Example:
    def loss(p):
        return ad.sum(ad.square(p["x"] - 3.0))

    result = evaluate_with_gradients(loss, {"x": np.array([1.0, 2.0])})
    result.grads["x"]  # array([-4., -2.])
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeError

# Rodrigues switches to its series expansion below this angle.
SMALL_ANGLE = 1e-7
# The derivative coefficients cancel catastrophically much earlier.
DERIVATIVE_SERIES_ANGLE = 1e-2

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


@dataclass
class _Node:
    op: str
    value: np.ndarray
    parents: tuple[int | None, ...]
    vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in execution order, so a node's inputs always precede
    it and the reverse pass is a plain walk from the last node to the first.
    A tape belongs to one thread; independent tapes may run concurrently.
    """

    def __init__(self, dtype: type = np.float64, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[_Node] = []
        self.slots: dict[str, int] = {}

    def input(self, name: str, value: Any) -> "Var":
        """Declare a named parameter block."""
        if name in self.slots:
            raise ShapeError(f"input slot '{name}' declared twice")
        arr = np.array(value, dtype=self.dtype)
        var = self._append("input", arr, (), ())
        self.slots[name] = var.index
        return var

    def record(
        self,
        op: str,
        value: np.ndarray,
        inputs: Sequence[Any],
        vjps: Sequence[Callable[[np.ndarray], np.ndarray]],
    ) -> "Var":
        """Append a node. ``vjps[i]`` maps the output adjoint to input ``i``'s."""
        parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
        return self._append(op, np.asarray(value), parents, tuple(vjps))

    def _append(self, op, value, parents, vjps) -> "Var":
        index = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError("non-finite intermediate value", node_index=index, op=op)
        self.nodes.append(_Node(op, value, parents, vjps))
        return Var(self, index, value)

    def gradients(self, output: "Var") -> dict[str, np.ndarray]:
        """Reverse pass from a scalar output to every declared input slot."""
        if output.tape is not self:
            raise ShapeError("output was recorded on a different tape")
        if output.value.size != 1:
            raise ShapeError(f"gradient output must be scalar, got shape {output.value.shape}")

        adjoints: list[np.ndarray | None] = [None] * len(self.nodes)
        adjoints[output.index] = np.ones_like(output.value)
        for index in range(output.index, -1, -1):
            grad = adjoints[index]
            if grad is None:
                continue
            node = self.nodes[index]
            for parent, vjp in zip(node.parents, node.vjps):
                if parent is None:
                    continue
                contribution = vjp(grad)
                if self.check_finite and not np.all(np.isfinite(contribution)):
                    raise NonFiniteError("non-finite adjoint", node_index=index, op=node.op)
                if adjoints[parent] is None:
                    adjoints[parent] = contribution
                else:
                    adjoints[parent] = adjoints[parent] + contribution

        grads = {}
        for name, index in self.slots.items():
            grad = adjoints[index]
            shape = self.nodes[index].value.shape
            grads[name] = np.zeros(shape, dtype=self.dtype) if grad is None else np.reshape(grad, shape)
        return grads


class Var:
    """A traced array living on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    # Make numpy defer mixed ndarray/Var arithmetic to the reflected methods.
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(node={self.index}, shape={self.shape})"

    def __len__(self) -> int:
        return len(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


Array = np.ndarray | Var | float


def value_of(x: Any) -> np.ndarray:
    """The numeric value of a traced or plain input."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ShapeError("operands were recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast adjoint back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _unary(op: str, x, value: np.ndarray, local_grad: Callable[[], np.ndarray]):
    tape = _tape_of(x)
    if tape is None:
        return value
    return tape.record(op, value, (x,), (lambda g: g * local_grad(),))


# --- elementwise arithmetic ---

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "add", out, (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "sub", out, (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "mul", out, (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "div", out, (a, b),
        (
            lambda g: _unbroadcast(g / bv, av.shape),
            lambda g: _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def neg(x):
    tape = _tape_of(x)
    out = -value_of(x)
    if tape is None:
        return out
    return tape.record("neg", out, (x,), (lambda g: -g,))


def square(x):
    xv = value_of(x)
    return _unary("square", x, xv * xv, lambda: 2.0 * xv)


def power(x, exponent: float):
    """``x ** exponent`` for a constant exponent."""
    xv = value_of(x)
    return _unary("power", x, xv ** exponent, lambda: exponent * xv ** (exponent - 1))


def reciprocal(x):
    xv = value_of(x)
    out = 1.0 / xv
    return _unary("reciprocal", x, out, lambda: -out * out)


def sqrt(x):
    xv = value_of(x)
    out = np.sqrt(xv)
    return _unary("sqrt", x, out, lambda: 0.5 / out)


def exp(x):
    out = np.exp(value_of(x))
    return _unary("exp", x, out, lambda: out)


def log(x):
    xv = value_of(x)
    return _unary("log", x, np.log(xv), lambda: 1.0 / xv)


def sin(x):
    xv = value_of(x)
    return _unary("sin", x, np.sin(xv), lambda: np.cos(xv))


def cos(x):
    xv = value_of(x)
    return _unary("cos", x, np.cos(xv), lambda: -np.sin(xv))


def tanh(x):
    out = np.tanh(value_of(x))
    return _unary("tanh", x, out, lambda: 1.0 - out * out)


def gelu(x):
    """GELU, tanh approximation. Smooth everywhere."""
    xv = value_of(x)
    inner = _GELU_C * (xv + _GELU_A * xv ** 3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def local():
        return 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * xv * xv)

    return _unary("gelu", x, out, local)


def clip(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; the adjoint is zero where the clamp is active."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    return _unary("clip", x, out, lambda: ((xv >= lo) & (xv <= hi)).astype(xv.dtype))


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "where", out, (a, b),
        (
            lambda g: _unbroadcast(np.where(mask, g, 0.0), av.shape),
            lambda g: _unbroadcast(np.where(mask, 0.0, g), bv.shape),
        ),
    )


# --- reductions and shape ---

def sum(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return tape.record("sum", out, (x,), (vjp,))


def mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    if axis is None:
        count = xv.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([xv.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    xv = value_of(x)
    out = np.reshape(xv, shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record("reshape", out, (x,), (lambda g: np.reshape(g, xv.shape),))


def transpose(x, axes=None):
    xv = value_of(x)
    out = np.transpose(xv, axes)
    tape = _tape_of(x)
    if tape is None:
        return out
    inverse = None if axes is None else np.argsort(axes)
    return tape.record("transpose", out, (x,), (lambda g: np.transpose(g, inverse),))


def getitem(x, key):
    xv = value_of(x)
    out = xv[key]
    tape = _tape_of(x)
    if tape is None:
        return out

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def vjp(g):
        full = np.zeros_like(xv)
        if basic:
            full[key] = g
        else:
            # repeated fancy indices must accumulate
            np.add.at(full, key, g)
        return full

    return tape.record("getitem", np.array(out), (x,), (vjp,))


def stack(xs: Sequence[Any], axis: int = 0):
    values = [value_of(x) for x in xs]
    out = np.stack(values, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return tape.record("stack", out, tuple(xs), tuple(make(i) for i in range(len(xs))))


def concatenate(xs: Sequence[Any], axis: int = 0):
    values = [value_of(x) for x in xs]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return tape.record("concatenate", out, tuple(xs), tuple(make(i) for i in range(len(xs))))


# --- linear algebra ---

def matmul(a, b):
    """Matrix product of operands with at least two dimensions (batched)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "matmul", out, (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
            lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape),
        ),
    )


def einsum(subscripts: str, a, b):
    """Two-operand ``np.einsum`` with an explicit output (``"ij,bj->bi"``).

    Every index of an operand must appear in the other operand or the output.
    """
    inputs, output = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        missing = set(own) - set(other) - set(output)
        if missing or len(set(own)) != len(own):
            raise ShapeError(f"unsupported einsum subscripts '{subscripts}'")
    av, bv = value_of(a), value_of(b)
    out = np.einsum(subscripts, av, bv, optimize=True)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "einsum", out, (a, b),
        (
            lambda g: np.einsum(f"{output},{sb}->{sa}", g, bv, optimize=True),
            lambda g: np.einsum(f"{output},{sa}->{sb}", g, av, optimize=True),
        ),
    )


def norm(x, axis: int = -1):
    """Euclidean norm along ``axis``; the adjoint at the origin is zero."""
    xv = value_of(x)
    out = np.sqrt(np.sum(xv * xv, axis=axis))
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return np.expand_dims(g / safe * (out > 0.0), axis) * xv

    return tape.record("norm", out, (x,), (vjp,))


def huber(r, delta: float):
    """Huber penalty of a non-negative magnitude ``r``.

    ``r**2 / 2`` for ``r <= delta``, else ``delta * (r - delta / 2)``.
    At the kink the derivative is taken from the quadratic branch.
    """
    rv = value_of(r)
    quad = rv <= delta
    out = np.where(quad, 0.5 * rv * rv, delta * (rv - 0.5 * delta))
    return _unary("huber", r, out, lambda: np.where(quad, rv, delta))


def huber_norm(residual, delta: float):
    """Huber penalty of the Euclidean norm over the last axis.

    Fused so the adjoint stays finite at zero residual: on the quadratic
    branch the gradient of ``|r|**2 / 2`` is ``r`` itself.
    """
    rv = value_of(residual)
    n = np.sqrt(np.sum(rv * rv, axis=-1))
    quad = n <= delta
    out = np.where(quad, 0.5 * n * n, delta * (n - 0.5 * delta))
    tape = _tape_of(residual)
    if tape is None:
        return out

    def vjp(g):
        scale = np.where(quad, 1.0, delta / np.where(quad, 1.0, n))
        return (g * scale)[..., None] * rv

    return tape.record("huber_norm", out, (residual,), (vjp,))


def _skew(v: np.ndarray) -> np.ndarray:
    k = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    k[..., 0, 1] = -v[..., 2]
    k[..., 0, 2] = v[..., 1]
    k[..., 1, 0] = v[..., 2]
    k[..., 1, 2] = -v[..., 0]
    k[..., 2, 0] = -v[..., 1]
    k[..., 2, 1] = v[..., 0]
    return k


def _vee_antisym(m: np.ndarray) -> np.ndarray:
    # <M, skew(e_i)> for i = 0, 1, 2
    return np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def rodrigues(omega):
    """Axis-angle vectors ``(..., 3)`` to rotation matrices ``(..., 3, 3)``.

    ``R = I + A(t) K + B(t) K^2`` with ``K = skew(omega)``, ``t = |omega|``,
    ``A = sin t / t`` and ``B = (1 - cos t) / t^2``.
    """
    w = value_of(omega)
    if w.shape[-1] != 3:
        raise ShapeError(f"axis-angle vectors need a trailing dimension of 3, got {w.shape}")
    theta = np.sqrt(np.sum(w * w, axis=-1))
    th2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    coef_a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe) / (0.5 * safe)
    coef_b = np.where(small, 0.5 - th2 / 24.0, 0.5 * half * half)

    k = _skew(w)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3, dtype=w.dtype), k.shape)
    out = eye + coef_a[..., None, None] * k + coef_b[..., None, None] * k2
    tape = _tape_of(omega)
    if tape is None:
        return out

    def vjp(g):
        series = theta < DERIVATIVE_SERIES_ANGLE
        ts = np.where(series, 1.0, theta)
        s, c = np.sin(ts), np.cos(ts)
        th4 = th2 * th2
        # a = A'(t)/t, b = B'(t)/t
        da = np.where(series, -1.0 / 3.0 + th2 / 30.0 - th4 / 840.0, (ts * c - s) / ts ** 3)
        sh = np.sin(0.5 * ts)
        db = np.where(
            series,
            -1.0 / 12.0 + th2 / 180.0 - th4 / 6720.0,
            (ts * s - 4.0 * sh * sh) / ts ** 4,
        )
        gk = np.sum(g * k, axis=(-1, -2))
        gk2 = np.sum(g * k2, axis=(-1, -2))
        radial = (da * gk + db * gk2)[..., None] * w
        linear = coef_a[..., None] * _vee_antisym(g)
        quadratic = coef_b[..., None] * _vee_antisym(-(g @ k) - (k @ g))
        return radial + linear + quadratic

    return tape.record("rodrigues", out, (omega,), (vjp,))


# --- evaluation ---

@dataclass
class GradientResult:
    """Scalar value plus gradients shaped like each input block."""
    value: float
    grads: dict[str, np.ndarray]
    aux: dict[str, Any] = field(default_factory=dict)


def evaluate_with_gradients(
    program: Callable[[dict[str, Var]], Any],
    inputs: Mapping[str, Any],
    slots: Mapping[str, tuple[int, ...]] | None = None,
    dtype: type = np.float64,
) -> GradientResult:
    """
    Trace ``program`` on a fresh tape and run the reverse pass.

    Args:
        program: Callable receiving the traced input blocks by name. Returns
            a scalar, or ``(scalar, aux)`` where ``aux`` is a dict of extra
            outputs reported untraced.
        inputs: Parameter blocks by name.
        slots: Optional declared shapes; inputs must match them exactly.
        dtype: Floating point type of the tape.

    Returns:
        GradientResult with the forward value and one gradient per block.
    """
    if slots is not None:
        if set(slots) != set(inputs):
            raise ShapeError(f"inputs {sorted(inputs)} do not match slots {sorted(slots)}")
        for name, shape in slots.items():
            if np.shape(inputs[name]) != tuple(shape):
                raise ShapeError(
                    f"input '{name}' has shape {np.shape(inputs[name])}, expected {tuple(shape)}"
                )

    tape = Tape(dtype=dtype)
    traced = {name: tape.input(name, value) for name, value in inputs.items()}
    result = program(traced)
    aux: dict[str, Any] = {}
    if isinstance(result, tuple):
        result, aux = result
        aux = {k: value_of(v) for k, v in aux.items()}

    if not isinstance(result, Var):
        value = np.asarray(result)
        grads = {name: np.zeros(np.shape(v), dtype=tape.dtype) for name, v in traced.items()}
        return GradientResult(float(value), grads, aux)
    if result.tape is not tape:
        raise ShapeError("program returned a value traced on another tape")
    grads = tape.gradients(result)
    return GradientResult(float(result.value.reshape(())), grads, aux)


# order -> (shift, weight) pairs; the derivative is sum(weight * f(x + shift * h)) / h
STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1.0 / 12.0), (1, 8.0 / 12.0), (-1, -8.0 / 12.0), (-2, 1.0 / 12.0)),
}


def finite_difference_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    point: Mapping[str, Any],
    step: float = 1e-6,
    coordinates: Mapping[str, Sequence[int]] | None = None,
    order: int = 2,
) -> dict[str, np.ndarray]:
    """
    Central-difference gradient ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``order=4`` uses the five-point stencil
    ``(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h``, whose
    truncation error falls with ``h**4``.

    Args:
        f: Scalar function of the parameter blocks.
        point: Parameter blocks to differentiate at.
        step: Probe size ``h``.
        coordinates: Optional flat indices to probe per block; entries that
            are not probed are NaN in the result. Default probes everything.
        order: Accuracy order of the stencil, 2 or 4.

    Returns:
        Arrays shaped like each block of ``point``.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    if order not in STENCILS:
        raise ValueError(f"finite-difference order must be one of {sorted(STENCILS)}, got {order}")
    stencil = STENCILS[order]
    base = {name: np.array(value, dtype=np.float64) for name, value in point.items()}
    grads: dict[str, np.ndarray] = {}
    for name, block in base.items():
        flat = block.reshape(-1)
        if coordinates is None:
            probe = range(flat.size)
            grad = np.zeros(flat.size)
        else:
            probe = coordinates.get(name, ())
            grad = np.full(flat.size, np.nan)
        for i in probe:
            original = flat[i]
            total = 0.0
            for shift, weight in stencil:
                flat[i] = original + shift * step
                value = float(f(base))
                if not np.isfinite(value):
                    flat[i] = original
                    raise NonFiniteError(f"function is not finite when probing {name}[{i}]")
                total += weight * value
            flat[i] = original
            grad[i] = total / step
        grads[name] = grad.reshape(block.shape)
    return grads


def relative_error(a: Any, b: Any, floor: float = 1e-3) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
