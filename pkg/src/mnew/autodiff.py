"""Reverse-mode autodiff core: float64 tensors, an explicit gradient tape,
and exactly the operations the segmentation network is built from.

Every operation runs eagerly on numpy float64 data.  When a :class:`Tape`
is active and an input requires gradients, the op appends a record to the
tape; :meth:`Tape.backward` replays the records once, newest first, and
accumulates gradients additively wherever a value fans out.  There is no
control-flow capture and no higher-order differentiation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from mnew import backend

__all__ = [
    "Tensor",
    "Parameter",
    "ParameterRegistry",
    "Tape",
    "SGD",
    "PerceptronStack",
    "matmul",
    "add",
    "sub",
    "mul",
    "exp",
    "log",
    "sqrt_safe",
    "relu",
    "sigmoid",
    "reshape",
    "broadcast_to",
    "concat",
    "reduce",
    "gather_rows",
    "shared_perceptron",
    "softmax_cross_entropy",
    "grad_check",
]


class Tensor:
    """A float64 array plus an optional gradient slot.

    ``grad`` is populated by :meth:`Tape.backward` for tensors created with
    ``requires_grad=True`` and accumulates additively across backward passes
    until reset (see :meth:`SGD.zero_grad`).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named learnable tensor. Names are unique within one registry."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class ParameterRegistry:
    """Ordered name -> Parameter map; rejects duplicate names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager around a forward pass; ``backward`` walks the
    record exactly once in reverse execution order.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf.

        ``seed`` defaults to ones of the root's shape (for a scalar loss this
        is the usual 1.0).
        """
        g0 = np.ones_like(root.data) if seed is None else np.asarray(seed, np.float64)
        if g0.shape != root.data.shape:
            raise ValueError(f"seed shape {g0.shape} != root shape {root.data.shape}")
        grads: dict[int, np.ndarray] = {id(root): g0}
        holders: dict[int, Tensor] = {id(root): root}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = inp
        for key, g in grads.items():
            t = holders[key]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
    if not _TAPES or not out.requires_grad:
        return
    _TAPES[-1]._records.append((out, tuple(inputs), backward_fn))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    _record(out, (a, b), backward)
    return out


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.data), x.requires_grad)
    _record(out, (x,), lambda g: (g * out.data,))
    return out


def log(x) -> Tensor:
    """Natural log; the caller guarantees strictly positive input."""
    x = _as_tensor(x)
    out = Tensor(np.log(x.data), x.requires_grad)
    _record(out, (x,), lambda g: (g / x.data,))
    return out


def sqrt_safe(x) -> Tensor:
    """sqrt(max(x, 0)) with the gradient zeroed near zero.

    Used for distances: the forward value is exact, while the unbounded
    derivative at coincident points (d -> 0) is clamped to 0, the
    subgradient choice that keeps padded/self slots inert.
    """
    x = _as_tensor(x)
    out = Tensor(np.sqrt(np.maximum(x.data, 0.0)), x.requires_grad)

    def backward(g):
        ok = out.data > 1e-8
        return (np.where(ok, g / (2.0 * np.where(ok, out.data, 1.0)), 0.0),)

    _record(out, (x,), backward)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), x.requires_grad)
    _record(out, (x,), lambda g: (g * (out.data > 0.0),))
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(out_data, x.requires_grad)
    _record(out, (x,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    _record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy(), x.requires_grad)
    _record(out, (x,), lambda g: (_unbroadcast(g, x.shape),))
    return out


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    _record(out, (a, b), backward)
    return out


def concat(tensors: Sequence, axis: int) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            i != axis % t.ndim and t.shape[i] != ref[i] for i in range(t.ndim)
        ):
            raise ValueError(
                f"concat shape mismatch on axis {axis}: {[t.shape for t in ts]}"
            )
    out = Tensor(
        np.concatenate([t.data for t in ts], axis=axis),
        any(t.requires_grad for t in ts),
    )
    sizes = [t.shape[axis % t.ndim] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    _record(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Index rows of a 2-d tensor: out[..., :] = x[idx[...], :].

    The gradient scatter-adds back into the source rows, so repeated indices
    accumulate.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-d source, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(
            f"gather index out of range [0, {x.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}"
        )
    out = Tensor(x.data[idx], x.requires_grad)
    d = x.shape[1]

    def backward(g):
        return (backend.scatter_add_rows(x.shape[0], idx.ravel(), g.reshape(-1, d)),)

    _record(out, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce(x, axis: int, mode: str, mask=None, empty=None) -> Tensor:
    """Reduce one axis by ``max``, ``mean`` or ``sum``, optionally masked.

    ``mask`` marks the elements that participate; it must match ``x`` along
    the leading dimensions and broadcasts over trailing ones.  ``mean``
    divides by the unmasked count, ``max`` routes its gradient to the first
    (lowest-index) maximal element.  A slice with no unmasked element is an
    error unless ``empty`` supplies a fill value for it.
    """
    x = _as_tensor(x)
    if mode not in ("max", "mean", "sum"):
        raise ValueError(f"unknown reduce mode: {mode!r}")
    axis = axis % x.ndim

    if mask is None:
        return _reduce_dense(x, axis, mode)

    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    mask = mask.astype(bool)
    if mask.ndim > x.ndim or mask.shape != x.shape[: mask.ndim]:
        raise ValueError(
            f"mask shape {mask.shape} does not match leading dims of {x.shape}"
        )
    mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (x.ndim - mask.ndim)), x.shape)
    count = mask.sum(axis=axis)
    if (count == 0).any():
        if empty is None:
            where = tuple(int(v) for v in np.argwhere(count == 0)[0])
            raise ValueError(f"reduce: fully masked slice at output index {where}")
        empty = float(empty)

    if mode == "sum" or mode == "mean":
        total = np.where(mask, x.data, 0.0).sum(axis=axis)
        denom = np.maximum(count, 1)
        out_data = total if mode == "sum" else total / denom
        if empty is not None:
            out_data = np.where(count == 0, empty, out_data)
        out = Tensor(out_data, x.requires_grad)

        def backward(g):
            g = np.where(count == 0, 0.0, g)
            if mode == "mean":
                g = g / denom
            return (np.where(mask, np.expand_dims(g, axis), 0.0),)

        _record(out, (x,), backward)
        return out

    # masked max
    neg = np.where(mask, x.data, -np.inf)
    arg = np.argmax(neg, axis=axis)
    out_data = np.take_along_axis(neg, np.expand_dims(arg, axis), axis).squeeze(axis)
    if empty is not None:
        out_data = np.where(count == 0, empty, out_data)
    out = Tensor(out_data, x.requires_grad)

    def backward(g):
        g = np.where(count == 0, 0.0, g)
        gx = np.zeros(x.shape, dtype=np.float64)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    _record(out, (x,), backward)
    return out


def _reduce_dense(x: Tensor, axis: int, mode: str) -> Tensor:
    n = x.shape[axis]
    if mode == "sum" or mode == "mean":
        out_data = x.data.sum(axis=axis)
        if mode == "mean":
            out_data = out_data / n
        out = Tensor(out_data, x.requires_grad)

        def backward(g):
            scale = 1.0 / n if mode == "mean" else 1.0
            return (np.broadcast_to(np.expand_dims(g * scale, axis), x.shape).copy(),)

        _record(out, (x,), backward)
        return out

    arg = np.argmax(x.data, axis=axis)  # first occurrence: ties go to low index
    out = Tensor(np.max(x.data, axis=axis), x.requires_grad)

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    _record(out, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# network building blocks
# ---------------------------------------------------------------------------


def shared_perceptron(x, weights, bias, activation: str = "relu") -> Tensor:
    """Affine map applied identically over every leading slot, then activation.

    ``x`` is [..., D_in], ``weights`` [D_in, D_out], ``bias`` [D_out].
    ``activation`` is one of ``relu``, ``sigmoid``, ``none``.
    """
    x, w, b = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ValueError(f"bad perceptron shapes: W {w.shape}, b {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"perceptron input width {x.shape[-1]} != weight rows {w.shape[0]}"
        )
    y = add(matmul(x, w), b)
    if activation == "relu":
        return relu(y)
    if activation == "sigmoid":
        return sigmoid(y)
    if activation == "none":
        return y
    raise ValueError(f"unknown activation: {activation!r}")


class PerceptronStack:
    """A stack of shared perceptron layers with a fixed activation plan.

    ``zero_last`` zeroes the final layer so the stack starts out constant
    (used by the sigmoid gates, which then open at 0.5 everywhere).
    """

    def __init__(
        self,
        name: str,
        widths: Sequence[int],
        activations: Sequence[str],
        registry: ParameterRegistry,
        rng: np.random.Generator,
        zero_last: bool = False,
        init_gain: float = 1.0,
    ):
        if len(widths) < 2 or len(activations) != len(widths) - 1:
            raise ValueError(f"bad stack spec: widths {widths}, acts {activations}")
        self.name = name
        self.activations = tuple(activations)
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (din, dout) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if zero_last and last:
                w = np.zeros((din, dout))
            else:
                w = rng.normal(0.0, init_gain * np.sqrt(2.0 / din), size=(din, dout))
            b = np.zeros(dout)
            self.layers.append(
                (
                    registry.register(f"{name}/{i}/W", w),
                    registry.register(f"{name}/{i}/b", b),
                )
            )

    def __call__(self, x) -> Tensor:
        for (w, b), act in zip(self.layers, self.activations):
            x = shared_perceptron(x, w, b, act)
        return x

    def weight_params(self) -> list[Parameter]:
        return [w for w, _ in self.layers]


def softmax_cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Mean over rows of the (optionally class-weighted) negative log
    softmax probability of the true class.  Numerically stabilized by
    max-subtraction.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"bad CE shapes: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(
            f"label out of range [0, {c}): min {labels.min()}, max {labels.max()}"
        )
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(s)
    if class_weights is None:
        w = np.ones(n)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (c,):
            raise ValueError(f"class_weights shape {cw.shape} != ({c},)")
        w = cw[labels]
    rows = np.arange(n)
    out = Tensor(-(w * logp[rows, labels]).sum() / n, logits.requires_grad)

    def backward(g):
        p = e / s
        d = p * w[:, None]
        d[rows, labels] -= w
        return (d * (float(g) / n),)

    _record(out, (logits,), backward)
    return out


# ---------------------------------------------------------------------------
# optimization and gradient checking
# ---------------------------------------------------------------------------


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                continue
            v = self._velocity.get(p.name)
            v = g if v is None else self.momentum * v + g
            self._velocity[p.name] = v
            p.tensor.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], step: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central finite
    differences, element by element over ``params``.

    Returns the maximum relative error with denominator
    max(|analytic|, |numeric|, 1e-8).  ``f`` must be deterministic and is
    re-evaluated forward-only for the difference quotients.
    """
    if step <= 0.0:
        raise ValueError(f"step must be positive, got {step}")
    params = list(params)
    saved = [p.tensor.grad for p in params]
    for p in params:
        p.tensor.grad = None

    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: function value is not finite")
    tape.backward(out)
    analytic = [
        np.zeros_like(p.tensor.data) if p.tensor.grad is None else p.tensor.grad.copy()
        for p in params
    ]

    def value() -> float:
        v = f().item()
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: function value is not finite")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.tensor.data.ravel()
        aflat = a.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)

    for p, g in zip(params, saved):
        p.tensor.grad = g
    return worst
