"""Minimal dense-tensor reverse-mode autodiff on numpy arrays.

Only the operations the diarization models need are provided. Graphs are
built eagerly; calling ``backward()`` on a scalar loss populates ``grad``
on every reachable tensor created with ``requires_grad=True``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "concat",
    "stack",
    "softmax",
    "Adam",
    "AdamState",
    "grad_check",
    "GradCheckError",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense real tensor with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- backward pass -------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; without ``grad`` it must be scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        # Iterative post-order DFS; recursion would overflow on long BPTT chains.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------------

    @staticmethod
    def _as_tensor(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other))

    def __add__(self, other) -> "Tensor":
        o = Tensor._as_tensor(other)
        out = Tensor._op(self.data + o.data, (self, o), None)

        def backward(g):
            self._accumulate(g)
            o._accumulate(g)

        out._backward = backward if out.requires_grad else None
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        o = Tensor._as_tensor(other)
        out = Tensor._op(self.data * o.data, (self, o), None)

        def backward(g):
            self._accumulate(g * o.data)
            o._accumulate(g * self.data)

        out._backward = backward if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        out = Tensor._op(-self.data, (self,), None)
        out._backward = (lambda g: self._accumulate(-g)) if out.requires_grad else None
        return out

    def __sub__(self, other) -> "Tensor":
        o = Tensor._as_tensor(other)
        out = Tensor._op(self.data - o.data, (self, o), None)

        def backward(g):
            self._accumulate(g)
            o._accumulate(-g)

        out._backward = backward if out.requires_grad else None
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._as_tensor(other) - self

    def __truediv__(self, other) -> "Tensor":
        o = Tensor._as_tensor(other)
        out = Tensor._op(self.data / o.data, (self, o), None)

        def backward(g):
            self._accumulate(g / o.data)
            o._accumulate(-g * self.data / (o.data * o.data))

        out._backward = backward if out.requires_grad else None
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor._op(self.data**p, (self,), None)

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1))

        out._backward = backward if out.requires_grad else None
        return out

    def __matmul__(self, other) -> "Tensor":
        o = Tensor._as_tensor(other)
        a, b = self.data, o.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        out = Tensor._op(a @ b, (self, o), None)

        def backward(g):
            self._accumulate(g @ b.swapaxes(-1, -2))
            o._accumulate(a.swapaxes(-1, -2) @ g)

        out._backward = backward if out.requires_grad else None
        return out

    # -- elementwise nonlinearities ---------------------------------------------

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        out = Tensor._op(e, (self,), None)
        out._backward = (lambda g: self._accumulate(g * e)) if out.requires_grad else None
        return out

    def log(self) -> "Tensor":
        out = Tensor._op(np.log(self.data), (self,), None)
        out._backward = (lambda g: self._accumulate(g / self.data)) if out.requires_grad else None
        return out

    def sqrt(self) -> "Tensor":
        r = np.sqrt(self.data)
        out = Tensor._op(r, (self,), None)

        def backward(g):
            # Subgradient 0 at the origin keeps pooled-std layers finite.
            safe = np.where(r > 0, r, 1.0)
            self._accumulate(np.where(r > 0, g * 0.5 / safe, 0.0))

        out._backward = backward if out.requires_grad else None
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = Tensor._op(t, (self,), None)
        out._backward = (lambda g: self._accumulate(g * (1.0 - t * t))) if out.requires_grad else None
        return out

    def sigmoid(self) -> "Tensor":
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor._op(s, (self,), None)
        out._backward = (lambda g: self._accumulate(g * s * (1.0 - s))) if out.requires_grad else None
        return out

    def relu(self) -> "Tensor":
        mask = self.data > 0
        # np.maximum (unlike np.where on a comparison mask) propagates NaN,
        # so divergence stays visible in the loss.
        out = Tensor._op(np.maximum(self.data, 0.0), (self,), None)
        out._backward = (lambda g: self._accumulate(g * mask)) if out.requires_grad else None
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values; gradient is passed through only inside the range."""
        mask = (self.data >= lo) & (self.data <= hi)
        out = Tensor._op(np.clip(self.data, lo, hi), (self,), None)
        out._backward = (lambda g: self._accumulate(g * mask)) if out.requires_grad else None
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape))
                return
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
            self._accumulate(np.broadcast_to(g, shape))

        out = Tensor._op(np.asarray(out_data), (self,), None)
        out._backward = backward if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor._op(self.data.reshape(shape), (self,), None)
        out._backward = (lambda g: self._accumulate(g.reshape(old))) if out.requires_grad else None
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out = Tensor._op(self.data.swapaxes(a, b), (self,), None)
        out._backward = (lambda g: self._accumulate(g.swapaxes(a, b))) if out.requires_grad else None
        return out

    def moveaxis(self, src: int, dst: int) -> "Tensor":
        out = Tensor._op(np.moveaxis(self.data, src, dst), (self,), None)
        out._backward = (
            (lambda g: self._accumulate(np.moveaxis(g, dst, src))) if out.requires_grad else None
        )
        return out

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        out = Tensor._op(np.broadcast_to(self.data, shape).copy(), (self,), None)
        out._backward = (lambda g: self._accumulate(g)) if out.requires_grad else None
        return out

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            full[idx] += g
            self._accumulate(full)

        out = Tensor._op(np.asarray(out_data), (self,), None)
        out._backward = backward if out.requires_grad else None
        return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis`` with exact gradient routing."""
    tensors = [Tensor._as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(a), int(b))
            t._accumulate(g[tuple(sl)])

    out = Tensor._op(data, tensors, None)
    out._backward = backward if out.requires_grad else None
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = Tensor._as_tensor(t)
        new_shape = list(t.data.shape)
        new_shape.insert(axis if axis >= 0 else axis + t.data.ndim + 1, 1)
        expanded.append(t.reshape(tuple(new_shape)))
    return concat(expanded, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is treated as a constant."""
    shift = x - np.max(x.data, axis=axis, keepdims=True)
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


# -- optimizer -------------------------------------------------------------------


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


class Adam:
    """Bias-corrected Adam over an explicit parameter list."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.state = AdamState(self.params, lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st.step_count += 1
        b1c = 1.0 - st.beta1**st.step_count
        b2c = 1.0 - st.beta2**st.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * (g * g)
            m_hat = st.m[i] / b1c
            v_hat = st.v[i] / b2c
            p.data -= (st.lr * m_hat / (np.sqrt(v_hat) + st.eps)).astype(p.data.dtype)


# -- gradient checking ---------------------------------------------------------


class GradCheckError(RuntimeError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``params`` is a dict or list of tensors that ``f`` closes over. When
    ``sample`` is given, at most that many coordinates per tensor are probed
    (seeded through ``rng``); otherwise every coordinate is checked. Returns
    the maximum relative error; the denominator is floored at 1e-5 times the
    largest analytic gradient so coordinates with structurally-tiny gradients
    (e.g. saturated softmax tails) are judged against the problem's scale
    rather than against finite-difference roundoff noise.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for t in tensors:
        t.grad = None
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise GradCheckError("grad_check needs a finite scalar objective")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    grad_scale = max((float(np.max(np.abs(a))) for a in analytic if a.size), default=0.0)
    floor = 1e-5 * max(1.0, grad_scale)

    max_err = 0.0
    for t, an in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        if sample is not None and flat.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=sample, replace=False)
        else:
            idxs = range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError("objective became non-finite during perturbation")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(float(an_flat[i])), floor)
            err = abs(numeric - float(an_flat[i])) / denom
            if err > max_err:
                max_err = err
    return max_err
