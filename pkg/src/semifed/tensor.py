"""Dense tensor primitives, a reverse-mode tape, and SGD with nesterov momentum.

Tensors are plain numpy arrays; ``tensor()`` is the validating constructor.
Matrix products go through ``np.einsum`` (fixed-order summation) instead of
BLAS so results do not depend on the machine's core count.

Every op exists in two forms behind one name: called on arrays it evaluates
eagerly, called on ``Var`` handles it records onto the owning ``Graph`` tape
for the backward pass.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """Operand values outside an operation's domain (e.g. log of x <= 0)."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar loss, missing gradient, ...)."""


def tensor(values, shape=None, dtype=np.float32) -> np.ndarray:
    """Build a dense tensor from flat row-major values, validating invariants."""
    arr = np.asarray(values, dtype=dtype)
    if shape is not None:
        expected = int(np.prod(shape)) if len(shape) else 1
        if arr.size != expected:
            raise ShapeError(
                f"got {arr.size} values for shape {tuple(shape)} "
                f"(needs {expected})"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor values must be finite")
    return arr


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum keeps the reduction order fixed regardless of BLAS threading
    return np.einsum("ik,kj->ij", a, b)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "inputs", "value", "vjps", "name", "requires_grad")

    def __init__(self, op, inputs, value, vjps, name=None, requires_grad=False):
        self.op = op
        self.inputs = inputs          # node ids, each < this node's id
        self.value = value
        self.vjps = vjps              # one callable (or None) per input
        self.name = name
        self.requires_grad = requires_grad


class Var:
    """Handle to one node of a Graph tape."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.nid].value

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Reverse-mode tape. Nodes are appended in topological order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []

    def _append(self, op, inputs, value, vjps, name=None) -> Var:
        requires = name is not None or any(
            self.nodes[i].requires_grad for i in inputs
        )
        self.nodes.append(_Node(op, inputs, value, vjps, name, requires))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self._append("const", (), np.asarray(value, dtype=self.dtype), ())

    def param(self, name: str, value) -> Var:
        """Tracked leaf; its gradient is reported by backward() under `name`."""
        return self._append(
            "param", (), np.asarray(value, dtype=self.dtype), (), name=name
        )

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every param leaf, by name."""
        if loss.graph is not self:
            raise ContractError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise ContractError(
                f"loss must be scalar, got shape {loss.value.shape}"
            )
        grads: list[np.ndarray | None] = [None] * (loss.nid + 1)
        grads[loss.nid] = np.ones_like(loss.value)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or not node.requires_grad:
                continue
            for inp, vjp in zip(node.inputs, node.vjps):
                if vjp is None or not self.nodes[inp].requires_grad:
                    continue
                contrib = vjp(g)
                if grads[inp] is None:
                    grads[inp] = contrib
                else:
                    grads[inp] = grads[inp] + contrib
        out = {}
        for nid, node in enumerate(self.nodes):
            if node.name is None:
                continue
            g = grads[nid] if nid <= loss.nid else None
            out[node.name] = g if g is not None else np.zeros_like(node.value)
        return out


def backward(graph: Graph, loss: Var) -> dict[str, np.ndarray]:
    return graph.backward(loss)


def _as_var(x, graph: Graph) -> Var:
    if isinstance(x, Var):
        if x.graph is not graph:
            raise ContractError("operands belong to different graphs")
        return x
    return graph.constant(x)


# ---------------------------------------------------------------------------
# primitives (eager on arrays, traced on Vars)
# ---------------------------------------------------------------------------

def matmul(a, b):
    """C[i,j] = sum_t A[i,t] B[t,j] for rank-2 operands."""
    if isinstance(a, Var) or isinstance(b, Var):
        g = (a if isinstance(a, Var) else b).graph
        a, b = _as_var(a, g), _as_var(b, g)
        av, bv = a.value, b.value
        _check_matmul(av, bv)
        return g._append(
            "matmul", (a.nid, b.nid), _mm(av, bv),
            (lambda dy: _mm(dy, bv.T), lambda dy: _mm(av.T, dy)),
        )
    a, b = np.asarray(a), np.asarray(b)
    _check_matmul(a, b)
    return _mm(a, b)


def _check_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")


def _conv_geometry(x, k, stride, padding):
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d needs [N,C,H,W] and [O,C,kh,kw], got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return x, ho, wo


def _conv_forward(x, k, stride, padding):
    x, ho, wo = _conv_geometry(x, k, stride, padding)
    kh, kw = k.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        (x.shape[0], x.shape[1], ho, wo, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    return np.einsum("ncijuv,ocuv->noij", win, k), xp, win


def conv2d(x, k, stride: int = 1, padding: int = 0):
    """Cross-correlation of [N,C,H,W] (or [C,H,W]) with kernels [O,C,kh,kw]."""
    if isinstance(x, Var) or isinstance(k, Var):
        g = (x if isinstance(x, Var) else k).graph
        x, k = _as_var(x, g), _as_var(k, g)
        squeeze = x.value.ndim == 3
        out, xp, win = _conv_forward(x.value, k.value, stride, padding)
        kv = k.value
        kh, kw = kv.shape[2:]
        ho, wo = out.shape[2:]

        def vjp_x(dy):
            if dy.ndim == 3:
                dy = dy[None]
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    t = np.einsum("noij,oc->ncij", dy, kv[:, :, u, v])
                    dxp[:, :, u:u + stride * ho:stride,
                        v:v + stride * wo:stride] += t
            h, w = (xp.shape[2] - 2 * padding, xp.shape[3] - 2 * padding)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
            return dx[0] if squeeze else dx

        def vjp_k(dy):
            if dy.ndim == 3:
                dy = dy[None]
            return np.einsum("noij,ncijuv->ocuv", dy, win)

        return g._append(
            "conv2d", (x.nid, k.nid),
            out[0] if squeeze else out, (vjp_x, vjp_k),
        )
    x, k = np.asarray(x), np.asarray(k)
    squeeze = x.ndim == 3
    out, _, _ = _conv_forward(x, k, stride, padding)
    return out[0] if squeeze else out


def bias_nchw(x, b):
    """Add a per-channel bias [C] across [N,C,H,W] feature maps."""
    if isinstance(x, Var):
        g = x.graph
        b = _as_var(b, g)
        xv, bv = x.value, b.value
        return g._append(
            "bias_nchw", (x.nid, b.nid), xv + bv[:, None, None],
            (lambda dy: dy,
             lambda dy: dy.sum(axis=(0, 2, 3)) if dy.ndim == 4 else dy.sum(axis=(1, 2))),
        )
    return np.asarray(x) + np.asarray(b)[:, None, None]


def relu(x):
    if isinstance(x, Var):
        xv = x.value
        return x.graph._append(
            "relu", (x.nid,), np.maximum(xv, 0),
            (lambda dy: dy * (xv > 0),),
        )
    return np.maximum(np.asarray(x), 0)


def log(x):
    if isinstance(x, Var):
        xv = x.value
        _check_log(xv)
        return x.graph._append("log", (x.nid,), np.log(xv), (lambda dy: dy / xv,))
    x = np.asarray(x)
    _check_log(x)
    return np.log(x)


def _check_log(x):
    if np.any(x <= 0):
        raise DomainError("log requires strictly positive inputs")


def exp(x):
    if isinstance(x, Var):
        out = np.exp(x.value)
        return x.graph._append("exp", (x.nid,), out, (lambda dy: dy * out,))
    return np.exp(np.asarray(x))


def _check_addlike(a, b):
    # exact match, or one operand equals the other's shape minus a leading
    # batch axis; anything else is an error (no silent broadcasting)
    if a.shape == b.shape or a.shape[1:] == b.shape or a.shape == b.shape[1:]:
        return
    raise ShapeError(f"shapes do not conform: {a.shape} vs {b.shape}")


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0).reshape(shape)


def add(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        g = (a if isinstance(a, Var) else b).graph
        a, b = _as_var(a, g), _as_var(b, g)
        av, bv = a.value, b.value
        _check_addlike(av, bv)
        return g._append(
            "add", (a.nid, b.nid), av + bv,
            (lambda dy: _reduce_to(dy, av.shape), lambda dy: _reduce_to(dy, bv.shape)),
        )
    a, b = np.asarray(a), np.asarray(b)
    _check_addlike(a, b)
    return a + b


def sub(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        g = (a if isinstance(a, Var) else b).graph
        a, b = _as_var(a, g), _as_var(b, g)
        av, bv = a.value, b.value
        _check_addlike(av, bv)
        return g._append(
            "sub", (a.nid, b.nid), av - bv,
            (lambda dy: _reduce_to(dy, av.shape), lambda dy: _reduce_to(-dy, bv.shape)),
        )
    a, b = np.asarray(a), np.asarray(b)
    _check_addlike(a, b)
    return a - b


def mul(a, b):
    """Elementwise product (same-shape or leading-batch broadcast)."""
    if isinstance(a, Var) or isinstance(b, Var):
        g = (a if isinstance(a, Var) else b).graph
        a, b = _as_var(a, g), _as_var(b, g)
        av, bv = a.value, b.value
        _check_addlike(av, bv)
        return g._append(
            "mul", (a.nid, b.nid), av * bv,
            (lambda dy: _reduce_to(dy * bv, av.shape),
             lambda dy: _reduce_to(dy * av, bv.shape)),
        )
    a, b = np.asarray(a), np.asarray(b)
    _check_addlike(a, b)
    return a * b


def scale(x, s: float):
    if isinstance(x, Var):
        g = x.graph
        sv = g.dtype.type(s)
        return g._append("scale", (x.nid,), x.value * sv, (lambda dy: dy * sv,))
    return np.asarray(x) * s


def mean(x):
    """Mean over all elements; returns a scalar."""
    if isinstance(x, Var):
        xv = x.value
        n = xv.size
        return x.graph._append(
            "mean", (x.nid,), np.mean(xv),
            (lambda dy: np.full_like(xv, dy / n),),
        )
    return np.mean(np.asarray(x))


def sum_all(x):
    if isinstance(x, Var):
        xv = x.value
        return x.graph._append(
            "sum", (x.nid,), np.sum(xv),
            (lambda dy: np.full_like(xv, dy),),
        )
    return np.sum(np.asarray(x))


def sum_last(x):
    """Sum over the last axis."""
    if isinstance(x, Var):
        xv = x.value
        return x.graph._append(
            "sum_last", (x.nid,), xv.sum(axis=-1),
            (lambda dy: np.broadcast_to(dy[..., None], xv.shape).copy(),),
        )
    return np.asarray(x).sum(axis=-1)


def reshape(x, shape):
    if isinstance(x, Var):
        xv = x.value
        return x.graph._append(
            "reshape", (x.nid,), xv.reshape(shape),
            (lambda dy: dy.reshape(xv.shape),),
        )
    return np.asarray(x).reshape(shape)


def _softmax_forward(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z):
    """Max-shifted softmax over the last axis."""
    if isinstance(z, Var):
        s = _softmax_forward(z.value)
        return z.graph._append(
            "softmax", (z.nid,), s,
            (lambda dy: s * (dy - (dy * s).sum(axis=-1, keepdims=True)),),
        )
    return _softmax_forward(np.asarray(z))


def log_softmax(z):
    if isinstance(z, Var):
        zv = z.value
        m = zv.max(axis=-1, keepdims=True)
        out = zv - (m + np.log(np.exp(zv - m).sum(axis=-1, keepdims=True)))
        return z.graph._append(
            "log_softmax", (z.nid,), out,
            (lambda dy: dy - np.exp(out) * dy.sum(axis=-1, keepdims=True),),
        )
    zv = np.asarray(z)
    m = zv.max(axis=-1, keepdims=True)
    return zv - (m + np.log(np.exp(zv - m).sum(axis=-1, keepdims=True)))


# ---------------------------------------------------------------------------
# parameters and the optimizer
# ---------------------------------------------------------------------------

class ModelParams:
    """Ordered sequence of named parameter tensors (float32)."""

    def __init__(self, items):
        self._items = [(name, np.asarray(arr, dtype=np.float32)) for name, arr in items]

    def items(self):
        return list(self._items)

    def names(self):
        return [name for name, _ in self._items]

    def arrays(self):
        return [arr for _, arr in self._items]

    def get(self, name: str) -> np.ndarray:
        for n, arr in self._items:
            if n == name:
                return arr
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams([(n, a.copy()) for n, a in self._items])

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def count(self) -> int:
        return sum(a.size for _, a in self._items)

    def equal(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


class OptimState:
    """SGD-with-nesterov-momentum state; velocity mirrors parameter shapes.

    Update per step, for each parameter w with gradient g:

        g' = g + l2_coeff * w
        v  = momentum * v + g'
        w  = w - learning_rate * (g' + momentum * v)
    """

    def __init__(self, params: ModelParams, learning_rate: float,
                 momentum: float = 0.0, l2_coeff: float = 0.0):
        if learning_rate < 0:
            raise ContractError("learning_rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ContractError("momentum must be in [0, 1)")
        if l2_coeff < 0:
            raise ContractError("l2_coeff must be nonnegative")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.l2_coeff = l2_coeff
        self.velocity = {n: np.zeros_like(a) for n, a in params}


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray],
             state: OptimState) -> ModelParams:
    """One nesterov-momentum step; returns updated params, mutates velocity."""
    missing = [n for n, _ in params if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for parameters: {missing}")
    out = []
    lr = np.float32(state.learning_rate)
    mom = np.float32(state.momentum)
    l2 = np.float32(state.l2_coeff)
    for name, w in params:
        g = grads[name].astype(np.float32, copy=False)
        if g.shape != w.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {w.shape}"
            )
        geff = g + l2 * w if state.l2_coeff else g
        v = mom * state.velocity[name] + geff
        state.velocity[name] = v
        out.append((name, w - lr * (geff + mom * v)))
    return ModelParams(out)
