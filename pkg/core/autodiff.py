"""反向模式自动微分 - numpy 稠密张量，算子记录 vjp 闭包，按逆拓扑序回传梯度"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import LengthMismatch, NonFiniteValue, NonScalarLoss, NotNormalized, ShapeMismatch

Array = np.ndarray
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
PROB_TOL = 1e-9
LOG_FLOOR = 1e-12
P_FLOOR = 1e-300


class Tensor:
    """计算图节点；叶子节点的 requires_grad 决定是否收集梯度"""

    __slots__ = ("data", "requires_grad", "op", "parents", "vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Tensor", ...] = (), vjp: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, op: str, parents: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, vjp=vjp)


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """把广播后的梯度求和回原形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}") from None


# ========== 基础算子 ==========
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-D, got {a.shape}")
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def gelu(a: Tensor) -> Tensor:
    """tanh 近似: 0.5x(1+tanh(√(2/π)(x+0.044715x³)))"""
    x = a.data
    inner = GELU_C * (x + GELU_K * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_K * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return _node(out, "gelu", (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, "softmax", (a,), vjp)


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return _node(np.maximum(a.data, lo), "clamp_min", (a,), lambda g: (g * mask,))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(np.asarray(out), "sum", (a,), vjp)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """逐行取列: out[i] = a[i, index[i]]"""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeMismatch(f"pick: {a.shape} with {idx.shape} indices")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], "pick", (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, "concat", tuple(parts), vjp)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ========== 损失 ==========
def _check_simplex(x: Array, name: str) -> None:
    if np.any(x < 0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > PROB_TOL):
        raise NotNormalized(f"{name} is not a probability vector")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Σ p·(log p − log q)，0·log0 = 0，q 在取对数前截断到 1e-12；二维输入按行取均值"""
    if p.shape != q.shape:
        raise LengthMismatch(p.shape[-1] if p.shape else 0, q.shape[-1] if q.shape else 0)
    _check_simplex(p.data, "p")
    _check_simplex(q.data, "q")
    terms = mul(p, sub(log(clamp_min(p, P_FLOOR)), log(clamp_min(q, LOG_FLOOR))))
    if p.data.ndim == 1:
        return sum(terms)
    return mean(sum(terms, axis=-1))


def cross_entropy(probs: Tensor, targets: Sequence[int]) -> Tensor:
    """-mean(log p[target])"""
    return scale(mean(log(clamp_min(pick(probs, targets), LOG_FLOOR))), -1.0)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise LengthMismatch(a.shape[0] if a.shape else 0, b.shape[0] if b.shape else 0)
    d = sub(a, b)
    return mean(mul(d, d))


# ========== 反向传播 ==========
@dataclass
class Graph:
    """从 loss 可达的节点及其拓扑序"""
    nodes: List[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


class Gradients(dict):
    """叶子张量 -> 梯度；未参与计算的叶子得到全零"""

    def of(self, leaf: Tensor) -> Array:
        return self.get(id(leaf), np.zeros_like(leaf.data))


def backward(loss: Tensor) -> Gradients:
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    grads: Dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    leaves = Gradients()
    if not loss.requires_grad:
        return leaves
    for node in reversed(Graph.from_loss(loss).nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            leaves[id(node)] = leaves.get(id(node), 0) + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.requires_grad:
                grads[id(parent)] = grads[id(parent)] + pg if id(parent) in grads else pg
    return leaves


# ========== 有限差分校验 ==========
@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_index: Tuple[int, ...]


def gradcheck(f: Callable[..., Tensor], points: Sequence[Array], h: float = 1e-5,
              tol: float = 1e-4) -> GradcheckReport:
    """backward() 与中心差分逐分量对比；相对误差 |a-n| / max(|a|, |n|, 1e-5)"""
    arrays = [np.array(p, dtype=np.float64) for p in points]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(f(*leaves))

    worst, worst_input, worst_index = 0.0, -1, ()
    for k, (leaf, base) in enumerate(zip(leaves, arrays)):
        g = analytic.of(leaf)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = [Tensor(plus if j == k else arrays[j]) for j in range(len(arrays))]
            args_m = [Tensor(minus if j == k else arrays[j]) for j in range(len(arrays))]
            numeric = (f(*args_p).item() - f(*args_m).item()) / (2.0 * h)
            a = float(g[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            if rel > worst:
                worst, worst_input, worst_index = rel, k, idx
    return GradcheckReport(worst <= tol, worst, worst_input, worst_index)
