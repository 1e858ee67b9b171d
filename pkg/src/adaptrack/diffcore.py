"""反向模式自动微分基础设施

numpy 上的稠密张量、线性层、带加性掩码的多头注意力、softmax、正弦位置编码，
以及有限差分梯度检查。仓库里所有损失都建立在这里。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# 掩码位置加到 logits 上的值
MASK_VALUE = -1e30


class ShapeError(Exception):
    """张量维度不匹配"""
    pass


class GradCheckError(Exception):
    """梯度检查输入无效"""
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """64 位浮点稠密张量，可选记录梯度"""

    __slots__ = ("data", "grad", "requires_grad", "ctx")
    # ndarray 在左侧时交给 Tensor 的反射运算符
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, ctx: Optional[Function] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.ctx = ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # 运算符
    def __neg__(self) -> Tensor:
        return Neg.apply(self)

    def __add__(self, other) -> Tensor:
        return Add.apply(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other) -> Tensor:
        return Mul.apply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other) -> Tensor:
        return Div.apply(as_tensor(other), self)

    def __pow__(self, exponent: float) -> Tensor:
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other) -> Tensor:
        return MatMul.apply(self, as_tensor(other))

    def __getitem__(self, index) -> Tensor:
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def exp(self) -> Tensor:
        return Exp.apply(self)

    def log(self) -> Tensor:
        return Log.apply(self)

    def sqrt(self) -> Tensor:
        return Pow.apply(self, exponent=0.5)

    def relu(self) -> Tensor:
        return Relu.apply(self)

    def abs(self) -> Tensor:
        return Abs.apply(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """反向传播，结束后释放计算图"""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))

        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"非标量张量需要显式梯度: shape={self.shape}")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64)

        for node in reversed(order):
            ctx = node.ctx
            if ctx is None or node.grad is None:
                continue
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not (parent.requires_grad or parent.ctx is not None):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not self:
                node.grad = None
            node.ctx = None


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Function:
    """可微运算：forward 作用在 ndarray 上，backward 返回每个输入的梯度"""

    def __init__(self, *parents: Tensor, **kwargs):
        self.parents = parents
        self.kwargs = kwargs

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = cls(*inputs, **kwargs)
        out = ctx.forward(*[t.data for t in inputs])
        needs_grad = any(t.requires_grad or t.ctx is not None for t in inputs)
        return Tensor(out, ctx=ctx if needs_grad else None)

    def forward(self, *args: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Pow(Function):
    def forward(self, x):
        self.x = x
        self.p = self.kwargs["exponent"]
        return x ** self.p

    def backward(self, grad):
        if self.p == 0.0:
            return (np.zeros_like(self.x),)
        return (grad * self.p * self.x ** (self.p - 1.0),)


class MatMul(Function):
    def forward(self, x, y):
        if x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
            raise ShapeError(f"matmul 维度不匹配: {x.shape} @ {y.shape}")
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad):
        x, y = self.x, self.y
        if y.ndim == 1:
            gx = np.multiply.outer(grad, y)
            gy = np.tensordot(grad, x, axes=(list(range(grad.ndim)), list(range(x.ndim - 1))))
            return _unbroadcast(gx, x.shape), gy
        if x.ndim == 1:
            gx = np.matmul(grad, np.swapaxes(y, -1, -2))
            gy = np.multiply.outer(x, grad)
            return gx, _unbroadcast(gy, y.shape)
        gx = np.matmul(grad, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), grad)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Abs(Function):
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


class Maximum(Function):
    """逐元素最大值，相等时梯度给第一个输入"""

    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        self.pick_x = x >= y
        return np.where(self.pick_x, x, y)

    def backward(self, grad):
        gx = np.where(self.pick_x, grad, 0.0)
        gy = np.where(self.pick_x, 0.0, grad)
        return _unbroadcast(gx, self.shapes[0]), _unbroadcast(gy, self.shapes[1])


class Minimum(Function):
    """逐元素最小值，相等时梯度给第一个输入"""

    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        self.pick_x = x <= y
        return np.where(self.pick_x, x, y)

    def backward(self, grad):
        gx = np.where(self.pick_x, grad, 0.0)
        gy = np.where(self.pick_x, 0.0, grad)
        return _unbroadcast(gx, self.shapes[0]), _unbroadcast(gy, self.shapes[1])


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.sum(x, axis=self.kwargs["axis"], keepdims=self.kwargs["keepdims"])

    def backward(self, grad):
        axis = self.kwargs["axis"]
        if axis is not None and not self.kwargs["keepdims"]:
            axes = tuple(a % len(self.shape) for a in np.atleast_1d(axis))
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(self.kwargs["shape"])

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x):
        axes = self.kwargs["axes"]
        self.axes = tuple(reversed(range(x.ndim))) if axes is None else axes
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x):
        self.shape = x.shape
        return x[self.kwargs["index"]]

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(out, self.kwargs["index"], grad)
        return (out,)


class Concat(Function):
    def forward(self, *xs):
        axis = self.kwargs["axis"]
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.kwargs["axis"]))


class Stack(Function):
    def forward(self, *xs):
        return np.stack(xs, axis=self.kwargs["axis"])

    def backward(self, grad):
        axis = self.kwargs["axis"]
        return tuple(np.take(grad, i, axis=axis) for i in range(grad.shape[axis]))


class Softmax(Function):
    def forward(self, x):
        axis = self.kwargs["axis"]
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        axis = self.kwargs["axis"]
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x):
        axis = self.kwargs["axis"]
        shifted = x - np.max(x, axis=axis, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.out = shifted - lse
        return self.out

    def backward(self, grad):
        axis = self.kwargs["axis"]
        return (grad - np.exp(self.out) * np.sum(grad, axis=axis, keepdims=True),)


def maximum(x, y) -> Tensor:
    return Maximum.apply(as_tensor(x), as_tensor(y))


def minimum(x, y) -> Tensor:
    return Minimum.apply(as_tensor(x), as_tensor(y))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*[as_tensor(t) for t in tensors], axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack 需要至少一个张量")
    return Stack.apply(*[as_tensor(t) for t in tensors], axis=axis)


def softmax(v, axis: int = -1) -> Tensor:
    """
    数值稳定的 softmax

    Raises:
        ShapeError: 空向量
    """
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax 输入为空")
    return Softmax.apply(v, axis=axis)


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ShapeError("log_softmax 输入为空")
    return LogSoftmax.apply(v, axis=axis)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return x / (x * x).sum(axis=axis, keepdims=True).sqrt()


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """两组向量的余弦相似度矩阵（非微分）"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.linalg.norm(a, axis=-1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return an @ bn.T


# ---------------------------------------------------------------- 模块


class Module:
    """参数容器，按属性名递归收集参数"""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"缺少参数: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"参数 {name} 形状不匹配: {value.shape} vs {p.shape}")
            p.data = value.copy()


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero:
            weight = np.zeros((in_dim, out_dim))
        else:
            bound = 1.0 / np.sqrt(in_dim)
            weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear 输入维度 {x.shape[-1]} != {self.in_dim}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gain + self.shift


@dataclass
class MlpParams:
    """逐层权重和偏置，隐藏层 ReLU，输出层线性"""
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("权重和偏置层数不一致")
        if not self.activations:
            self.activations = ["relu"] * (len(self.weights) - 1) + ["linear"]
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ShapeError(f"MLP 层维度不衔接: {prev.shape} -> {nxt.shape}")

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
        weights, biases = [], []
        for d_in, d_out in zip(dims, dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            weights.append(parameter(rng.uniform(-bound, bound, size=(d_in, d_out))))
            biases.append(parameter(np.zeros(d_out)))
        return cls(weights, biases)


def mlp_forward(x, p: MlpParams) -> Tensor:
    """
    MLP 前向

    Raises:
        ShapeError: 输入维度与第一层不匹配
    """
    h = as_tensor(x)
    if h.shape[-1] != p.weights[0].shape[0]:
        raise ShapeError(f"MLP 输入维度 {h.shape[-1]} != {p.weights[0].shape[0]}")
    for w, b, act in zip(p.weights, p.biases, p.activations):
        h = h @ w + b
        if act == "relu":
            h = h.relu()
    return h


class Mlp(Module):
    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        self.dims = list(dims)
        self.params = MlpParams.init(self.dims, rng)
        self.weights = self.params.weights
        self.biases = self.params.biases

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}layers.{i}.weight", w
            yield f"{prefix}layers.{i}.bias", b

    def __call__(self, x) -> Tensor:
        return mlp_forward(x, self.params)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None,
              return_weights: bool = False):
    """
    缩放点积注意力，mask 中 1 表示屏蔽

    Args:
        q: (..., Tq, dk)
        k: (..., Tk, dk)
        v: (..., Tk, dv)
        mask: (Tq, Tk) 的 {0,1} 矩阵

    Raises:
        ShapeError: 维度不匹配
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention 维度不匹配: q={q.shape} k={k.shape} v={v.shape}")
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) / np.sqrt(q.shape[-1])
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (q.shape[-2], k.shape[-2]):
            raise ShapeError(f"mask 形状 {mask.shape} 与注意力 {(q.shape[-2], k.shape[-2])} 不符")
        scores = scores + Tensor(np.where(mask > 0, MASK_VALUE, 0.0))
    weights = softmax(scores, axis=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_out: bool = False):
        if dim % heads:
            raise ShapeError(f"模型维度 {dim} 不能被头数 {heads} 整除")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero=zero_out)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return x.reshape(n, self.heads, self.dim // self.heads).transpose(1, 0, 2)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
        for name, t in (("query", query), ("key", key), ("value", value)):
            if t.ndim != 2 or t.shape[-1] != self.dim:
                raise ShapeError(f"{name} 形状 {t.shape} 与模型维度 {self.dim} 不符")
        if key.shape[0] != value.shape[0]:
            raise ShapeError("key 与 value 序列长度不同")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        out, weights = attention(q, k, v, mask, return_weights=True)
        self.last_weights = weights.data.copy()
        merged = out.transpose(1, 0, 2).reshape(query.shape[0], self.dim)
        return self.out_proj(merged)


class TransformerEncoderLayer(Module):
    """pre-norm 编码层：自注意力 + 前馈，均带残差"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2,
                 zero_residual: bool = False):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out=zero_residual)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = Mlp([dim, ffn_mult * dim, dim], rng)
        if zero_residual:
            self.ffn.weights[-1].data = np.zeros_like(self.ffn.weights[-1].data)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ffn(self.norm_ffn(x))


def sinusoidal_pe(position: int, dim: int) -> np.ndarray:
    """
    标准正弦位置编码，偶数维 sin、奇数维 cos，底数 10000

    Raises:
        ShapeError: dim 为奇数或 position 为负
    """
    if dim % 2:
        raise ShapeError(f"位置编码维度必须为偶数: {dim}")
    if position < 0:
        raise ShapeError(f"位置必须非负: {position}")
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    pe = np.empty(dim)
    pe[0::2] = np.sin(position * freq)
    pe[1::2] = np.cos(position * freq)
    return pe


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-5) -> GradCheckReport:
    """
    比较反向模式梯度与中心差分

    Args:
        f: 无参函数，每次调用重新构建计算图并返回标量张量
        params: 需要检查的参数
        epsilon: 差分步长，范围 [1e-7, 1e-3]

    Returns:
        GradCheckReport: 最大相对误差 |g-ĝ|/max(1,|g|,|ĝ|)

    Raises:
        GradCheckError: f 非有限或 epsilon 越界
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise GradCheckError(f"epsilon 超出范围: {epsilon}")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
        p.data = np.ascontiguousarray(p.data)

    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise GradCheckError(f"函数值非有限标量: {out.data}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = []
    checked = 0
    for p, g in zip(params, analytic):
        worst = 0.0
        flat = p.data.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = f().item()
            flat[i] = orig - epsilon
            minus = f().item()
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradCheckError("差分过程中函数值非有限")
            numeric = (plus - minus) / (2.0 * epsilon)
            err = abs(g_flat[i] - numeric) / max(1.0, abs(g_flat[i]), abs(numeric))
            worst = max(worst, err)
            checked += 1
        per_param.append(worst)
        p.grad = None

    report = GradCheckReport(max(per_param, default=0.0), per_param, checked)
    logger.debug(f"梯度检查: {checked} 个坐标, 最大相对误差 {report.max_rel_error:.3e}")
    return report
