"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Covers exactly what the networks in this project need: affine layers,
(transposed) convolution, LSTM cells, the usual activations, reductions,
a gradient-reversal node, Adam, and a binary checkpoint format.

Design notes:
  - A Tensor wraps a numpy array plus a gradient slot; ops record their
    parents in construction order and a backward closure.
  - backward() walks an explicit (iterative) reverse topological order, so
    gradient accumulation order is deterministic and reruns are bit-exact.
  - Gradients accumulate (+=) into parents; a tensor used twice sums both
    contributions.
  - float32 is the training dtype; tests build float64 tensors for
    finite-difference comparisons and all ops preserve the input dtype.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "affine",
    "conv2d",
    "conv2d_transpose",
    "lstm_cell",
    "grad_reverse",
    "mse",
    "log_softmax",
    "Adam",
    "adam_update",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """Dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction for fast inference."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _needs_graph(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _needs_graph(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Deterministic: topological order derives from graph construction order,
    so repeated runs produce bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(g, y.shape))

    return _make(x.data + y.data, (x, y), bwd)


def sub(x: Tensor, y: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(-g, y.shape))

    return _make(x.data - y.data, (x, y), bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, _unbroadcast(g * y.data, x.shape))
        _accumulate(y, _unbroadcast(g * x.data, y.shape))

    return _make(x.data * y.data, (x, y), bwd)


def power(x: Tensor, exponent: float) -> Tensor:
    if not np.isscalar(exponent):
        raise TypeError("power supports scalar exponents only")

    def bwd(g):
        _accumulate(x, g * exponent * x.data ** (exponent - 1))

    return _make(x.data ** exponent, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0), (x,), bwd)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = alpha * (np.exp(np.minimum(x.data, 0)) - 1)
    out_data = np.where(x.data > 0, x.data, neg)

    def bwd(g):
        _accumulate(x, g * np.where(x.data > 0, 1.0, neg + alpha))

    return _make(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) computed stably as max(x, 0) + log1p(e^-|x|)
    out_data = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def bwd(g):
        _accumulate(x, g / (1.0 + np.exp(-x.data)))

    return _make(out_data, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where unclipped."""
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _accumulate(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), bwd)


def minimum(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    take_x = x.data <= y.data

    def bwd(g):
        _accumulate(x, _unbroadcast(g * take_x, x.shape))
        _accumulate(y, _unbroadcast(g * ~take_x, y.shape))

    return _make(np.minimum(x.data, y.data), (x, y), bwd)


def maximum(x: Tensor, y: Tensor) -> Tensor:
    take_x = x.data >= y.data

    def bwd(g):
        _accumulate(x, _unbroadcast(g * take_x, x.shape))
        _accumulate(y, _unbroadcast(g * ~take_x, y.shape))

    return _make(np.maximum(x.data, y.data), (x, y), bwd)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, np.broadcast_to(gg, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis] if np.isscalar(axis) else int(np.prod([x.data.shape[a] for a in axis]))

    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / n, x.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, np.broadcast_to(gg / n, x.shape))

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old_shape = x.data.shape

    def bwd(g):
        _accumulate(x, g.reshape(old_shape))

    return _make(x.data.reshape(shape), (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into place."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[index] += g

    return _make(x.data[index].copy(), (x,), bwd)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        for t, start, size in zip(tensors, offsets[:-1], sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(start), int(start + size))
            _accumulate(t, g[tuple(index)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.data.shape} @ {w.data.shape}")

    def bwd(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)

    return _make(x.data @ w.data, (x, w), bwd)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for batched row vectors."""
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ValueError(f"affine shape mismatch: input {x.data.shape} vs weight {weight.data.shape}")

    def bwd(g):
        _accumulate(x, g @ weight.data.T)
        _accumulate(weight, x.data.T @ g)
        _accumulate(bias, g.sum(axis=0))

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# convolution via im2col
# ---------------------------------------------------------------------------

def _extract_cols(x_padded: np.ndarray, kh: int, kw: int, stride: int):
    """(N, C, Hp, Wp) -> (N*Ho*Wo, C*kh*kw) patch matrix and (Ho, Wo)."""
    n, c, hp, wp = x_padded.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def _scatter_cols(cols: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Adjoint of _extract_cols; scatter-add patches back onto the canvas."""
    g = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    h_end = (ho - 1) * stride + 1
    w_end = (wo - 1) * stride + 1
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + h_end : stride, kj : kj + w_end : stride] += g[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation); weight is (C_out, C_in, kh, kw)."""
    n, c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, (ho, wo) = _extract_cols(xp, kh, kw, stride)
    wf = weight.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ wf.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2) + bias.data.reshape(1, c_out, 1, 1)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c_out)
        if weight.requires_grad:
            _accumulate(weight, (g2.T @ cols).reshape(weight.data.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = g2 @ wf
            gxp = _scatter_cols(gcols, n, c_in, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp)

    return _make(out, (x, weight, bias), bwd)


def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 2-D convolution; weight is (C_in, C_out, kh, kw).

    Output spatial size is (in - 1)*stride - 2*padding + kernel + output_padding.
    """
    n, c_in, hi, wi = x.data.shape
    c_in_w, c_out, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d_transpose channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if output_padding >= stride:
        raise ValueError("output_padding must be smaller than stride")
    ho = (hi - 1) * stride - 2 * padding + kh + output_padding
    wo = (wi - 1) * stride - 2 * padding + kw + output_padding
    h_full = (hi - 1) * stride + kh
    w_full = (wi - 1) * stride + kw

    wf = weight.data.reshape(c_in, c_out * kh * kw)
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * hi * wi, c_in)
    cols = x2 @ wf
    canvas = _scatter_cols(cols, n, c_out, max(h_full, ho + padding), max(w_full, wo + padding), kh, kw, stride, hi, wi)
    out = canvas[:, :, padding : padding + ho, padding : padding + wo] + bias.data.reshape(1, c_out, 1, 1)

    def bwd(g):
        gfull = np.zeros((n, c_out, max(h_full, ho + padding), max(w_full, wo + padding)), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols, _ = _extract_cols(gfull, kh, kw, stride)
        if weight.requires_grad:
            _accumulate(weight, (x2.T @ gcols).reshape(weight.data.shape))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = (gcols @ wf.T).reshape(n, hi, wi, c_in).transpose(0, 3, 1, 2)
            _accumulate(x, np.ascontiguousarray(gx))

    return _make(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# recurrent cell, losses, and the gradient-reversal node
# ---------------------------------------------------------------------------

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor):
    """Standard LSTM cell; gate order (input, forget, cell, output).

    w_x is (input_dim, 4H), w_h is (H, 4H), bias is (4H,). Returns (h', c').
    Built from primitive ops, so the backward rule is composed automatically.
    """
    hidden = h.data.shape[-1]
    if w_x.data.shape[1] != 4 * hidden or w_h.data.shape != (hidden, 4 * hidden):
        raise ValueError(
            f"lstm_cell weight shapes {w_x.data.shape}, {w_h.data.shape} do not match hidden size {hidden}"
        )
    gates = add(affine(x, w_x, bias), matmul(h, w_h))
    i_gate = sigmoid(narrow(gates, 1, 0, hidden))
    f_gate = sigmoid(narrow(gates, 1, hidden, hidden))
    g_gate = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o_gate = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_new = add(mul(f_gate, c), mul(i_gate, g_gate))
    h_new = mul(o_gate, tanh(c_new))
    return h_new, c_new


def mse(x: Tensor, y: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"mse shape mismatch: {x.data.shape} vs {y.data.shape}")
    diff = sub(x, y)
    return tensor_mean(mul(diff, diff))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - log_z

    def bwd(g):
        softmax = np.exp(out_data)
        _accumulate(x, g - softmax * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bwd)


def grad_reverse(z: Tensor, lambda_grl: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by
    -lambda_grl exactly (no rounding beyond the single multiply)."""
    if lambda_grl < 0:
        raise ValueError("lambda_grl must be non-negative")

    def bwd(g):
        _accumulate(z, -lambda_grl * g)

    out = _make(z.data, (z,), bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_update(value, grad, m, v, t, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step on plain arrays; returns (new_value, new_m, new_v).

    Bias-corrected first/second moments; at t=1 the step is lr*sign(grad)
    up to eps.
    """
    if value.shape != grad.shape:
        raise ValueError(f"adam shape mismatch: value {value.shape} vs grad {grad.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_value, m, v


class Adam:
    """Adam over a list of parameter Tensors, deterministic in-place updates."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            new_value, self._m[i], self._v[i] = adam_update(
                p.data, p.grad, self._m[i], self._v[i], self.t, self.lr, self.beta1, self.beta2, self.eps
            )
            p.data = new_value.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CKP1"


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Binary archive: magic CKP1, u32 count, then per tensor u32 name length,
    UTF-8 name, u32 rank, u32 dims, f32 data. Little-endian, bit-exact."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"not a CKP1 checkpoint: {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(dims)
            out[name] = data.copy()
    return out
