"""A small float64 layer kernel with hand-written backward passes.

Layers keep whatever they need from ``forward`` to run ``backward``; a
``backward`` call accumulates into ``Param.grad`` and returns the gradient with
respect to the layer input. Batched tensors are plain numpy arrays:
images are ``(B, C, H, W)`` and sequences ``(B, T, D)``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class Param:
    """A trainable tensor together with its gradient and AdamW moments."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# ------------------------------------------------------------------ convolution

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv window {k} with stride {stride}, padding {padding} does not tile size {size}")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """``(B, C, H, W)`` to patch rows ``(B, H', W', kh*kw*C)``, ordered (kh, kw, C)."""
    B, C, H, W = x.shape
    ho = _conv_out(H, kh, stride, padding)
    wo = _conv_out(W, kw, stride, padding)
    xt = np.ascontiguousarray(_pad(x, padding).transpose(0, 2, 3, 1))
    if kh == kw == 1:
        return xt[:, ::stride, ::stride]
    return np.concatenate([xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
                           for i in range(kh) for j in range(kw)], axis=-1)


def _flat_weight(weight: np.ndarray) -> np.ndarray:
    # (co, ci, kh, kw) -> (co, kh*kw*ci) matching _im2col
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, cols: np.ndarray | None = None) -> np.ndarray:
    """2-D cross-correlation. ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``."""
    single = x.ndim == 3
    if single:
        x = x[None]
    C = x.shape[1]
    co, ci, kh, kw = weight.shape
    if ci != C:
        raise ValueError(f"input has {C} channels, kernel expects {ci}")
    if cols is None:
        cols = _im2col(x, kh, kw, stride, padding)
    out = cols @ _flat_weight(weight).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int = 1, padding: int = 0, need_input_grad: bool = True,
                    cols: np.ndarray | None = None):
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv2d`; ``dx`` is None when not needed."""
    single = x.ndim == 3
    if single:
        x, grad = x[None], grad[None]
    B, C, H, W = x.shape
    co, ci, kh, kw = weight.shape
    ho, wo = grad.shape[2:]
    if cols is None:
        cols = _im2col(x, kh, kw, stride, padding)
    g = grad.transpose(0, 2, 3, 1).reshape(-1, co)  # (B*ho*wo, co)
    dw = (g.T @ cols.reshape(-1, cols.shape[-1])).reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
    db = g.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    if stride == 1:
        # full correlation of the output gradient with the flipped kernels
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gp = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        dxp = conv2d(gp, flipped)
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return (dx[0] if single else dx), dw, db
    dcols = (g @ _flat_weight(weight)).reshape(B, ho, wo, kh, kw, C)
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
    return (dx[0] if single else dx), dw, db


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, name: str = "conv"):
        fan_in = c_in * kernel * kernel
        self.weight = Param(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in), f"{name}.weight")
        self.bias = Param(_uniform(rng, (c_out,), fan_in), f"{name}.bias")
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.input_grad = True  # off for a first layer fed raw images

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        self._x = x
        kh, kw = self.weight.value.shape[2:]
        batch = x if x.ndim == 4 else x[None]
        self._cols = _im2col(batch, kh, kw, self.stride, self.padding)
        out = conv2d(batch, self.weight.value, self.bias.value, self.stride, self.padding,
                     cols=self._cols)
        return out if x.ndim == 4 else out[0]

    def backward(self, grad):
        dx, dw, db = conv2d_backward(grad, self._x, self.weight.value, self.stride, self.padding,
                                     self.input_grad, cols=self._cols)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    def __init__(self, pool=(2, 2)):
        self.ph, self.pw = (pool, pool) if isinstance(pool, int) else tuple(pool)

    def forward(self, x, train=False):
        B, C, H, W = x.shape
        ho, wo = H // self.ph, W // self.pw
        if ho < 1 or wo < 1:
            raise ValueError(f"input {H}x{W} smaller than pool {self.ph}x{self.pw}")
        self._in_shape = x.shape
        xc = x[:, :, :ho * self.ph, :wo * self.pw]
        win = xc.reshape(B, C, ho, self.ph, wo, self.pw).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(B, C, ho, wo, self.ph * self.pw)
        self._arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        B, C, H, W = self._in_shape
        ho, wo = grad.shape[2:]
        win = np.zeros((B, C, ho, wo, self.ph * self.pw))
        np.put_along_axis(win, self._arg[..., None], grad[..., None], axis=-1)
        win = win.reshape(B, C, ho, wo, self.ph, self.pw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(self._in_shape)
        dx[:, :, :ho * self.ph, :wo * self.pw] = win.reshape(B, C, ho * self.ph, wo * self.pw)
        return dx


def adaptive_avg_pool_height(x: np.ndarray) -> np.ndarray:
    """Mean over the height axis: ``(..., C, H, W) -> (..., C, 1, W)``."""
    return x.mean(axis=-2, keepdims=True)


class HeightPool(Layer):
    """Average over height and read columns as time steps: ``(B,C,H,W) -> (B,W,C)``."""

    def forward(self, x, train=False):
        self._h = x.shape[2]
        return adaptive_avg_pool_height(x)[:, :, 0, :].transpose(0, 2, 1)

    def backward(self, grad):
        g = grad.transpose(0, 2, 1)[:, :, None, :] / self._h
        return np.repeat(g, self._h, axis=2)


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor (masks stay label-exact)."""

    def __init__(self, factor: int):
        self.f = factor

    def forward(self, x, train=False):
        if self.f == 1:
            return x
        return x.repeat(self.f, axis=2).repeat(self.f, axis=3)

    def backward(self, grad):
        if self.f == 1:
            return grad
        B, C, H, W = grad.shape
        return grad.reshape(B, C, H // self.f, self.f, W // self.f, self.f).sum(axis=(3, 5))


# --------------------------------------------------------------- dense layers

class Linear(Layer):
    """Affine map over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str = "linear"):
        self.weight = Param(_uniform(rng, (d_out, d_in), d_in), f"{name}.weight")
        self.bias = Param(_uniform(rng, (d_out,), d_in), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        d_in = self._x.shape[-1]
        g2 = grad.reshape(-1, grad.shape[-1])
        self.weight.grad += g2.T @ self._x.reshape(-1, d_in)
        self.bias.grad += g2.sum(axis=0)
        return grad @ self.weight.value


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax_backward(grad: np.ndarray, out: np.ndarray, axis: int = -1) -> np.ndarray:
    return grad - np.exp(out) * grad.sum(axis=axis, keepdims=True)


class LogSoftmax(Layer):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x, train=False):
        self._out = log_softmax(x, self.axis)
        return self._out

    def backward(self, grad):
        return log_softmax_backward(grad, self._out, self.axis)


class Dropout(Layer):
    """Inverted dropout driven by its own seeded generator."""

    def __init__(self, p: float, seed: int = 0):
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(seed)
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def dropout(x: np.ndarray, p: float, seed: int, train: bool = True) -> np.ndarray:
    return Dropout(p, seed).forward(x, train)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTM(Layer):
    """Single-direction LSTM over ``(B, T, D)``; gate order input, forget, cell, output."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.h = hidden
        self.w_ih = Param(_uniform(rng, (4 * hidden, d_in), hidden), f"{name}.w_ih")
        self.w_hh = Param(_uniform(rng, (4 * hidden, hidden), hidden), f"{name}.w_hh")
        self.bias = Param(_uniform(rng, (4 * hidden,), hidden), f"{name}.bias")

    def params(self):
        return [self.w_ih, self.w_hh, self.bias]

    def forward(self, x, train=False):
        B, T, _ = x.shape
        h = self.h
        self._x = x
        zx = x @ self.w_ih.value.T + self.bias.value  # (B, T, 4h)
        whh = self.w_hh.value.T
        hs = np.zeros((T + 1, B, h))
        cs = np.zeros((T + 1, B, h))
        gates = np.zeros((T, B, 4 * h))
        for t in range(T):
            z = zx[:, t] + hs[t] @ whh
            a = np.empty_like(z)
            a[:, :2 * h] = _sigmoid(z[:, :2 * h])
            a[:, 2 * h:3 * h] = np.tanh(z[:, 2 * h:3 * h])
            a[:, 3 * h:] = _sigmoid(z[:, 3 * h:])
            cs[t + 1] = a[:, h:2 * h] * cs[t] + a[:, :h] * a[:, 2 * h:3 * h]
            hs[t + 1] = a[:, 3 * h:] * np.tanh(cs[t + 1])
            gates[t] = a
        self._hs, self._cs, self._gates = hs, cs, gates
        return hs[1:].transpose(1, 0, 2)

    def backward(self, grad):
        B, T, _ = self._x.shape
        h = self.h
        hs, cs, gates = self._hs, self._cs, self._gates
        whh = self.w_hh.value
        dz_all = np.zeros((T, B, 4 * h))
        dh_next = np.zeros((B, h))
        dc_next = np.zeros((B, h))
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, g, o = a[:, :h], a[:, h:2 * h], a[:, 2 * h:3 * h], a[:, 3 * h:]
            tc = np.tanh(cs[t + 1])
            dh = grad[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[:, :h] = dc * g * i * (1.0 - i)
            dz[:, h:2 * h] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
            dz[:, 3 * h:] = dh * tc * o * (1.0 - o)
            dh_next = dz @ whh
            dc_next = dc * f
        dz_bt = dz_all.transpose(1, 0, 2)  # (B, T, 4h)
        self.w_ih.grad += dz_bt.reshape(-1, 4 * h).T @ self._x.reshape(B * T, -1)
        self.w_hh.grad += dz_all.reshape(-1, 4 * h).T @ hs[:-1].reshape(-1, h)
        self.bias.grad += dz_all.sum(axis=(0, 1))
        return dz_bt @ self.w_ih.value


class BiLSTM(Layer):
    """Forward and time-reversed LSTMs, outputs concatenated: ``(B,T,D) -> (B,T,2h)``."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, name: str = "bilstm"):
        self.fwd = LSTM(d_in, hidden, rng, f"{name}.fwd")
        self.bwd = LSTM(d_in, hidden, rng, f"{name}.bwd")
        self.h = hidden

    def params(self):
        return self.fwd.params() + self.bwd.params()

    def forward(self, x, train=False):
        of = self.fwd.forward(x, train)
        ob = self.bwd.forward(x[:, ::-1], train)[:, ::-1]
        return np.concatenate([of, ob], axis=-1)

    def backward(self, grad):
        dx = self.fwd.backward(grad[..., :self.h])
        dx = dx + self.bwd.backward(grad[:, ::-1, self.h:])[:, ::-1]
        return dx


def bilstm(seq: np.ndarray, layer: BiLSTM) -> np.ndarray:
    """Run ``layer`` on an unbatched ``(T, D)`` sequence."""
    return layer.forward(seq[None])[0]


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


# ------------------------------------------------------------------- optimizer

def adamw_step(params: Sequence[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Adam moments with weight decay applied directly to the old value."""
    for p in params:
        p.step_count += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * p.grad * p.grad
        m_hat = p.m / (1 - beta1 ** p.step_count)
        v_hat = p.v / (1 - beta2 ** p.step_count)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.value


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ------------------------------------------------------------------ grad check

def grad_check(model: Layer, x: np.ndarray,
               loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               eps: float = 1e-6, include_input: bool = False) -> float:
    """Worst relative disagreement between backprop and central differences.

    ``loss_fn`` maps the model output to ``(loss, d loss / d output)``. For
    each parameter tensor the error is ``|a - n| / max(|a|, |n|, 1e-8)`` with
    vector 2-norms; the maximum over tensors is returned. The model runs in
    inference mode so dropout is inactive.
    """
    x = np.array(x, dtype=DTYPE)
    params = list(model.params())
    for p in params:
        p.zero_grad()
    out = model.forward(x, train=False)
    loss, g = loss_fn(out)
    if not np.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    dx = model.backward(g)

    def f() -> float:
        val, _ = loss_fn(model.forward(x, train=False))
        if not np.isfinite(val):
            raise FloatingPointError("loss is not finite")
        return val

    targets = [(p.value, p.grad.copy()) for p in params]
    if include_input:
        targets.append((x, np.asarray(dx)))
    worst = 0.0
    for arr, analytic in targets:
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        a = np.linalg.norm(analytic)
        n = np.linalg.norm(numeric)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / max(a, n, 1e-8)))
    return worst


# ------------------------------------------------------------------ checkpoint

MAGIC = b"MSCRv1"


def save_checkpoint(path, header: dict, params: Sequence[Param]) -> None:
    """Magic, u64 header length, JSON header, then little-endian f64 blobs."""
    header = dict(header)
    header["params"] = [{"name": p.name, "shape": list(p.shape)} for p in params]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        header = json.loads(data[off:off + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    off += n
    arrays = []
    for spec in header.get("params", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(DTYPE))
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return header, arrays


def assign_params(params: Sequence[Param], arrays: Sequence[np.ndarray]) -> None:
    if len(params) != len(arrays):
        raise CheckpointError(f"checkpoint holds {len(arrays)} tensors, model needs {len(params)}")
    for p, a in zip(params, arrays):
        if p.shape != a.shape:
            raise CheckpointError(f"{p.name}: shape {a.shape} != {p.shape}")
        p.value = a.copy()


@dataclass
class NetConfig:
    """CRNN shape. ``conv_spec`` rows are (out_channels, kernel, stride, pool)
    where pool is an int or an (h, w) pair; a w-pool of 1 keeps the width."""

    conv_spec: list = field(default_factory=lambda: [[16, 3, 1, 2], [32, 3, 1, 2]])
    hidden_size: int = 64
    dropout_p: float = 0.20
    num_classes: int = 2
    seed: int = 42

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
