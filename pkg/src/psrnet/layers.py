"""Neural building blocks on top of :mod:`psrnet.autograd`.

Functional forms (``conv2d``, ``pixel_shuffle``, ``n2_normalize`` ...) are
pure functions of their inputs.  The ``Module`` subclasses only hold
parameters and call the functional forms, in the spirit of ``torch.nn``.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

N2_EPS = 1e-9
BCE_CLAMP = 1e-7


# -- parameter containers ----------------------------------------------------------

class Module:
    """Walks attributes to find parameters, buffers and child modules."""

    training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, module in self.named_modules():
            for name in getattr(module, "_buffers", ()):
                yield prefix + name, getattr(module, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise ShapeError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data[...] = value
        for prefix, module in self.named_modules():
            for name in getattr(module, "_buffers", ()):
                setattr(module, name, np.array(state[prefix + name], dtype=np.float64))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in) if fan_in else 0.0
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# -- convolutions --------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    """``[B, C, Hp, Wp] -> [C*kh*kw, B*Ho*Wo]`` patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    B, C = xp.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {H}x{W} with padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, Ho, Wo)
    out = weight.data.reshape(O, C * kh * kw) @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        if x.requires_grad:
            # full correlation of the (dilated) output gradient with the flipped kernel
            Hd, Wd = (Ho - 1) * s + 1, (Wo - 1) * s + 1
            Hp, Wp = H + 2 * p, W + 2 * p
            gd = np.zeros((B, O, Hp + kh - 1, Wp + kw - 1))
            gd[:, :, kh - 1:kh - 1 + Hd:s, kw - 1:kw - 1 + Wd:s] = g
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
            inner = gd[:, :, p:p + H + kh - 1, p:p + W + kw - 1]
            gx = (flipped @ _im2col(inner, kh, kw, 1, H, W)).reshape(C, B, H, W)
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(O, C, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor.from_op(out, parents, bw, "conv2d")


def conv3d_temporal(x: Tensor, weight: Tensor, bias: Tensor | None, stride_t: int) -> Tensor:
    """3-D convolution whose temporal kernel equals its temporal stride.

    ``x`` is ``[B, C_in, T, H, W]`` and ``weight`` is
    ``[C_out, C_in, stride_t, k, k]`` with odd ``k``; space is zero padded so
    the output is ``[B, C_out, T // stride_t, H, W]``.  Non-overlapping
    temporal windows let the op fold time into channels and reuse conv2d.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    B, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv3d channel mismatch: input has {C}, weight expects {Cw}")
    if kt != stride_t:
        raise ShapeError(f"temporal kernel {kt} must equal stride {stride_t}")
    if T % stride_t:
        raise ShapeError(f"T={T} is not divisible by temporal stride {stride_t}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError("spatial kernel must be square with odd size")
    L = T // stride_t
    folded = x.reshape(B, C, L, kt, H, W).transpose(0, 2, 1, 3, 4, 5).reshape(B * L, C * kt, H, W)
    y = conv2d(folded, weight.reshape(O, C * kt, kh, kw), bias, padding=kh // 2)
    return y.reshape(B, L, O, H, W).transpose(0, 2, 1, 3, 4)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        self.weight = _param(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3dTemporal(Module):
    def __init__(self, c_in: int, c_out: int, stride_t: int, rng: np.random.Generator, k: int = 3):
        fan_in = c_in * stride_t * k * k
        self.weight = _param(rng, (c_out, c_in, stride_t, k, k), fan_in)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride_t = stride_t

    def forward(self, x: Tensor) -> Tensor:
        return conv3d_temporal(x, self.weight, self.bias, self.stride_t)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _param(rng, (d_in, d_out), d_in)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


# -- normalization ------------------------------------------------------------------

class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm2d(x, self, self.training)


def batch_norm2d(x: Tensor, p: BatchNorm2d, training: bool) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batch norm over {p.gamma.shape[0]} channels got input {x.shape}")
    C = x.shape[1]
    gamma = p.gamma.reshape(1, C, 1, 1)
    beta = p.beta.reshape(1, C, 1, 1)
    if training:
        mu = x.mean(axes=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axes=(0, 2, 3), keepdims=True)
        xhat = xc * ag.power(var + p.eps, -0.5)
        count = x.size // C
        batch_var = var.data.reshape(C)
        unbiased = batch_var * count / max(count - 1, 1)
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mu.data.reshape(C)
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        rm = p.running_mean.reshape(1, C, 1, 1)
        rv = p.running_var.reshape(1, C, 1, 1)
        xhat = (x - rm) * (1.0 / np.sqrt(rv + p.eps))
    return gamma * xhat + beta


# -- resampling -----------------------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``[B, C*r*r, H, W] -> [B, C, r*H, r*W]`` with
    ``out[b, c, r*h+i, r*w+j] = in[b, c*r*r + i*r + j, h, w]``."""
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ShapeError(f"{Cr} channels are not divisible by r^2={r * r}")
    C = Cr // (r * r)
    return x.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ShapeError(f"spatial dims {Hr}x{Wr} are not divisible by {r}")
    H, W = Hr // r, Wr // r
    return x.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)


def n2_normalize(raw: Tensor, coarse: Tensor, n: int) -> Tensor:
    """Split every coarse cell over its ``n x n`` fine block.

    Weights are ``relu(raw) + 1e-9`` normalized within each block, then
    scaled by the coarse value, so sum-pooling the result by ``n`` gives back
    ``coarse`` and a block with no positive evidence is split evenly.
    """
    raw, coarse = ag.as_tensor(raw), ag.as_tensor(coarse)
    if raw.ndim != 4 or coarse.ndim != 4:
        raise ShapeError("n2_normalize expects [B,C,nH,nW] and [B,C,H,W]")
    B, C, H, W = coarse.shape
    if raw.shape != (B, C, n * H, n * W):
        raise ShapeError(f"raw shape {raw.shape} does not match coarse {coarse.shape} at n={n}")
    w = (ag.relu(raw) + N2_EPS).reshape(B, C, H, n, W, n)
    share = w / w.sum(axes=(3, 5), keepdims=True)
    out = share * coarse.reshape(B, C, H, 1, W, 1)
    return out.reshape(B, C, n * H, n * W)


def sum_pool(x: Tensor, n: int) -> Tensor:
    B, C, Hn, Wn = x.shape
    if Hn % n or Wn % n:
        raise ShapeError(f"spatial dims {Hn}x{Wn} are not divisible by {n}")
    return x.reshape(B, C, Hn // n, n, Wn // n, n).sum(axes=(3, 5))


def upsample_nearest(x: Tensor, n: int) -> Tensor:
    B, C, H, W = x.shape
    ones = np.ones((1, 1, 1, n, 1, n))
    return (x.reshape(B, C, H, 1, W, 1) * ones).reshape(B, C, H * n, W * n)


# -- blocks ------------------------------------------------------------------------------

class ExtractionUnit(Module):
    """Two 5x5 convolutions, each followed by ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 5, rng)
        self.conv2 = Conv2d(c_out, c_out, 5, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(self.conv2(ag.relu(self.conv1(x))))


class DenseBlock(Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> ReLU over the concatenated inputs.

    An optional side input (the temporal feature for this depth) is handled
    by ``merge``: a convolution over the side channels that is added to the
    first convolution's output.  That equals convolving the channel
    concatenation of both, with the weight split in two.  ``merge`` starts
    at zero, so a fresh block ignores the side input until training gives
    it weight.
    """

    def __init__(self, c_in: int, width: int, rng: np.random.Generator, c_side: int = 0):
        self.conv1 = Conv2d(c_in, width, 3, rng)
        self.merge = Conv2d(c_side, width, 3, rng, bias=False) if c_side else None
        if self.merge is not None:
            self.merge.weight.data[...] = 0.0
        self.bn = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng)

    def forward(self, inputs: Sequence[Tensor], side: Tensor | None = None) -> Tensor:
        return dense_block_forward(inputs, self, side)


def dense_block_forward(inputs: Sequence[Tensor], p: DenseBlock, side: Tensor | None = None) -> Tensor:
    sizes = {t.shape[2:] for t in inputs} | ({side.shape[2:]} if side is not None else set())
    if len(sizes) != 1:
        raise ShapeError(f"dense block inputs disagree on spatial size: {sorted(sizes)}")
    x = inputs[0] if len(inputs) == 1 else ag.concat(list(inputs), axis=1)
    h = p.conv1(x)
    if side is not None and p.merge is not None:
        h = h + p.merge(side)
    h = ag.relu(p.bn(h))
    return ag.relu(p.conv2(h))


class ResBlock(Module):
    """Two 3x3 convolutions with an identity skip.

    With ``stride > 1`` the first convolution is strided and the skip path
    subsamples the input on the same grid.
    """

    def __init__(self, channels: int, rng: np.random.Generator, stride: int = 1):
        self.conv1 = Conv2d(channels, channels, 3, rng, stride=stride)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(ag.relu(self.conv1(x)))
        skip = x if self.stride == 1 else x[:, :, ::self.stride, ::self.stride]
        return ag.relu(h + skip)


# -- recurrent and embedding --------------------------------------------------------------

class LSTM(Module):
    """Single-layer LSTM; gate order is input, forget, candidate, output."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / np.sqrt(hidden_dim)
        self.w_ih = Tensor(rng.uniform(-bound, bound, (input_dim, 4 * hidden_dim)), requires_grad=True)
        self.w_hh = Tensor(rng.uniform(-bound, bound, (hidden_dim, 4 * hidden_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(4 * hidden_dim), requires_grad=True)

    def forward(self, embeds: Tensor) -> Tensor:
        return lstm_batch(embeds, self)


def lstm_batch(embeds: Tensor, p: LSTM) -> Tensor:
    """Run ``[B, S, E]`` sequences from a zero state; returns ``h_S`` as ``[B, hidden]``."""
    if embeds.ndim != 3 or embeds.shape[2] != p.input_dim:
        raise ShapeError(f"LSTM expects [B, S, {p.input_dim}], got {embeds.shape}")
    B, S, _ = embeds.shape
    if S < 1:
        raise ShapeError("LSTM needs at least one step")
    Hd = p.hidden_dim
    h = Tensor(np.zeros((B, Hd)))
    c = Tensor(np.zeros((B, Hd)))
    for s in range(S):
        z = ag.matmul(embeds[:, s, :], p.w_ih) + ag.matmul(h, p.w_hh) + p.bias
        i = ag.sigmoid(z[:, :Hd])
        f = ag.sigmoid(z[:, Hd:2 * Hd])
        g = ag.tanh(z[:, 2 * Hd:3 * Hd])
        o = ag.sigmoid(z[:, 3 * Hd:])
        c = f * c + i * g
        h = o * ag.tanh(c)
    return h


def lstm_sequence(embeds: Tensor, p: LSTM) -> Tensor:
    """Single sequence ``[S, E]`` -> final hidden state ``[hidden]``."""
    return lstm_batch(embeds.reshape(1, *embeds.shape), p).reshape(p.hidden_dim)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 1.0, (vocab, dim)), requires_grad=True)

    def forward(self, index) -> Tensor:
        return embedding_lookup(self.table, index)


def embedding_lookup(table: Tensor, index) -> Tensor:
    return ag.take_rows(table, index)


# -- losses ---------------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = ag.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    return (d * d).mean()


def bce_loss(pred: Tensor, target) -> Tensor:
    target = ag.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce shapes differ: {pred.shape} vs {target.shape}")
    p = ag.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * ag.log(p) + (1.0 - target) * ag.log(1.0 - p)).mean()


def loss(kind: str, pred: Tensor, target) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "bce":
        return bce_loss(pred, target)
    raise ValueError(f"unknown loss {kind!r}")
