"""Trainable layers with explicit backward passes (float64 numpy).

Every layer caches what its backward needs during forward, accumulates
parameter gradients into matching *_grad arrays, and returns the input
gradient.  Parameters are initialized from a per-tensor seed stream so
that adding or removing unrelated tensors never shifts another tensor's
initialization.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def tensor_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, tensor name); stable across runs."""
    digest = hashlib.sha256(name.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


class Layer:
    """Base: tracks named parameters and their gradient buffers."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def _register(self, key: str, value: np.ndarray):
        value = np.asarray(value, dtype=np.float64)
        self._params[key] = value
        self._grads[key] = np.zeros_like(value)
        return value

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": v for k, v in self._params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": v for k, v in self._grads.items()}

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)

    def set_parameter(self, key: str, value: np.ndarray):
        prefix = self.name + "."
        if key.startswith(prefix):
            key = key[len(prefix):]
        if key not in self._params:
            raise KeyError(f"{self.name} has no parameter {key!r}")
        if self._params[key].shape != value.shape:
            raise ValueError(f"{self.name}.{key}: shape mismatch {self._params[key].shape} vs {value.shape}")
        self._params[key] = np.asarray(value, dtype=np.float64)
        self._grads[key] = np.zeros_like(self._params[key])


class Linear(Layer):
    """y = x W^T + b for x of shape (T, in_dim)."""

    def __init__(self, name: str, in_dim: int, out_dim: int, seed: int):
        super().__init__(name)
        rng = tensor_rng(seed, f"{name}.weight")
        scale = np.sqrt(1.0 / in_dim)
        self._register("weight", rng.uniform(-scale, scale, size=(out_dim, in_dim)))
        self._register("bias", np.zeros(out_dim))

    @property
    def weight(self):
        return self._params["weight"]

    @property
    def bias(self):
        return self._params["bias"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self._grads["weight"] += dout.T @ self._x
        self._grads["bias"] += dout.sum(axis=0)
        return dout @ self.weight


class Conv1d(Layer):
    """Strided 1-D convolution with ceil-mode same padding.

    Input (L_in, C_in) -> output (ceil(L_in / stride), C_out), so a stack
    of convolutions downsamples by the product of strides exactly.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, stride: int, seed: int):
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = tensor_rng(seed, f"{name}.weight")
        scale = np.sqrt(2.0 / (in_channels * kernel))
        self._register("weight", rng.normal(0.0, scale, size=(out_channels, kernel, in_channels)))
        self._register("bias", np.zeros(out_channels))

    def output_length(self, length: int) -> int:
        return -(-length // self.stride)

    def forward(self, x: np.ndarray) -> np.ndarray:
        length = x.shape[0]
        out_len = self.output_length(length)
        pad_total = max(0, (out_len - 1) * self.stride + self.kernel - length)
        pad_left = pad_total // 2
        pad_right = pad_total - pad_left
        xp = np.pad(x, ((pad_left, pad_right), (0, 0)))
        starts = self.stride * np.arange(out_len)
        idx = starts[:, None] + np.arange(self.kernel)[None, :]
        windows = xp[idx]  # (out_len, kernel, C_in)
        flat = windows.reshape(out_len, -1)
        w_flat = self._params["weight"].reshape(self.out_channels, -1)
        self._cache = (flat, idx, xp.shape[0], pad_left, length)
        return flat @ w_flat.T + self._params["bias"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        flat, idx, padded_len, pad_left, length = self._cache
        w_flat = self._params["weight"].reshape(self.out_channels, -1)
        self._grads["weight"] += (dout.T @ flat).reshape(self._params["weight"].shape)
        self._grads["bias"] += dout.sum(axis=0)
        dflat = dout @ w_flat
        dwindows = dflat.reshape(dout.shape[0], self.kernel, self.in_channels)
        dxp = np.zeros((padded_len, self.in_channels))
        starts = self.stride * np.arange(dout.shape[0])
        for k in range(self.kernel):
            dxp[starts + k] += dwindows[:, k, :]
        return dxp[pad_left : pad_left + length]


class LayerNorm(Layer):
    """Per-position normalization over the feature dimension."""

    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        super().__init__(name)
        self.eps = eps
        self._register("gain", np.ones(dim))
        self._register("bias", np.zeros(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self._params["gain"] + self._params["bias"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        self._grads["gain"] += (dout * xhat).sum(axis=0)
        self._grads["bias"] += dout.sum(axis=0)
        dxhat = dout * self._params["gain"]
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class SelfAttention(Layer):
    """Multi-head scaled dot-product self-attention over (T, F)."""

    def __init__(self, name: str, dim: int, num_heads: int, seed: int):
        super().__init__(name)
        if dim % num_heads != 0:
            raise ValueError(f"{name}: dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.proj_q = Linear(f"{name}.q", dim, dim, seed)
        self.proj_k = Linear(f"{name}.k", dim, dim, seed)
        self.proj_v = Linear(f"{name}.v", dim, dim, seed)
        self.proj_out = Linear(f"{name}.out", dim, dim, seed)
        self._subs = (self.proj_q, self.proj_k, self.proj_v, self.proj_out)

    def parameters(self):
        out = {}
        for sub in self._subs:
            out.update(sub.parameters())
        return out

    def gradients(self):
        out = {}
        for sub in self._subs:
            out.update(sub.gradients())
        return out

    def zero_grad(self):
        for sub in self._subs:
            sub.zero_grad()

    def set_parameter(self, key: str, value):
        for sub in self._subs:
            if key.startswith(sub.name + "."):
                sub.set_parameter(key, value)
                return
        raise KeyError(key)

    def _split(self, x: np.ndarray) -> np.ndarray:
        t = x.shape[0]
        return x.reshape(t, self.num_heads, self.head_dim).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        return x.transpose(1, 0, 2).reshape(-1, self.dim)

    def forward(self, x: np.ndarray) -> np.ndarray:
        q = self._split(self.proj_q.forward(x))  # (H, T, Dh)
        k = self._split(self.proj_k.forward(x))
        v = self._split(self.proj_v.forward(x))
        scores = (q @ k.transpose(0, 2, 1)) * self.scale  # (H, T, T)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        context = attn @ v  # (H, T, Dh)
        self._cache = (q, k, v, attn)
        return self.proj_out.forward(self._merge(context))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        q, k, v, attn = self._cache
        dcontext = self._split(self.proj_out.backward(dout))
        dattn = dcontext @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dcontext
        # softmax backward, rowwise over the key axis
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= self.scale
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q
        dx = self.proj_q.backward(self._merge(dq))
        dx += self.proj_k.backward(self._merge(dk))
        dx += self.proj_v.backward(self._merge(dv))
        return dx


class TransformerBlock(Layer):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, name: str, dim: int, num_heads: int, seed: int, ffn_mult: int = 4):
        super().__init__(name)
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.attn = SelfAttention(f"{name}.attn", dim, num_heads, seed)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.ffn1 = Linear(f"{name}.ffn1", dim, ffn_mult * dim, seed)
        self.ffn2 = Linear(f"{name}.ffn2", ffn_mult * dim, dim, seed)
        self._subs = (self.ln1, self.attn, self.ln2, self.ffn1, self.ffn2)

    def parameters(self):
        out = {}
        for sub in self._subs:
            out.update(sub.parameters())
        return out

    def gradients(self):
        out = {}
        for sub in self._subs:
            out.update(sub.gradients())
        return out

    def zero_grad(self):
        for sub in self._subs:
            sub.zero_grad()

    def set_parameter(self, key: str, value):
        for sub in self._subs:
            if key.startswith(sub.name + "."):
                sub.set_parameter(key, value)
                return
        raise KeyError(key)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x + self.attn.forward(self.ln1.forward(x))
        self._pre_ffn = h
        z = self.ffn1.forward(self.ln2.forward(h))
        self._ffn_pre_act = z
        return h + self.ffn2.forward(gelu(z))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dz = self.ffn2.backward(dout) * gelu_grad(self._ffn_pre_act)
        dh = dout + self.ln2.backward(self.ffn1.backward(dz))
        dx = dh + self.ln1.backward(self.attn.backward(dh))
        return dx


_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional code of shape (length, dim); cached."""
    key = (length, dim)
    cached = _POSITION_CACHE.get(key)
    if cached is None:
        positions = np.arange(length)[:, None].astype(np.float64)
        half = np.arange(0, dim, 2).astype(np.float64)
        rates = np.exp(-np.log(10000.0) * half / dim)
        angles = positions * rates[None, :]
        pe = np.zeros((length, dim))
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles[:, : dim // 2])
        if len(_POSITION_CACHE) > 512:
            _POSITION_CACHE.clear()
        cached = _POSITION_CACHE[key] = pe
    return cached
