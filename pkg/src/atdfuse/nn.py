"""Transformer building blocks and per-modality encoders."""
from __future__ import annotations

import logging
import math

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

log = logging.getLogger(__name__)

INIT_STD = 0.02


class Module:
    """Parameter container. Any ``Tensor`` attribute with ``requires_grad``
    is a parameter; ``np.ndarray`` attributes are non-trainable buffers."""

    training = True

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._walk(prefix, Tensor):
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def named_buffers(self, prefix=""):
        seen = set()
        for name, b in self._walk(prefix, np.ndarray):
            if id(b) not in seen:
                seen.add(id(b))
                yield name, b

    def _walk(self, prefix, kind):
        for name, value in vars(self).items():
            if isinstance(value, kind):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value._walk(f"{prefix}{name}.", kind)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{name}.{i}.", kind)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self._set_mode(mode, set())
        return self

    def eval(self):
        return self.train(False)

    def _set_mode(self, mode, seen):
        if id(self) in seen:
            return
        seen.add(id(self))
        self.training = mode
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    child._set_mode(mode, seen)


def normal_param(rng, shape, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng):
        self.d_in, self.d_out = d_in, d_out
        self.weight = normal_param(rng, (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last dim {self.d_in}, got shape {x.shape}")
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.eps) * self.gamma + self.beta


def attention(q, k, v, return_weights=False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise DimensionError("attention: d_k must be positive")
    if k.shape[-1] != d_k or q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention: incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention.

    Called with one sequence it is self-attention; ``kv`` supplies keys and
    values from a different sequence for cross-attention.
    """

    def __init__(self, d_model, n_heads, rng):
        if n_heads < 1 or d_model % n_heads:
            raise ContractError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.d_k = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.o_proj = Linear(d_model, d_model, rng)

    def _heads(self, x):
        b, s, _ = x.shape
        return T.transpose(x.reshape(b, s, self.n_heads, self.d_k), (0, 2, 1, 3))

    def __call__(self, x, kv=None, return_weights=False):
        kv = x if kv is None else kv
        if x.ndim != 3 or kv.ndim != 3 or x.shape[0] != kv.shape[0]:
            raise DimensionError(f"attention inputs must be [b, s, d]; got {x.shape} and {kv.shape}")
        b, s, _ = x.shape
        out, w = attention(self._heads(self.q_proj(x)), self._heads(self.k_proj(kv)),
                           self._heads(self.v_proj(kv)), return_weights=True)
        merged = T.transpose(out, (0, 2, 1, 3)).reshape(b, s, self.d_model)
        y = self.o_proj(merged)
        return (y, w) if return_weights else y


class FeedForward(Module):
    def __init__(self, d_model, rng, hidden=None):
        hidden = hidden or 4 * d_model
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, d_model, n_heads, rng):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, rng)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


# -- modality front-ends ----------------------------------------------------
def _pad_to_multiple(arr, axis, step, label):
    n = arr.shape[axis]
    rem = n % step
    if rem == 0:
        return arr
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (0, step - rem)
    log.info("%s length %d not divisible by %d; right-padded with %d zeros",
             label, n, step, step - rem)
    return np.pad(arr, pad)


class SeriesFrontend(Module):
    """Non-overlapping windows of a [b, L] or [b, L, c] series, each projected
    to ``d_model`` plus a learned position embedding."""

    kind = "series"

    def __init__(self, length, window, d_model, rng, channels=1):
        self.length, self.window, self.channels = length, window, channels
        self.n_tokens = -(-length // window)
        self.proj = Linear(window * channels, d_model, rng)
        self.pos = normal_param(rng, (self.n_tokens, d_model))

    def __call__(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 2:
            raw = raw[:, :, None]
        if raw.shape[1:] != (self.length, self.channels):
            raise DimensionError(
                f"series front-end expects [b, {self.length}, {self.channels}], got {raw.shape}")
        raw = _pad_to_multiple(raw, 1, self.window, "series")
        b = raw.shape[0]
        x = Tensor(raw.reshape(b, self.n_tokens, self.window * self.channels))
        return self.proj(x) + self.pos


class ImageFrontend(Module):
    """Flattened non-overlapping p x p patches of a [b, H, W] image."""

    kind = "image2d"

    def __init__(self, height, width, patch, d_model, rng):
        self.height, self.width, self.patch = height, width, patch
        self.grid = (-(-height // patch), -(-width // patch))
        self.n_tokens = self.grid[0] * self.grid[1]
        self.proj = Linear(patch * patch, d_model, rng)
        self.pos = normal_param(rng, (self.n_tokens, d_model))

    def __call__(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[1:] != (self.height, self.width):
            raise DimensionError(
                f"image front-end expects [b, {self.height}, {self.width}], got {raw.shape}")
        raw = _pad_to_multiple(_pad_to_multiple(raw, 1, self.patch, "image height"),
                               2, self.patch, "image width")
        b, p = raw.shape[0], self.patch
        gh, gw = self.grid
        patches = raw.reshape(b, gh, p, gw, p).transpose(0, 1, 3, 2, 4).reshape(b, gh * gw, p * p)
        return self.proj(Tensor(patches)) + self.pos


class TokenFrontend(Module):
    """Learned embedding lookup for integer token ids [b, L]."""

    kind = "tokens"

    def __init__(self, vocab, length, d_model, rng):
        self.vocab, self.length = vocab, length
        self.n_tokens = length
        self.table = normal_param(rng, (vocab, d_model))
        self.pos = normal_param(rng, (length, d_model))

    def __call__(self, raw):
        ids = np.asarray(raw)
        if ids.ndim != 2 or ids.shape[1] != self.length:
            raise DimensionError(f"token front-end expects [b, {self.length}], got {ids.shape}")
        return T.embedding(self.table, ids) + self.pos


def build_frontend(schema, d_model, rng):
    """Front-end for a modality schema dict (see ``data.modality_schema``)."""
    kind = schema["kind"]
    if kind == "series":
        return SeriesFrontend(schema["length"], schema["window"], d_model, rng,
                              channels=schema.get("channels", 1))
    if kind == "image2d":
        return ImageFrontend(schema["height"], schema["width"], schema["patch"], d_model, rng)
    if kind == "tokens":
        return TokenFrontend(schema["vocab"], schema["length"], d_model, rng)
    raise ContractError(f"unknown modality kind {kind!r}")


class AtdEncoder(Module):
    """Front-end, stacked encoder blocks, then mean pooling over positions."""

    def __init__(self, frontend, n_blocks, d_model, n_heads, rng):
        self.frontend = frontend
        self.d_model = d_model
        self.blocks = [EncoderBlock(d_model, n_heads, rng) for _ in range(n_blocks)]

    def run_blocks(self, x):
        if x.ndim != 3 or x.shape[1] < 1:
            raise ContractError(f"encoder input must be [b, s>=1, d]; got {x.shape}")
        for block in self.blocks:
            x = block(x)
        return x

    def encode(self, x):
        """Blocks plus pooling on already-embedded features [b, s, d]."""
        return T.reduce_mean(self.run_blocks(x), axis=1)

    def sequence(self, raw):
        return self.run_blocks(self.frontend(raw))

    def __call__(self, raw):
        return T.reduce_mean(self.sequence(raw), axis=1)
