"""Bimodal fusion: displacement fusion and the baselines it is compared with.

All fusion modules take the two modality representations and return a
:class:`FusedEmbedding`, so they are interchangeable in a model. Only the
cross-attention baseline consumes per-position sequences; the others take
pooled ``[b, d_model]`` features.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .guide import CalibratedFeatures
from .nn import Linear, Module, MultiHeadAttention, normal_param
from .tensor import ContractError, DimensionError, Tensor

FUSION_VARIANTS = ("atd", "lmf", "cross_attention", "concat")


@dataclass
class FusedEmbedding:
    fused: Tensor
    parts: dict = field(default_factory=dict)


def _features(x):
    return x.features if isinstance(x, CalibratedFeatures) else x


def _check_pair(a, b, ndim, name):
    if a.ndim != ndim or b.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"{name}: modality shapes {a.shape} and {b.shape} do not match")


class AtdFusion(Module):
    """Cross-displacement fusion.

    Each calibrated representation is carried into the other modality's
    space by a trainable square matrix, shifted by that modality's own
    features, and the two results are concatenated and projected::

        z1 = f2 @ theta_21      g1 = z1 + f1
        z2 = f1 @ theta_12      g2 = z2 + f2
        fused = proj([g1, g2])
    """

    uses_sequences = False

    def __init__(self, d_model, d_fused, rng):
        self.d_model, self.d_fused = d_model, d_fused
        self.theta_12 = normal_param(rng, (d_model, d_model))
        self.theta_21 = normal_param(rng, (d_model, d_model))
        self.proj = Linear(2 * d_model, d_fused, rng)

    def __call__(self, f1, f2):
        f1, f2 = _features(f1), _features(f2)
        _check_pair(f1, f2, 2, "atd_fuse")
        if f1.shape[1] != self.d_model:
            raise DimensionError(f"atd_fuse: expected feature dim {self.d_model}, got {f1.shape[1]}")
        z1 = T.matmul(f2, self.theta_21)
        z2 = T.matmul(f1, self.theta_12)
        g1 = z1 + f1
        g2 = z2 + f2
        fused = self.proj(T.concat([g1, g2], axis=1))
        return FusedEmbedding(fused, {"z1": z1, "z2": z2, "g1": g1, "g2": g2})

    def orthogonality_penalty(self):
        eye = Tensor(np.eye(self.d_model))
        total = None
        for theta in (self.theta_12, self.theta_21):
            gram = T.matmul(T.transpose(theta), theta) - eye
            term = T.reduce_sum(T.square(gram))
            total = term if total is None else total + term
        return total


class LmfFusion(Module):
    """Low-rank multimodal fusion.

    Each modality vector gets a constant 1 appended; rank-wise factor
    projections of the two augmented vectors are multiplied elementwise and
    combined with learned rank weights. This equals contracting the outer
    product of the augmented vectors with a rank-``r`` weight tensor.
    """

    uses_sequences = False

    def __init__(self, d_model, d_fused, rng, rank=4):
        if rank < 1:
            raise ContractError(f"LMF rank must be >= 1, got {rank}")
        self.d_model, self.d_fused, self.rank = d_model, d_fused, rank
        fstd = math.sqrt(2.0 / (d_model + 1 + d_fused))
        self.factor_1 = normal_param(rng, (rank, d_model + 1, d_fused), fstd)
        self.factor_2 = normal_param(rng, (rank, d_model + 1, d_fused), fstd)
        self.rank_weights = normal_param(rng, (1, rank), math.sqrt(2.0 / (1 + rank)))
        self.bias = Tensor(np.zeros(d_fused), requires_grad=True)

    def __call__(self, f1, f2):
        f1, f2 = _features(f1), _features(f2)
        _check_pair(f1, f2, 2, "lmf_fuse")
        b = f1.shape[0]
        ones = Tensor(np.ones((b, 1)))
        p1 = T.matmul(T.concat([f1, ones], axis=1), self.factor_1)  # [r, b, o]
        p2 = T.matmul(T.concat([f2, ones], axis=1), self.factor_2)
        prod = (p1 * p2).reshape(self.rank, b * self.d_fused)
        fused = T.matmul(self.rank_weights, prod).reshape(b, self.d_fused) + self.bias
        return FusedEmbedding(fused, {"p1": p1, "p2": p2})


class CrossAttentionFusion(Module):
    """Two cross-attention passes (queries from one modality, keys and values
    from the other), each mean-pooled, then concatenated and projected."""

    uses_sequences = True

    def __init__(self, d_model, d_fused, rng, n_heads=2, shared=False):
        self.d_model, self.d_fused = d_model, d_fused
        self.attn_12 = MultiHeadAttention(d_model, n_heads, rng)
        self.attn_21 = self.attn_12 if shared else MultiHeadAttention(d_model, n_heads, rng)
        self.proj = Linear(2 * d_model, d_fused, rng)

    def __call__(self, seq1, seq2):
        seq1, seq2 = _features(seq1), _features(seq2)
        _check_pair(seq1, seq2, 3, "cross_attention_fuse")
        a1 = self.attn_12(seq1, kv=seq2)
        a2 = self.attn_21(seq2, kv=seq1)
        p1 = T.reduce_mean(a1, axis=1)
        p2 = T.reduce_mean(a2, axis=1)
        fused = self.proj(T.concat([p1, p2], axis=1))
        return FusedEmbedding(fused, {"a1": a1, "a2": a2, "pooled_1": p1, "pooled_2": p2})


class ConcatFusion(Module):
    """Concatenate and project; the no-interaction reference."""

    uses_sequences = False

    def __init__(self, d_model, d_fused, rng):
        self.d_model, self.d_fused = d_model, d_fused
        self.proj = Linear(2 * d_model, d_fused, rng)

    def __call__(self, f1, f2):
        f1, f2 = _features(f1), _features(f2)
        _check_pair(f1, f2, 2, "concat_fuse")
        return FusedEmbedding(self.proj(T.concat([f1, f2], axis=1)))


class UnimodalProjection(Module):
    """Stand-in for fusion when only one modality is fed to the model."""

    uses_sequences = False

    def __init__(self, d_model, d_fused, rng):
        self.d_model, self.d_fused = d_model, d_fused
        self.proj = Linear(d_model, d_fused, rng)

    def __call__(self, f, _unused=None):
        return FusedEmbedding(self.proj(_features(f)))


def build_fusion(variant, d_model, d_fused, rng, lmf_rank=4, cross_heads=2):
    if variant == "atd":
        return AtdFusion(d_model, d_fused, rng)
    if variant == "lmf":
        return LmfFusion(d_model, d_fused, rng, rank=lmf_rank)
    if variant == "cross_attention":
        return CrossAttentionFusion(d_model, d_fused, rng, n_heads=cross_heads)
    if variant == "concat":
        return ConcatFusion(d_model, d_fused, rng)
    raise ContractError(f"unknown fusion variant {variant!r}; choose from {FUSION_VARIANTS}")


def atd_fuse(f1, f2, params):
    return params(f1, f2)


def lmf_fuse(f1, f2, params):
    return params(f1, f2)


def cross_attention_fuse(seq1, seq2, params):
    return params(seq1, seq2)


def param_count(model):
    """Trainable scalar counts per direct child component, plus ``total``.

    Parameters shared between components are counted once, under the first
    component that owns them.
    """
    counts = OrderedDict()
    seen = set()
    for name, p in model.named_parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        component = name.split(".", 1)[0]
        counts[component] = counts.get(component, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts
