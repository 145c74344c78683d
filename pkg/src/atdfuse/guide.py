"""Modality-conditioned calibration of encoder features before fusion.

A small feed-forward network sees each feature row concatenated with a
learned embedding of its modality and emits a residual shift ``r``. The
shifted features ``f + r`` are then standardized with statistics computed
across the batch (train mode) or with running averages of those statistics
(eval mode). With the network output at zero this is plain batch
standardization ``(f - mean) / std``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, normal_param
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class ModalityId:
    id: int
    name: str = ""

    def __post_init__(self):
        if self.id not in (0, 1):
            raise ContractError(f"unknown modality id {self.id!r}; expected 0 or 1")


def as_modality(m):
    return m if isinstance(m, ModalityId) else ModalityId(int(m))


@dataclass
class CalibrationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class CalibratedFeatures:
    features: Tensor
    modality: ModalityId
    stats: CalibrationStats


class GuideModule(Module):
    def __init__(self, d_model, rng, d_emb=16, hidden=None, eps=1e-5, momentum=0.1):
        hidden = hidden or d_model
        self.d_model, self.d_emb = d_model, d_emb
        self.eps, self.momentum = eps, momentum
        self.modality_embedding = normal_param(rng, (2, d_emb))
        self.fc1 = Linear(d_model + d_emb, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)
        # one row per modality so a single guide can serve both
        self.running_mean = np.zeros((2, d_model))
        self.running_std = np.ones((2, d_model))

    def refine(self, f, modality):
        """``f + r`` where ``r`` is the calibration network's residual."""
        b = f.shape[0]
        e = T.embedding(self.modality_embedding, np.full(b, modality.id, dtype=np.int64))
        r = self.fc2(T.gelu(self.fc1(T.concat([f, e], axis=1))))
        return f + r

    def __call__(self, f, modality, train=None):
        modality = as_modality(modality)
        train = self.training if train is None else train
        if f.ndim != 2 or f.shape[1] != self.d_model:
            raise DimensionError(f"guide expects [b, {self.d_model}] features, got {f.shape}")
        h = self.refine(f, modality)
        if train:
            if f.shape[0] < 2:
                raise ContractError("guide in train mode needs a batch of at least 2 "
                                    "(batch std is undefined for one sample)")
            mu = T.reduce_mean(h, axis=0, keepdims=True)
            sigma = T.reduce_std(h, axis=0, eps=self.eps, keepdims=True)
            out = (h - mu) / sigma
            stats = CalibrationStats(mu.data[0].copy(), sigma.data[0].copy())
            m = self.momentum
            i = modality.id
            self.running_mean[i] = (1.0 - m) * self.running_mean[i] + m * stats.mean
            self.running_std[i] = (1.0 - m) * self.running_std[i] + m * stats.std
        else:
            i = modality.id
            stats = CalibrationStats(self.running_mean[i].copy(),
                                     np.maximum(self.running_std[i], self.eps))
            out = (h - Tensor(stats.mean)) / Tensor(stats.std)
        return CalibratedFeatures(out, modality, stats)


def guide_calibrate(guide, f, modality, mode="train"):
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    return guide(f, modality, train=(mode == "train"))
