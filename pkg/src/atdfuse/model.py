"""End-to-end bimodal model: front-end, encoder, guide, fusion, head."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import ModalBatch
from .fusion import UnimodalProjection, build_fusion
from .guide import GuideModule, ModalityId
from .nn import AtdEncoder, Linear, Module, build_frontend
from .tensor import ContractError, DimensionError, Tensor


class Head(Module):
    """Fully connected output head, optionally with one GELU hidden layer."""

    def __init__(self, d_in, d_out, rng, hidden=0):
        self.hidden = hidden
        if hidden:
            self.fc1 = Linear(d_in, hidden, rng)
            self.fc2 = Linear(hidden, d_out, rng)
        else:
            self.fc = Linear(d_in, d_out, rng)

    def __call__(self, x):
        if self.hidden:
            return self.fc2(T.gelu(self.fc1(x)))
        return self.fc(x)


def _staged(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (DimensionError, ContractError) as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc


def _payload(batch):
    return batch.payload if isinstance(batch, ModalBatch) else batch


class AtdModel(Module):
    """Two encoders feed modality-conditioned guides, whose calibrated
    outputs are fused and mapped by a fully connected head.

    ``modality`` selects both inputs (``"both"``) or a single one
    (``"1"``/``"2"``); in the unimodal case the fusion step is replaced by a
    plain projection and the other modality's batch is ignored.
    """

    def __init__(self, cfg, schema1, schema2, out_dim, rng):
        self.cfg = cfg
        self.modality = cfg.modality
        d = cfg.d_model
        use1 = cfg.modality in ("both", "1")
        use2 = cfg.modality in ("both", "2")
        self.encoder_1 = self.encoder_2 = None
        self.guide_1 = self.guide_2 = None

        if use1:
            self.encoder_1 = AtdEncoder(build_frontend(schema1, d, rng), cfg.n_blocks, d,
                                        cfg.n_heads, rng)
        if use2:
            if use1 and cfg.shared_encoder:
                if schema1 != schema2:
                    raise ContractError("shared_encoder needs identical modality schemas")
                self.encoder_2 = self.encoder_1
            else:
                self.encoder_2 = AtdEncoder(build_frontend(schema2, d, rng), cfg.n_blocks, d,
                                            cfg.n_heads, rng)
        guide_kw = dict(d_emb=cfg.d_emb, eps=cfg.guide_eps, momentum=cfg.guide_momentum)
        if use1:
            self.guide_1 = GuideModule(d, rng, **guide_kw)
        if use2:
            self.guide_2 = (self.guide_1 if use1 and cfg.shared_guide
                            else GuideModule(d, rng, **guide_kw))

        if cfg.modality == "both":
            self.fusion = build_fusion(cfg.fusion, d, cfg.d_fused, rng,
                                       lmf_rank=cfg.lmf_rank, cross_heads=cfg.cross_heads)
        else:
            self.fusion = UnimodalProjection(d, cfg.d_fused, rng)
        self.head = Head(cfg.d_fused, out_dim, rng, hidden=cfg.head_hidden)

    # -- pipeline stages --------------------------------------------------------
    def _calibrate(self, which, raw, train):
        encoder = self.encoder_1 if which == 0 else self.encoder_2
        guide = self.guide_1 if which == 0 else self.guide_2
        m = ModalityId(which)
        if self.fusion.uses_sequences:
            seq = _staged(f"encoder_{which + 1}", encoder.sequence, raw)
            b, s, d = seq.shape
            cal = _staged(f"guide_{which + 1}", guide, seq.reshape(b * s, d), m, train)
            return cal.features.reshape(b, s, d)
        f = _staged(f"encoder_{which + 1}", encoder, raw)
        return _staged(f"guide_{which + 1}", guide, f, m, train).features

    def calibrated(self, batch1, batch2, train=None):
        """Calibrated features for the active modalities (``None`` if unused)."""
        train = self.training if train is None else train
        f1 = self._calibrate(0, _payload(batch1), train) if self.encoder_1 is not None else None
        f2 = self._calibrate(1, _payload(batch2), train) if self.encoder_2 is not None else None
        if f1 is not None and f2 is not None and f1.shape[0] != f2.shape[0]:
            raise DimensionError(f"paired batches differ in size: {f1.shape[0]} vs {f2.shape[0]}")
        return f1, f2

    def fuse(self, batch1, batch2, train=None):
        f1, f2 = self.calibrated(batch1, batch2, train)
        if self.modality == "both":
            return _staged("fusion", self.fusion, f1, f2)
        return _staged("fusion", self.fusion, f1 if f1 is not None else f2)

    def __call__(self, batch1, batch2, train=None):
        return _staged("head", self.head, self.fuse(batch1, batch2, train).fused)

    def unimodal_embeddings(self, batch1, batch2):
        """Eval-mode fused embeddings with the other modality zeroed, one per
        modality; the basis of the cross-modal retrieval probe."""
        if self.modality != "both":
            raise ContractError("retrieval probe needs a bimodal model")
        f1, f2 = self.calibrated(batch1, batch2, train=False)
        z1 = Tensor(np.zeros(f1.shape))
        z2 = Tensor(np.zeros(f2.shape))
        return self.fusion(f1, z2).fused, self.fusion(z1, f2).fused


def forward(model, batch1, batch2, mode="train"):
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model(batch1, batch2, train=(mode == "train"))


def build_model(cfg, dataset_or_schemas, rng):
    """Model for a ``ModelConfig`` and either a PairedDataset or
    ``(schema1, schema2, out_dim)``."""
    if isinstance(dataset_or_schemas, tuple):
        schema1, schema2, out_dim = dataset_or_schemas
    else:
        ds = dataset_or_schemas
        schema1, schema2, out_dim = ds.schema1, ds.schema2, ds.out_dim
    return AtdModel(cfg, schema1, schema2, out_dim, rng)
