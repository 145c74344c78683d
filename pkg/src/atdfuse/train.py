"""Optimization, checkpoints, training and evaluation loops."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import load_dataset
from .fusion import AtdFusion
from .metrics import accuracy_f1, mae, mse, recall_at_k
from .model import build_model
from .tensor import make_rng, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "atdfuse-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, skip=()):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None or name in skip:
                continue
            g = p.grad
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()


def clip_grad_norm(params, max_norm):
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def grad_norms_by_component(model):
    norms = {}
    for name, p in model.named_parameters():
        comp = name.split(".", 1)[0]
        g = 0.0 if p.grad is None else float(np.sum(p.grad * p.grad))
        norms[comp] = norms.get(comp, 0.0) + g
    return {k: float(np.sqrt(v)) for k, v in norms.items()}


# -- checkpoints ----------------------------------------------------------------
@dataclass
class Checkpoint:
    """Snapshot of a run: parameters, guide running stats, optimizer moments,
    RNG state and the config that produced it.

    On disk this is an uncompressed ``.npz`` archive. Array entries are
    little-endian float64 ``.npy`` members named ``param/<name>``,
    ``buffer/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``; the member
    ``meta`` is a one-element unicode array holding JSON with ``format``,
    ``config``, ``config_hash``, ``epoch``, ``adam_t``, ``rng_state``,
    ``schema1``, ``schema2``, ``out_dim`` and ``task``.
    """

    params: dict
    buffers: dict
    optim: dict
    meta: dict

    @property
    def config(self):
        return RunConfig.from_dict(self.meta["config"])

    @property
    def config_hash(self):
        return self.meta["config_hash"]

    def save(self, path):
        arrays = {}
        for prefix, group in (("param", self.params), ("buffer", self.buffers),
                              ("adam_m", self.optim.get("m", {})), ("adam_v", self.optim.get("v", {}))):
            for name, arr in group.items():
                arrays[f"{prefix}/{name}"] = np.asarray(arr, dtype="<f8")
        meta = dict(self.meta, format=CHECKPOINT_FORMAT, adam_t=int(self.optim.get("t", 0)))
        arrays["meta"] = np.array([json.dumps(meta, sort_keys=True)])
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(str(npz["meta"][0]))
            for key in npz.files:
                if key == "meta":
                    continue
                prefix, _, name = key.partition("/")
                groups[prefix][name] = npz[key].astype(np.float64)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        optim = {"t": meta.get("adam_t", 0), "m": groups["adam_m"], "v": groups["adam_v"]}
        return cls(groups["param"], groups["buffer"], optim, meta)


def _json_safe_rng_state(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def make_checkpoint(model, optimizer, config, meta_extra, rng=None, epoch=0):
    meta = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "epoch": epoch,
        "rng_state": _json_safe_rng_state(rng) if rng is not None else None,
    }
    meta.update(meta_extra)
    params = {k: p.data.copy() for k, p in model.named_parameters()}
    buffers = {k: b.copy() for k, b in model.named_buffers()}
    optim = optimizer.state_dict() if optimizer is not None else {"t": 0, "m": {}, "v": {}}
    return Checkpoint(params, buffers, optim, meta)


def load_model(checkpoint):
    """Rebuild the model described by a checkpoint and restore its state."""
    cfg = checkpoint.config
    meta = checkpoint.meta
    model = build_model(cfg.model, (meta["schema1"], meta["schema2"], meta["out_dim"]),
                        make_rng([cfg.train.seed, 1]))
    restore(model, checkpoint)
    model.task = meta["task"]
    return model.eval()


def restore(model, checkpoint):
    params = dict(model.named_parameters())
    if set(params) != set(checkpoint.params):
        raise ValueError("checkpoint parameters do not match the model")
    for k, p in params.items():
        p.data[...] = checkpoint.params[k]
    for k, b in model.named_buffers():
        b[...] = checkpoint.buffers[k]


# -- loss / evaluation --------------------------------------------------------------
def compute_loss(model, out, y, task):
    if task == "classification":
        return T.cross_entropy(out, y)
    return T.mse_loss(out, T.Tensor(y))


def predict(model, ds, idx, batch_size=256):
    """Eval-mode outputs for ``idx`` as a numpy array."""
    model.eval()
    chunks = []
    with no_grad():
        for start in range(0, len(idx), batch_size):
            b1, b2 = ds.batches(idx[start:start + batch_size])
            chunks.append(model(b1, b2, train=False).data)
    return np.concatenate(chunks, axis=0)


def _softmax_ce(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-lp[np.arange(len(y)), y].mean())


def retrieval_probe(model, ds, idx, ks=(1, 5, 10), batch_size=256):
    """R@K (percent) for modality-1 queries against a modality-2 gallery, by
    cosine similarity of the two unimodal fused embeddings."""
    e1, e2 = [], []
    with no_grad():
        for start in range(0, len(idx), batch_size):
            b1, b2 = ds.batches(idx[start:start + batch_size])
            a, b = model.unimodal_embeddings(b1, b2)
            e1.append(a.data)
            e2.append(b.data)
    e1 = np.concatenate(e1)
    e2 = np.concatenate(e2)
    e1 = e1 / np.maximum(np.linalg.norm(e1, axis=1, keepdims=True), 1e-12)
    e2 = e2 / np.maximum(np.linalg.norm(e2, axis=1, keepdims=True), 1e-12)
    sim = e1 @ e2.T
    truth = np.arange(len(idx))
    return {f"R@{k}": recall_at_k(sim, truth, k) for k in ks if k <= len(idx)}


def evaluate(model, ds, idx, task=None, retrieval=True):
    """Metric report for one split. Accepts a model or a :class:`Checkpoint`."""
    if isinstance(model, Checkpoint):
        model = load_model(model)
    task = task or ds.task
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        return {}
    out = predict(model, ds, idx)
    y = ds.y[idx]
    report = {}
    if task == "classification":
        report["loss"] = _softmax_ce(out, y)
        cls = accuracy_f1(y, out.argmax(axis=1), ds.n_classes)
        report["accuracy"] = cls.accuracy
        report["macro_f1"] = cls.macro_f1
        if cls.degenerate_classes:
            report["degenerate_classes"] = cls.degenerate_classes
    else:
        report["mae"] = mae(y, out)
        report["mse"] = mse(y, out)
        report["loss"] = report["mse"]
    if retrieval and model.modality == "both":
        report.update(retrieval_probe(model, ds, idx))
    return report


# -- training loop ------------------------------------------------------------------
@dataclass
class TrainResult:
    history: list
    final: Checkpoint
    best: Checkpoint
    model: object
    dataset: object
    splits: object
    initial_train_loss: float
    config: RunConfig
    best_epoch: int = 0
    extras: dict = field(default_factory=dict)


def _batches(perm, batch_size):
    chunks = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _mean_train_loss(model, ds, idx, batch_size, task):
    saved = {k: b.copy() for k, b in model.named_buffers()}
    losses = []
    with no_grad():
        for chunk in _batches(idx, batch_size):
            b1, b2 = ds.batches(chunk)
            losses.append(compute_loss(model, model(b1, b2, train=True), ds.y[chunk], task).item()
                          * len(chunk))
    for k, b in model.named_buffers():
        b[...] = saved[k]
    return float(np.sum(losses) / len(idx))


def train_run(config, dataset=None, on_epoch=None):
    """Train per ``config``; returns history plus final and best-val checkpoints.

    ``dataset`` may be a ``(PairedDataset, Splits)`` pair to bypass loading.
    History records are dicts ``{"epoch", "split", "metric", "value"}``.
    """
    config.validate()
    tc, oc = config.train, config.optim
    ds, splits = dataset if dataset is not None else load_dataset(config.data, tc.seed)
    task = ds.task
    if len(splits.train) < 2:
        raise ValueError("training split needs at least 2 samples")

    model = build_model(config.model, ds, make_rng([tc.seed, 1]))
    model.task = task
    shuffle_rng = make_rng([tc.seed, 2])
    params = list(model.named_parameters())
    opt = Adam(params, lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps)
    meta = {"schema1": ds.schema1, "schema2": ds.schema2, "out_dim": ds.out_dim, "task": task}
    plain = [p for _, p in params]

    penalty = config.model.ortho_penalty if isinstance(model.fusion, AtdFusion) else 0.0
    theta_names = ("fusion.theta_12", "fusion.theta_21")
    alt = config.model.alt_schedule and isinstance(model.fusion, AtdFusion)

    model.train()
    initial = _mean_train_loss(model, ds, splits.train, tc.batch_size, task)
    best = make_checkpoint(model, opt, config, meta, shuffle_rng, epoch=0)
    best_score, best_epoch = np.inf, 0
    history = []

    for epoch in range(1, tc.epochs + 1):
        model.train()
        perm = shuffle_rng.permutation(splits.train)
        total, correct, seen = 0.0, 0, 0
        for chunk in _batches(perm, tc.batch_size):
            b1, b2 = ds.batches(chunk)
            y = ds.y[chunk]
            model.zero_grad()
            out = model(b1, b2, train=True)
            loss = compute_loss(model, out, y, task)
            if penalty:
                loss = loss + T.scale(model.fusion.orthogonality_penalty(), penalty)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; gradient norms per module: "
                    f"{grad_norms_by_component(model)}")
            loss.backward()
            norms = grad_norms_by_component(model)
            if not all(np.isfinite(v) for v in norms.values()):
                raise TrainingDiverged(f"non-finite gradients at epoch {epoch}: {norms}")
            clip_grad_norm(plain, oc.clip_norm)
            skip = ()
            if alt:
                skip = (theta_names[1],) if opt.t % 2 == 0 else (theta_names[0],)
            opt.step(skip=skip)
            total += loss.item() * len(chunk)
            seen += len(chunk)
            if task == "classification":
                correct += int((out.data.argmax(axis=1) == y).sum())

        records = [("train", "loss", total / seen)]
        if task == "classification":
            records.append(("train", "accuracy", correct / seen))
        val = evaluate(model, ds, splits.val, task, retrieval=False) if len(splits.val) else {}
        for k, v in val.items():
            if isinstance(v, float):
                records.append(("val", k, v))
        for split, metric, value in records:
            history.append({"epoch": epoch, "split": split, "metric": metric, "value": float(value)})
        if on_epoch is not None:
            on_epoch(epoch, records)

        score = val.get("loss", total / seen)
        if score < best_score:
            best_score, best_epoch = score, epoch
            best = make_checkpoint(model, opt, config, meta, shuffle_rng, epoch=epoch)

    final = make_checkpoint(model, opt, config, meta, shuffle_rng, epoch=tc.epochs)
    if tc.epochs == 0:
        best = final
    return TrainResult(history, final, best, model, ds, splits, initial, config, best_epoch)
