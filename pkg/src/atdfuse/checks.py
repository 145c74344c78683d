"""Registry of finite-difference gradient checks over every differentiable op
and the assembled model."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import gen_synthetic
from .fusion import AtdFusion, CrossAttentionFusion, LmfFusion
from .guide import GuideModule, ModalityId
from .model import build_model
from .nn import AtdEncoder, EncoderBlock, MultiHeadAttention, attention
from .tensor import Tensor, grad_check, make_rng

H = 1e-5
TOL = 1e-4


def _rand(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weights(rng, shape):
    # fixed random weighting keeps reductions from having trivially constant gradients
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _unary(op, shape=(3, 4), low=-2.0, high=2.0):
    def check(rng, h, tol):
        x = _rand(rng, *shape, low=low, high=high)
        w = None

        def f():
            nonlocal w
            y = op(x)
            if w is None:
                w = _weights(rng, y.shape)
            return T.reduce_sum(y * w)
        return grad_check(f, [x], h=h, tol=tol)
    return check


def _binary(op, sa=(3, 4), sb=(3, 4), b_low=-2.0, b_high=2.0):
    def check(rng, h, tol):
        a = _rand(rng, *sa)
        b = _rand(rng, *sb, low=b_low, high=b_high)
        w = _weights(rng, op(a, b).shape)
        return grad_check(lambda: T.reduce_sum(op(a, b) * w), [a, b], h=h, tol=tol)
    return check


def _relu_check(rng, h, tol):
    # keep inputs away from the kink so central differences are valid
    x = Tensor(rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)),
               requires_grad=True)
    w = _weights(rng, (3, 4))
    return grad_check(lambda: T.reduce_sum(T.relu(x) * w), [x], h=h, tol=tol)


def _concat_check(rng, h, tol):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 2)
    w = _weights(rng, (2, 5))
    return grad_check(lambda: T.reduce_sum(T.concat([a, b], axis=1) * w), [a, b], h=h, tol=tol)


def _embedding_check(rng, h, tol):
    table = _rand(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    w = _weights(rng, (2, 3, 3))
    return grad_check(lambda: T.reduce_sum(T.embedding(table, ids) * w), [table], h=h, tol=tol)


def _cross_entropy_check(rng, h, tol):
    logits = _rand(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    return grad_check(lambda: T.cross_entropy(logits, labels), [logits], h=h, tol=tol)


def _mse_check(rng, h, tol):
    pred = _rand(rng, 4, 2)
    target = rng.uniform(-2, 2, size=(4, 2))
    return grad_check(lambda: T.mse_loss(pred, target), [pred], h=h, tol=tol)


def _attention_check(rng, h, tol):
    q, k, v = _rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4)
    w = _weights(rng, (2, 3, 4))
    return grad_check(lambda: T.reduce_sum(attention(q, k, v) * w), [q, k, v], h=h, tol=tol)


def _module_check(module, forward, inputs=(), max_coords=None):
    def run(rng, h, tol):
        w = None

        def f():
            nonlocal w
            y = forward()
            if w is None:
                w = _weights(rng, y.shape)
            return T.reduce_sum(y * w)
        return grad_check(f, list(inputs) + module.parameters(), h=h, tol=tol,
                          max_coords=max_coords, rng=rng)
    return run


def _mha_check(rng, h, tol):
    mha = MultiHeadAttention(4, 2, rng)
    _scramble(mha, rng)
    x = _rand(rng, 2, 3, 4)
    return _module_check(mha, lambda: mha(x), [x])(rng, h, tol)


def _block_check(rng, h, tol):
    block = EncoderBlock(4, 2, rng)
    _scramble(block, rng)
    x = _rand(rng, 2, 3, 4)
    return _module_check(block, lambda: block(x), [x], max_coords=12)(rng, h, tol)


def _encoder_check(rng, h, tol):
    from .nn import SeriesFrontend

    enc = AtdEncoder(SeriesFrontend(8, 4, 4, rng), 2, 4, 2, rng)
    _scramble(enc, rng)
    raw = rng.uniform(-2, 2, size=(2, 8))
    return _module_check(enc, lambda: enc(raw), max_coords=12)(rng, h, tol)


def _guide_check(rng, h, tol):
    guide = GuideModule(4, rng, d_emb=3)
    _scramble(guide, rng)
    f = _rand(rng, 5, 4)
    return _module_check(guide, lambda: guide(f, ModalityId(1), train=True).features, [f])(
        rng, h, tol)


def _atd_check(rng, h, tol):
    fusion = AtdFusion(4, 3, rng)
    _scramble(fusion, rng)
    f1, f2 = _rand(rng, 2, 4), _rand(rng, 2, 4)
    return _module_check(fusion, lambda: fusion(f1, f2).fused, [f1, f2])(rng, h, tol)


def _atd_ortho_check(rng, h, tol):
    fusion = AtdFusion(3, 2, rng)
    _scramble(fusion, rng)
    return grad_check(fusion.orthogonality_penalty, [fusion.theta_12, fusion.theta_21], h=h, tol=tol)


def _lmf_check(rng, h, tol):
    fusion = LmfFusion(3, 2, rng, rank=2)
    _scramble(fusion, rng)
    f1, f2 = _rand(rng, 2, 3), _rand(rng, 2, 3)
    return _module_check(fusion, lambda: fusion(f1, f2).fused, [f1, f2])(rng, h, tol)


def _cross_check(rng, h, tol):
    fusion = CrossAttentionFusion(4, 3, rng, n_heads=2)
    _scramble(fusion, rng)
    s1, s2 = _rand(rng, 2, 3, 4), _rand(rng, 2, 2, 4)
    return _module_check(fusion, lambda: fusion(s1, s2).fused, [s1, s2])(rng, h, tol)


def _scramble(module, rng, scale=0.5):
    """Replace the small default init with O(1) weights so every path carries
    gradient well above finite-difference noise."""
    for p in module.parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)


def toy_config(fusion="atd"):
    cfg = RunConfig()
    cfg.model.fusion = fusion
    return cfg


def model_check(fusion="atd", batch=2, train=True, max_coords=4):
    """Full pipeline check at the default toy config on a synthetic batch."""
    def run(rng, h, tol):
        cfg = toy_config(fusion)
        ds = gen_synthetic("xor_classification", batch, seed=int(rng.integers(1 << 31)),
                           length=cfg.data.window, noise=cfg.data.noise, patch=cfg.data.patch)
        model = build_model(cfg.model, ds, rng)
        _scramble(model, rng, scale=0.2)
        b1, b2 = ds.batches(np.arange(batch))
        y = ds.y
        return grad_check(lambda: T.cross_entropy(model(b1, b2, train=train), y),
                          model.parameters(), h=h, tol=tol, max_coords=max_coords, rng=rng)
    return run


REGISTRY = {
    "add": _binary(T.add),
    "add_broadcast": _binary(T.add, sb=(4,)),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_broadcast": _binary(T.mul, sb=(1, 4)),
    "div": _binary(T.div, b_low=0.5, b_high=2.0),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "relu": _relu_check,
    "gelu": _unary(T.gelu),
    "exp": _unary(T.exp),
    "log": _unary(T.log, low=0.2, high=2.0),
    "square": _unary(T.square),
    "matmul": _binary(T.matmul, sa=(3, 4), sb=(4, 2)),
    "matmul_batched": _binary(T.matmul, sa=(2, 3, 4), sb=(4, 2)),
    "softmax": _unary(lambda x: T.softmax(x, axis=-1)),
    "softmax_axis0": _unary(lambda x: T.softmax(x, axis=0)),
    "log_softmax": _unary(lambda x: T.log_softmax(x, axis=1)),
    "layer_norm": _unary(T.layer_norm),
    "reduce_sum": _unary(lambda x: T.reduce_sum(x, axis=1)),
    "reduce_mean": _unary(lambda x: T.reduce_mean(x, axis=0)),
    "reduce_mean_all": _unary(T.reduce_mean),
    "reduce_std": _unary(lambda x: T.reduce_std(x, axis=0, eps=1e-5)),
    "concat": _concat_check,
    "slice": _unary(lambda x: T.getitem(x, (slice(0, 2), slice(1, 4)))),
    "transpose": _unary(lambda x: T.transpose(x, (1, 0))),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "embedding": _embedding_check,
    "cross_entropy": _cross_entropy_check,
    "mse_loss": _mse_check,
    "attention": _attention_check,
    "multi_head_attention": _mha_check,
    "encoder_block": _block_check,
    "encoder": _encoder_check,
    "guide_calibrate": _guide_check,
    "atd_fuse": _atd_check,
    "atd_orthogonality_penalty": _atd_ortho_check,
    "lmf_fuse": _lmf_check,
    "cross_attention_fuse": _cross_check,
    "model_atd_b2": model_check("atd", batch=2),
    "model_atd_b4": model_check("atd", batch=4),
    "model_atd_eval_b2": model_check("atd", batch=2, train=False),
}


def run_all(seed=0, h=H, tol=TOL, names=None):
    """Run the registered checks; returns ``{name: GradCheckReport}``."""
    results = {}
    for name, check in REGISTRY.items():
        if names is not None and name not in names:
            continue
        results[name] = check(make_rng([seed, len(results)]), h, tol)
    return results
