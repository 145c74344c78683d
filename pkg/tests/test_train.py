import numpy as np
import pytest

from atdfuse.config import RunConfig
from atdfuse.data import Splits, gen_synthetic
from atdfuse.model import build_model, forward
from atdfuse.tensor import ContractError, DimensionError, Tensor, make_rng
from atdfuse.train import (Adam, Checkpoint, TrainingDiverged, evaluate, load_model, predict,
                           train_run)


def tiny_config(task="xor_classification", epochs=2, n=96, **model):
    cfg = RunConfig()
    cfg.data.task, cfg.data.n = task, n
    cfg.train.epochs = epochs
    for k, v in model.items():
        setattr(cfg.model, k, v)
    return cfg


def memo_dataset(task, n=8, seed=0):
    ds = gen_synthetic(task, n, seed=seed)
    return ds, Splits(np.arange(n), np.arange(0), np.arange(0))


# -- forward contract ------------------------------------------------------------------------
def test_output_shape_classification():
    cfg = RunConfig()
    cfg.model.d_model = 8
    schema = {"kind": "series", "length": 16, "window": 4, "channels": 1}
    model = build_model(cfg.model, (schema, schema, 5), make_rng(0))
    x = make_rng(1).normal(size=(4, 16))
    assert forward(model, x, x, mode="eval").shape == (4, 5)


def test_zeroed_model_outputs_zero():
    ds = gen_synthetic("product_regression", 6, seed=0)
    model = build_model(RunConfig().model, ds, make_rng(0))
    for p in model.parameters():
        p.data[...] = 0.0
    b1, b2 = ds.batches(np.arange(6))
    np.testing.assert_array_equal(forward(model, b1, b2, "train").data, np.zeros((6, 1)))


def test_forward_errors_carry_stage():
    ds = gen_synthetic("xor_classification", 6, seed=0)
    model = build_model(RunConfig().model, ds, make_rng(0))
    with pytest.raises(DimensionError, match=r"^\[encoder_1\]"):
        model(np.zeros((3, 16, 2, 2)), ds.x2[:3])
    with pytest.raises(ContractError):
        forward(model, ds.x1[:3], ds.x2[:3], mode="predict")


@pytest.mark.parametrize("fusion", ["atd", "lmf", "cross_attention", "concat"])
def test_fusion_variants_swappable(fusion):
    ds = gen_synthetic("xor_classification", 6, seed=0)
    cfg = RunConfig()
    cfg.model.fusion = fusion
    model = build_model(cfg.model, ds, make_rng(0))
    b1, b2 = ds.batches(np.arange(6))
    assert model(b1, b2, train=True).shape == (6, 2)


# -- optimizer ---------------------------------------------------------------------------------
def test_adam_zero_gradient_is_noop():
    p = Tensor(make_rng(0).normal(size=(3, 3)), requires_grad=True)
    before = p.data.copy()
    opt = Adam([("w", p)])
    for _ in range(5):
        p.grad = np.zeros_like(p.data)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_is_lr_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    opt = Adam([("w", p)], lr=0.1, eps=0.0)
    p.grad = np.array([3.0, -0.2, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -0.9, 0.4], atol=1e-12)


# -- training loop -------------------------------------------------------------------------------
def test_zero_epochs_returns_initial_checkpoint():
    res = train_run(tiny_config(epochs=0))
    assert res.history == []
    assert res.best is res.final
    fresh = build_model(res.config.model, res.dataset, make_rng([res.config.train.seed, 1]))
    for name, p in fresh.named_parameters():
        np.testing.assert_array_equal(res.final.params[name], p.data)


def test_history_records():
    res = train_run(tiny_config(epochs=2))
    assert {r["epoch"] for r in res.history} == {1, 2}
    keys = {(r["split"], r["metric"]) for r in res.history}
    assert {("train", "loss"), ("train", "accuracy"), ("val", "accuracy"), ("val", "macro_f1")} <= keys


def test_same_seed_bit_identical():
    a = train_run(tiny_config(epochs=2))
    b = train_run(tiny_config(epochs=2))
    assert a.history == b.history
    for k in a.final.params:
        np.testing.assert_array_equal(a.final.params[k], b.final.params[k])


def test_different_seed_differs():
    cfg = tiny_config(epochs=1)
    other = cfg.with_overrides({"train.seed": 1})
    assert train_run(cfg).history != train_run(other).history


def test_checkpoint_round_trip(tmp_path):
    res = train_run(tiny_config(epochs=1))
    path = tmp_path / "ck.npz"
    res.final.save(path)
    back = Checkpoint.load(path)
    for group in ("params", "buffers"):
        a, b = getattr(res.final, group), getattr(back, group)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    assert back.optim["t"] == res.final.optim["t"]
    assert back.config_hash == res.config.hash()
    idx = res.splits.test
    r1 = evaluate(back, res.dataset, idx)
    r2 = evaluate(Checkpoint.load(path), res.dataset, idx)
    assert r1 == r2 == evaluate(res.model, res.dataset, idx)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, meta=np.array(['{"format": "other"}']))
    with pytest.raises(ValueError, match="not a"):
        Checkpoint.load(path)


def test_running_stats_are_restored():
    res = train_run(tiny_config(epochs=1))
    model = load_model(res.final)
    for name, buf in model.named_buffers():
        np.testing.assert_array_equal(buf, res.final.buffers[name])


def test_overfit_eight_samples():
    res = train_run(tiny_config(epochs=150), dataset=memo_dataset("xor_classification"))
    rep = evaluate(res.model, res.dataset, np.arange(8))
    assert rep["accuracy"] == 1.0


def test_constant_targets_constant_prediction_mae_zero():
    ds, splits = memo_dataset("product_regression")
    ds.y[...] = 0.0
    cfg = tiny_config("product_regression", epochs=0)
    res = train_run(cfg, dataset=(ds, splits))
    for p in res.model.head.parameters():
        p.data[...] = 0.0
    assert evaluate(res.model, ds, np.arange(8), retrieval=False)["mae"] == 0.0


def test_product_regression_training_lowers_loss():
    res = train_run(tiny_config("product_regression", epochs=5, n=300))
    final = [r["value"] for r in res.history if r["split"] == "train" and r["metric"] == "loss"][-1]
    assert final < res.initial_train_loss


def test_alt_schedule_freezes_one_theta_per_step():
    cfg = tiny_config(epochs=1, n=20, alt_schedule=True)
    ds = gen_synthetic("xor_classification", 8, seed=0)
    splits = Splits(np.arange(8), np.arange(0), np.arange(0))
    start = train_run(cfg.with_overrides({"train.epochs": 0}), dataset=(ds, splits)).final.params
    one = train_run(cfg, dataset=(ds, splits)).final.params
    # single step (t=1) updates theta_12 only
    np.testing.assert_array_equal(one["fusion.theta_21"], start["fusion.theta_21"])
    assert not np.array_equal(one["fusion.theta_12"], start["fusion.theta_12"])


def test_nan_loss_aborts_with_gradient_norms():
    ds, splits = memo_dataset("product_regression")
    ds.y[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="gradient norms per module"):
        train_run(tiny_config("product_regression", epochs=1), dataset=(ds, splits))


def test_predict_is_batch_size_invariant():
    res = train_run(tiny_config(epochs=1))
    idx = np.arange(20)
    np.testing.assert_allclose(predict(res.model, res.dataset, idx, batch_size=3),
                               predict(res.model, res.dataset, idx, batch_size=20), atol=1e-13)


def test_unimodal_model_has_no_retrieval():
    res = train_run(tiny_config(epochs=1, modality="1"))
    rep = evaluate(res.model, res.dataset, res.splits.test)
    assert "R@1" not in rep and "accuracy" in rep
