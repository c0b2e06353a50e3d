import csv
import math

import numpy as np
import pytest

from volta.errors import ConfigError, InvalidArgumentError
from volta.model import forward, predict
from volta.training import (
    VARIANTS,
    AdamWState,
    OneCycleSchedule,
    TrainConfig,
    adamw_step,
    apply_ablation,
    onecycle_lr,
    train,
    validation_loss,
)


def two_blobs(seed=42, n_train=200, n_val=100, d=8):
    rng = np.random.default_rng(seed)
    mu = np.zeros(d)
    mu[0] = 4.0

    def draw(n):
        y = np.arange(n) % 2
        return rng.normal(size=(n, d)) + np.where(y[:, None] == 1, mu, -mu), y

    return (*draw(n_train), *draw(n_val))


def test_adamw_zero_grad_no_decay_is_identity():
    params = {"W0": np.array([1.0, -2.0]), "tau": np.array(0.5)}
    state = AdamWState.zeros_like(params)
    new, st = adamw_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, 0.1, 0.0)
    for k in params:
        assert np.array_equal(new[k], params[k])
    assert st.step == 1


def test_adamw_constant_gradient_hand_unrolled():
    eps, lr = 1e-8, 0.1
    p = {"w": np.array(0.0)}
    state = AdamWState.zeros_like(p)
    p1, state = adamw_step(p, {"w": np.array(1.0)}, state, lr, 0.0)
    assert float(p1["w"]) == pytest.approx(-lr / (1 + eps), abs=1e-15)
    p2, state = adamw_step(p1, {"w": np.array(1.0)}, state, lr, 0.0)
    # m = 0.19, v = 0.001999; bias-corrected both equal 1
    m_hat = (0.9 * 0.1 + 0.1) / (1 - 0.9**2)
    v_hat = (0.999 * 0.001 + 0.001) / (1 - 0.999**2)
    assert float(p2["w"]) == pytest.approx(float(p1["w"]) - lr * m_hat / (math.sqrt(v_hat) + eps), abs=1e-15)


def test_adamw_decoupled_decay_and_exclusions():
    params = {"W0": np.array([2.0]), "gain0": np.array([2.0]), "shift0": np.array([2.0]),
              "tau": np.array(2.0)}
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    state = AdamWState.zeros_like(params)
    cur = params
    for _ in range(3):
        cur, state = adamw_step(cur, zero, state, 0.1, 0.01)
    assert float(cur["W0"][0]) == pytest.approx(2.0 * (1 - 0.001) ** 3, abs=1e-15)
    for k in ("gain0", "shift0", "tau"):
        assert float(np.asarray(cur[k]).ravel()[0]) == 2.0


def test_adamw_shape_errors():
    params = {"w": np.zeros(2)}
    with pytest.raises(InvalidArgumentError):
        adamw_step(params, {"w": np.zeros(3)}, AdamWState.zeros_like(params), 0.1, 0.0)
    with pytest.raises(InvalidArgumentError):
        adamw_step(params, {"w": np.zeros(2)}, AdamWState.zeros_like(params), -1.0, 0.0)


@pytest.mark.parametrize("total", [1, 7, 10, 100, 1234])
def test_onecycle_endpoints(total):
    s = OneCycleSchedule(3e-3, total)
    assert onecycle_lr(0, s) == pytest.approx(3e-3 / 25, abs=1e-18)
    assert abs(onecycle_lr(math.ceil(0.1 * total), s) - 3e-3) <= 1e-12
    if total > 1:
        assert abs(onecycle_lr(total, s) - 3e-3 / 1e4) <= 1e-12
    with pytest.raises(InvalidArgumentError):
        onecycle_lr(total + 1, s)


def test_onecycle_shape():
    s = OneCycleSchedule(1.0, 100)
    lrs = [onecycle_lr(t, s) for t in range(101)]
    assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    with pytest.raises(InvalidArgumentError):
        OneCycleSchedule(1.0, 10, warmup_frac=1.0)
    with pytest.raises(InvalidArgumentError):
        OneCycleSchedule(1.0, 10, start_div=1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(variant="bogus")
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)


def test_apply_ablation_mapping():
    e = {v: apply_ablation(TrainConfig(variant=v)) for v in VARIANTS}
    assert e["full"].learn_tau and e["full"].posthoc and not e["full"].shallow and e["full"].mc_passes == 0
    assert not e["fixed_tau"].learn_tau and e["fixed_tau"].tau0 == 1.0
    assert e["shallow_encoder"].shallow
    assert not e["no_posthoc_ts"].posthoc
    assert e["mc_inference_control"].mc_passes == 10


@pytest.fixture(scope="module")
def separable_run():
    data = two_blobs()
    # 200 rows at the default batch of 512 give one step per epoch, too few to
    # pull tau far enough below 1 for a near-zero loss
    cfg = TrainConfig(epochs=100, batch_size=32, seed=42)
    return data, cfg, train(*data, cfg)


def test_separable_blobs_fit(separable_run):
    (xt, yt, xv, yv), cfg, (model, hist) = separable_run
    probs, _ = forward(model, xt)
    assert np.mean(probs.argmax(axis=1) == yt) == 1.0
    assert hist.records[-1].train_loss < 0.05
    assert min(r.val_loss for r in hist.records) < hist.records[0].val_loss
    assert validation_loss(model, xv, yv) == hist.best_val_loss
    assert model.tau >= cfg.tau_floor
    np.testing.assert_allclose(np.linalg.norm(model.prototypes, axis=1), 1.0, atol=1e-10)


def test_training_is_deterministic(separable_run):
    data, cfg, (model, hist) = separable_run
    again, hist2 = train(*data, cfg)
    for k, v in model.params.items():
        assert again.params[k].tobytes() == v.tobytes()
    assert again.tau == model.tau
    assert [r.val_loss for r in hist.records] == [r.val_loss for r in hist2.records]


def test_history_csv(tmp_path, separable_run):
    _, _, (_, hist) = separable_run
    hist.to_csv(tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "lr", "tau"]
    assert len(rows) == len(hist.records)
    assert float(rows[3]["val_loss"]) == hist.records[3].val_loss


def test_patience_zero_stops_at_first_non_improvement():
    data = two_blobs(seed=1, n_train=60, n_val=30)
    model, hist = train(*data, TrainConfig(epochs=50, batch_size=16, patience=0, seed=5))
    vals = [r.val_loss for r in hist.records]
    first_bad = next((i for i in range(1, len(vals)) if vals[i] >= min(vals[:i])), None)
    if first_bad is None:
        assert len(vals) == 50
    else:
        assert len(vals) == first_bad + 1 and hist.stopped_early


def test_fixed_tau_stays_one():
    data = two_blobs(seed=3, n_train=60, n_val=30)
    model, hist = train(*data, TrainConfig(epochs=5, batch_size=16, variant="fixed_tau"))
    assert model.tau == 1.0 and all(r.tau == 1.0 for r in hist.records)


def test_sgd_tau_path_and_floor():
    data = two_blobs(seed=4, n_train=60, n_val=30)
    model, hist = train(*data, TrainConfig(epochs=5, batch_size=16, tau_optimizer="sgd", lr=0.5,
                                           tau_floor=0.2))
    assert all(r.tau >= 0.2 for r in hist.records)


def test_mc_control_with_zero_dropout_matches_deterministic():
    data = two_blobs(seed=5, n_train=60, n_val=30)
    model, _ = train(*data, TrainConfig(epochs=3, batch_size=16, dropout=0.0,
                                        variant="mc_inference_control"))
    assert model.mc_passes == 10
    mc = predict(model, data[2])
    model.mc_passes = 0
    det = predict(model, data[2])
    np.testing.assert_allclose(mc.probabilities, det.probabilities, rtol=0, atol=1e-15)
    assert np.array_equal(mc.labels, det.labels)


def test_train_rejects_empty_split():
    xt, yt, xv, yv = two_blobs()
    with pytest.raises(InvalidArgumentError):
        train(xt, yt, xv[:0], yv[:0], TrainConfig(epochs=1))
