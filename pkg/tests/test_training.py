import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egocognav import autodiff as ad
from egocognav.episodes import random_world, stack_windows, synth_generate, windows_from_episodes
from egocognav.errors import BadConfig, NonFinite, OutOfRange, ShapeMismatch
from egocognav.geometry import IDENTITY_6D, matrix_to_rot6d, rot_z
from egocognav.model import EgoCogNav, InputStats, ModelConfig
from egocognav.training import (LossWeights, OptimizerState, adamw_step, aux_loss, clip_grad_norm,
                                head_loss, lr_at, read_training_log, save_training_state,
                                split_train_val, total_loss, traj_loss, train, u_loss)


def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_traj, w.lambda_head, w.lambda_u, w.lambda_var, w.alpha, w.gamma) == (1, 1, 1, 0.3, 0.3, 0.98)
    with pytest.raises(BadConfig):
        LossWeights(gamma=0.9)
    with pytest.raises(BadConfig):
        LossWeights(alpha=-1)
    with pytest.raises(BadConfig):
        LossWeights.from_dict({"beta": 1})
    assert LossWeights.from_dict(w.to_dict()) == w


def test_discounts_decreasing():
    d = LossWeights().discounts(10)
    assert np.all(np.diff(d) < 0)
    assert abs(d[-1] - 0.817) < 1e-3
    assert d[0] == 0.98


def test_traj_loss_examples():
    gt = np.random.default_rng(0).normal(size=(10, 3))
    assert float(traj_loss(gt, gt).data) == pytest.approx(0, abs=1e-12)
    pred = gt.copy()
    pred[0, 1] += 1.0
    assert float(traj_loss(pred, gt, LossWeights(lambda_var=0)).data) == pytest.approx(0.98, abs=1e-12)
    # a constant offset leaves the temporal spread untouched
    shifted = gt + 0.5
    expected = 0.5 * 3 * LossWeights().discounts(10).sum()
    assert float(traj_loss(shifted, gt).data) == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ShapeMismatch):
        traj_loss(gt[:5], gt)


def test_traj_loss_spread_term_matches_formula():
    rng = np.random.default_rng(1)
    pred, gt = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    w = LossWeights()
    l1 = sum(w.gamma ** (i + 1) * np.abs(pred[i] - gt[i]).sum() for i in range(10))
    spread = ((pred.std(axis=0) - gt.std(axis=0)) ** 2).sum()
    assert float(traj_loss(pred, gt, w).data) == pytest.approx(l1 + 0.3 * spread, rel=1e-9)


def _yaw6d(deg, n=10):
    return np.tile(matrix_to_rot6d(rot_z(math.radians(deg))), (n, 1))


def test_head_loss_examples():
    gt = np.tile(IDENTITY_6D, (10, 1))
    assert float(head_loss(gt, gt).data) == pytest.approx(0.0, abs=1e-10)
    pred = gt.copy()
    pred[3] = _yaw6d(90, 1)[0]
    assert float(head_loss(pred, gt).data) == pytest.approx(0.4, abs=1e-10)
    assert float(head_loss(_yaw6d(180), gt).data) == pytest.approx(4.0, abs=1e-10)


def test_u_loss_examples():
    assert float(u_loss(np.array([0.4]), np.array([0.4])).data) == 0.0
    assert float(u_loss(np.array([0.3]), np.array([0.5])).data) == pytest.approx(0.04)
    assert float(u_loss(np.array([0.0]), np.array([1.0])).data) == 1.0
    with pytest.raises(OutOfRange):
        u_loss(np.array([0.2]), np.array([1.2]))


def test_aux_loss_examples():
    env_t = np.array([1, 0, 1, 0, 0], dtype=bool)
    beh_t = np.array([0, 1, 0, 0, 0, 1], dtype=bool)
    confident = float(aux_loss(np.where(env_t, 20.0, -20.0), np.where(beh_t, 20.0, -20.0), env_t, beh_t).data)
    assert confident < 1e-8
    assert float(aux_loss(np.zeros(5), np.zeros(6), env_t, beh_t).data) == pytest.approx(2 * math.log(2))
    with pytest.raises(ShapeMismatch):
        aux_loss(np.zeros(4), np.zeros(6), env_t, beh_t)


def test_aux_loss_matches_scalar_loop():
    rng = np.random.default_rng(2)
    env, beh = rng.normal(scale=3, size=(4, 5)), rng.normal(scale=3, size=(4, 6))
    env_t, beh_t = rng.integers(0, 2, (4, 5)), rng.integers(0, 2, (4, 6))

    def bce(x, y):
        p = 1 / (1 + math.exp(-x))
        return -(y * math.log(p) + (1 - y) * math.log(1 - p))

    expected = sum(np.mean([[bce(x, y) for x, y in zip(r, t)] for r, t in zip(lg, tg)])
                   for lg, tg in ((env, env_t), (beh, beh_t)))
    assert float(aux_loss(env, beh, env_t, beh_t).data) == pytest.approx(expected, rel=1e-12)


def test_total_loss_examples():
    ones = {k: 1.0 for k in ("traj", "head", "u", "aux")}
    assert float(total_loss(ones).data) == 3.3
    assert float(total_loss({k: 0.0 for k in ones}).data) == 0.0
    assert float(total_loss({**ones, "aux": 123.0}, LossWeights(alpha=0)).data) == 3.0
    doubled = float(total_loss({**ones, "traj": 2.5}, LossWeights(lambda_traj=2)).data)
    assert doubled == pytest.approx(2.5 * 2 + 1 + 1 + 0.3)
    with pytest.raises(NonFinite):
        total_loss({**ones, "head": math.nan})


def test_lr_schedule_endpoints_and_continuity():
    o = OptimizerState()
    total = 200 * 100
    warm = 2 * 100
    assert lr_at(0, total, o) == 0.0
    assert lr_at(warm, total, o) == 5e-5
    assert lr_at(warm + 1, total, o) == pytest.approx(5e-5, rel=1e-6)
    assert lr_at(total, total, o) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(warm // 2, total, o) == pytest.approx(2.5e-5)
    values = [lr_at(s, total, o) for s in range(warm, total + 1, 97)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(total + 1, total, o)


def test_adamw_hand_computed_step():
    o = OptimizerState(weight_decay=0.01)
    p = ad.Parameter(np.array([1.0]), decay=True)
    adamw_step([p], [np.array([1.0])], o, lr=0.1)
    # m_hat = v_hat = 1 after bias correction
    expected = 1.0 * (1 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert o.step == 1
    np.testing.assert_allclose(o.m[0], [0.1])
    np.testing.assert_allclose(o.v[0], [0.001])


def test_adamw_zero_grad_and_decay_only():
    o = OptimizerState(weight_decay=0.0)
    p = ad.Parameter(np.array([1.5, -2.0]), decay=True)
    adamw_step([p], [np.zeros(2)], o, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    o = OptimizerState(weight_decay=0.01)
    bias = ad.Parameter(np.array([1.5, -2.0]), decay=False)
    adamw_step([p, bias], [np.zeros(2), np.zeros(2)], o, lr=0.1)
    np.testing.assert_allclose(p.data, np.array([1.5, -2.0]) * (1 - 0.1 * 0.01), rtol=1e-15)
    np.testing.assert_array_equal(bias.data, [1.5, -2.0])
    with pytest.raises(ShapeMismatch):
        adamw_step([p], [np.zeros(3)], o, lr=0.1)


@given(st.floats(-5, 5), st.floats(0.1, 3.0))
@settings(max_examples=40, deadline=None)
def test_adamw_reduces_convex_quadratic(x0, a):
    p = ad.Parameter(np.array([x0]))
    o = OptimizerState(weight_decay=0.0)
    before = a * x0 ** 2
    # the first Adam step has length ~lr, so "small" is relative to |x0|
    adamw_step([p], [np.array([2 * a * x0])], o, lr=0.5 * abs(x0))
    assert a * p.data[0] ** 2 <= before


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    assert math.hypot(clipped[0][0], clipped[1][0]) == pytest.approx(1.0)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same[0] is grads[0]


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def smoke_windows():
    episodes = [synth_generate(random_world(s), s, episode_id=f"s{s}") for s in range(3)]
    batch = stack_windows(windows_from_episodes(episodes, stride=2))
    keep = np.sort(np.random.default_rng(0).permutation(len(batch))[:512])
    return batch.subset(keep)


def _net(batch, seed=0, **cfg):
    net = EgoCogNav(ModelConfig(dtype="float32", **cfg), seed=seed)
    net.stats = InputStats.fit(batch)
    return net


def test_smoke_training_reduces_loss(smoke_windows, tmp_path):
    assert len(smoke_windows) == 512
    net = _net(smoke_windows)
    opt = OptimizerState(lr_max=1e-3, epochs=30)
    result = train(net, smoke_windows, None, LossWeights(), opt, seed=0, log_path=tmp_path / "log.csv")
    first, last = result.history[0]["L_total"], result.history[-1]["L_total"]
    assert last <= 0.7 * first
    rows = read_training_log(tmp_path / "log.csv")
    assert [r["epoch"] for r in rows] == list(range(30))
    assert rows[-1]["L_total"] == last
    assert result.steps == 30 * 32


def test_training_is_deterministic(smoke_windows):
    small = smoke_windows.subset(np.arange(48))
    finals = []
    for _ in range(2):
        net = _net(small, d_model=16, n_fusion_layers=1, n_decoder_layers=1)
        result = train(net, small, None, LossWeights(), OptimizerState(lr_max=1e-3, epochs=2), seed=5)
        finals.append((result.final_loss, net.state_dict()))
    assert finals[0][0] == finals[1][0]
    for k, v in finals[0][1].items():
        np.testing.assert_array_equal(v, finals[1][1][k])


def test_resume_matches_uninterrupted_run(smoke_windows, tmp_path):
    small = smoke_windows.subset(np.arange(48))
    cfg = dict(d_model=16, n_fusion_layers=1, n_decoder_layers=1)

    full = _net(small, **cfg)
    train(full, small, None, LossWeights(), OptimizerState(lr_max=1e-3, epochs=3), seed=1)

    part = _net(small, **cfg)
    opt = OptimizerState(lr_max=1e-3, epochs=3)
    train(part, small, None, LossWeights(), opt, seed=1, stop_epoch=2)
    assert opt.step == 2 * 3
    save_training_state(tmp_path / "ck", part, opt, epoch=1, seed=1)
    from egocognav.training import load_optimizer
    from egocognav.model import load_network
    resumed, manifest = load_network(tmp_path / "ck")
    opt2 = OptimizerState(lr_max=1e-3, epochs=3, step=manifest["extra"]["step"])
    load_optimizer(tmp_path / "ck", resumed.parameters(), opt2)
    train(resumed, small, None, LossWeights(), opt2, seed=1, start_epoch=2)
    assert opt2.step == 9
    for k, v in full.state_dict().items():
        np.testing.assert_array_equal(resumed.state_dict()[k], v)


def test_checkpoint_records_loss_weights(smoke_windows, tmp_path):
    small = smoke_windows.subset(np.arange(32))
    train_b, val_b = split_train_val(small, 0.25, seed=0)
    assert len(val_b) == 8 and len(train_b) == 24
    net = _net(train_b, d_model=16, n_fusion_layers=1, n_decoder_layers=1)
    w = LossWeights(alpha=0.1, lambda_var=0.2)
    result = train(net, train_b, val_b, w, OptimizerState(lr_max=1e-3, epochs=2), seed=0,
                   checkpoint_dir=tmp_path / "best")
    from egocognav.model import load_network
    _, manifest = load_network(tmp_path / "best")
    assert manifest["extra"]["loss_weights"] == w.to_dict()
    assert manifest["extra"]["epoch"] == result.best_epoch
    assert result.best_val == min(r["val_total"] for r in result.history)
