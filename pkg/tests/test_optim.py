import math

import numpy as np
import pytest

from selfseg import optim, unet
from selfseg.optim import LabelSpec, TrainConfig, TrainState

from conftest import tiny_pool


def test_iterations_per_epoch():
    assert optim.iterations_per_epoch(9500, 24) == 396
    assert optim.iterations_per_epoch(48, 24) == 2
    assert optim.iterations_per_epoch(1, 24) == 1
    with pytest.raises(ValueError):
        optim.iterations_per_epoch(0, 24)


def test_cosine_schedule_values():
    cfg = TrainConfig()
    assert optim.lr_at(cfg, 0) == pytest.approx(5e-4, abs=1e-12)
    assert optim.lr_at(cfg, 5) == pytest.approx(3e-4, abs=1e-12)
    assert optim.lr_at(cfg, 10 - 1e-9) == pytest.approx(1e-4, abs=1e-12)
    assert optim.lr_at(cfg, 10) == pytest.approx(5e-4, abs=1e-12)
    assert optim.lr_at(cfg, 20) == pytest.approx(3e-4, abs=1e-12)
    assert optim.restart_interval(cfg, 0) == (0, 10)
    assert optim.restart_interval(cfg, 12.5) == (10, 20)
    assert optim.restart_interval(cfg, 30) == (30, 40)
    assert optim.restart_interval(cfg, 69.9) == (30, 40)


def test_schedule_is_monotone_within_intervals():
    cfg = TrainConfig()
    xs = np.linspace(0, 69.99, 2000)
    lrs = np.array([optim.lr_at(cfg, x) for x in xs])
    starts = np.array([optim.restart_interval(cfg, x)[0] for x in xs])
    for s in np.unique(starts):
        seg = lrs[starts == s]
        assert np.all(np.diff(seg) <= 1e-18)
    assert lrs.min() >= 1e-4 - 1e-15 and lrs.max() <= 5e-4 + 1e-15


def test_sgd_momentum_worked_example():
    p = {"w": np.array([1.0, 2.0])}
    vel = {}
    optim.sgd_momentum_step(p, {"w": np.array([1.0, -1.0])}, vel, lr=0.1, momentum=0.5)
    np.testing.assert_allclose(p["w"], [0.9, 2.1])
    np.testing.assert_allclose(vel["w"], [1.0, -1.0])
    optim.sgd_momentum_step(p, {"w": np.array([1.0, 1.0])}, vel, lr=0.1, momentum=0.5)
    # v = 0.5*[1, -1] + [1, 1] = [1.5, 0.5]
    np.testing.assert_allclose(vel["w"], [1.5, 0.5])
    np.testing.assert_allclose(p["w"], [0.75, 2.05])


def test_select_checkpoint_earliest_minimum():
    st = TrainState(history=[{"epoch": 0, "mean_val_loss": 3.0},
                             {"epoch": 1, "mean_val_loss": 1.0},
                             {"epoch": 2, "mean_val_loss": 1.0}])
    assert optim.select_checkpoint(st) == 1
    with pytest.raises(ValueError):
        optim.select_checkpoint(TrainState())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def small_net(seed=0, p=0.3):
    return unet.build(unet.UNetConfig(depth=2, base_features=2, out_channels=3, dropout_p=p), seed)


def snapshot(params, state=None):
    arrs = {k: v.copy() for k, v in params.state_dict().items()}
    vel = {} if state is None else {k: v.copy() for k, v in state.velocities.items()}
    return arrs, vel


def test_validate_epoch_is_pure():
    pool = tiny_pool(4)
    params = small_net()
    cfg = TrainConfig(batch_size=2, seed=1)
    state = TrainState()
    optim.run_epoch(params, pool, cfg, state, "train")
    arrs, vel = snapshot(params, state)
    it = state.iteration
    loss1 = optim.run_epoch(params, pool, cfg, state, "validate")
    loss2 = optim.run_epoch(params, pool, cfg, state, "validate")
    assert loss1 == loss2        # dropout inactive: repeated validation is identical
    a2, v2 = snapshot(params, state)
    assert state.iteration == it
    for k in arrs:
        np.testing.assert_array_equal(arrs[k], a2[k])
    for k in vel:
        np.testing.assert_array_equal(vel[k], v2[k])


def test_train_epoch_updates_and_counts_iterations():
    pool = tiny_pool(5)
    params = small_net()
    cfg = TrainConfig(batch_size=2, seed=0)
    state = TrainState()
    before, _ = snapshot(params)
    seen = []
    optim.run_epoch(params, pool, cfg, state, "train",
                    on_labels=lambda it, idx, lab: seen.extend(idx.tolist()))
    assert state.iteration == 3
    assert sorted(seen) == list(range(5))     # each tile once per epoch
    assert any(not np.array_equal(before[k], v) for k, v in params.trainable().items())


def test_training_is_deterministic_and_resumable():
    pool, val = tiny_pool(6, seed=1), tiny_pool(3, seed=2)
    cfg = TrainConfig(batch_size=2, max_epochs=3, seed=5, restart0_epochs=1)
    pa = small_net(3)
    sa, best_a = optim.train(pa, pool, val, cfg)

    pb = small_net(3)
    sb, best_b = optim.train(pb, pool, val, TrainConfig(**{**cfg.__dict__, "max_epochs": 2}))
    # resume from serialized state
    resumed = TrainState.from_meta(sb.meta(), {k: v.copy() for k, v in sb.velocities.items()})
    sb2, best_b2 = optim.train(pb, pool, val, cfg, state=resumed, best=best_b)

    assert sa.history == sb2.history
    assert sa.best_epoch == sb2.best_epoch
    for k, v in pa.state_dict().items():
        np.testing.assert_array_equal(v, pb.state_dict()[k])
    for k, v in best_a.state_dict().items():
        np.testing.assert_array_equal(v, best_b2.state_dict()[k])


def test_best_epoch_has_lowest_validation_loss():
    pool, val = tiny_pool(6, seed=1), tiny_pool(3, seed=2)
    st, _ = optim.train(small_net(), pool, val, TrainConfig(batch_size=3, max_epochs=4))
    vals = [r["mean_val_loss"] for r in st.history]
    assert st.best_epoch == int(np.argmin(vals))
    assert st.best_val_loss == min(vals)
    assert [r["epoch"] for r in st.history] == [0, 1, 2, 3]


def test_ss_mode_training_runs_with_fixed_masks():
    pool = tiny_pool(4, fixed=True)
    seen = []

    def hook(it, idx, lab):
        for j, l in zip(idx, lab):
            fixed = pool.fixed[j]
            seen.append(bool(np.all(l[fixed >= 0] == fixed[fixed >= 0])))

    optim.train(small_net(), pool, None, TrainConfig(batch_size=2, max_epochs=1),
                LabelSpec("SS"), on_labels=hook)
    assert seen and all(seen)


def test_velocity_reset_on_restart():
    pool = tiny_pool(2)
    st = TrainState()
    sizes = []
    # one iteration per epoch; the label hook runs before that iteration's update
    hook = lambda it, idx, lab: sizes.append(len(st.velocities))
    for reset, expected in ((True, [0, 0, 0]), (False, None)):
        st.__init__()
        sizes.clear()
        cfg = TrainConfig(batch_size=2, max_epochs=3, restart0_epochs=1, restart_mult=1,
                          reset_velocity_on_restart=reset)
        optim.train(small_net(), pool, None, cfg, state=st, on_labels=hook)
        if expected is not None:
            assert sizes == expected
        else:
            assert sizes[0] == 0 and sizes[1] > 0


def test_loss_csv_roundtrip(tmp_path):
    hist = [{"epoch": 0, "mean_train_loss": 1.5, "mean_val_loss": 1.25, "lr": 5e-4},
            {"epoch": 1, "mean_train_loss": 1.0, "mean_val_loss": None, "lr": 3e-4}]
    optim.write_loss_csv(tmp_path / "l.csv", hist)
    assert optim.read_loss_csv(tmp_path / "l.csv") == hist
    text = (tmp_path / "l.csv").read_text().splitlines()
    assert text[0] == "epoch,mean_train_loss,mean_val_loss,lr"
    assert math.isclose(float(text[1].split(",")[1]), 1.5)
