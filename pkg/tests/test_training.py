import numpy as np
import pytest

from conftest import make_sequence
from firecast import data as dt
from firecast import model as mdl
from firecast import replay
from firecast import training as tr
from firecast.errors import ConfigurationError, UnsupportedVariantError
from firecast.model import Dims
from firecast.training import TrainConfig, TturSchedule


def make_batch(model, windows=3, k=4, seed=0, fire=None):
    rng = np.random.default_rng(seed)
    d = model.dims
    wins = []
    for _ in range(windows):
        obs = rng.uniform(0, 1, (k + 1, d.channels, d.height, d.width)).astype(np.float32)
        f = fire if fire is not None else (rng.random((k, d.height, d.width)) < 0.3).astype(np.float32)
        wins.append(replay.Window(obs=obs, fire=f, start_week=0))
    return replay.Minibatch(wins)


# ---------------------------------------------------------------------------
# schedule


def test_step_sizes_at_zero_are_constants():
    sched = TturSchedule(c_pred=0.3, a_pred=0.2, c_sys=0.1, a_sys=0.5)
    assert sched.step_sizes(0) == (0.3, 0.1)


def test_ratio_decay_analytic():
    sched = TturSchedule(c_pred=0.3, a_pred=0.2, c_sys=0.1, a_sys=0.5)
    ep0, es0 = sched.step_sizes(0)
    ep, es = sched.step_sizes(10_000)
    want = (1.0 + 10_000) ** (-(0.5 - 0.2))
    assert abs((es / ep) / (es0 / ep0) - want) < 1e-12


def test_ratio_monotone_decreasing_over_long_horizon():
    sched = TturSchedule()
    n = np.arange(0, 100_001, dtype=np.float64)
    ratio = (sched.c_sys * (1 + n) ** -sched.a_sys) / (sched.c_pred * (1 + n) ** -sched.a_pred)
    assert np.all(np.diff(ratio) < 0)


def test_exponent_ordering_enforced():
    with pytest.raises(ConfigurationError):
        TturSchedule(a_pred=0.5, a_sys=0.5)
    with pytest.raises(ConfigurationError):
        TturSchedule(a_pred=0.5, a_sys=1.1)


def test_ttur_step_sizes_function():
    sched = TturSchedule()
    assert tr.ttur_step_sizes(sched, 3) == sched.step_sizes(3)


# ---------------------------------------------------------------------------
# losses


def test_loss_sys_chance_level_on_random_binary_frames(tiny_dims):
    model = mdl.build_model("dynamic_autoenc", tiny_dims, seed=0)
    rng = np.random.default_rng(1)
    wins = []
    for _ in range(4):
        obs = (rng.random((5, tiny_dims.channels, 6, 6)) < 0.5).astype(np.float32)
        fire = (rng.random((4, 6, 6)) < 0.5).astype(np.float32)
        wins.append(replay.Window(obs=obs, fire=fire, start_week=0))
    value, grads = tr.loss_sys(replay.Minibatch(wins), model)
    assert abs(value - np.log(2.0)) < 0.2
    assert grads  # every system-side tensor received a gradient


def test_loss_sys_unsupported_variants(tiny_dims):
    for variant in ("gru_baseline", "static_generative"):
        model = mdl.build_model(variant, tiny_dims, seed=0)
        with pytest.raises(UnsupportedVariantError):
            tr.loss_sys(make_batch(model), model)


def test_loss_sys_gradient_matches_finite_differences():
    # 2-frame toy at float64; biases jittered off their zero init so the
    # window-start zero state does not sit exactly on relu kinks
    dims = Dims(channels=2, height=5, width=5, state=4, horizon=1)
    model = mdl.build_model("dynamic_autoenc", dims, seed=2)
    params = model.params.astype(np.float64)
    jitter = np.random.default_rng(52)
    for _, t in params.items():
        t.data += jitter.uniform(-0.2, 0.2, t.data.shape)
    model = mdl.ModelVariant(model.tag, dims, params, seed=2)
    batch = make_batch(model, windows=1, k=2, seed=3)
    from firecast import numerics as nm

    for name in ("enc.conv1.k", "rnn.uz", "dec_obs.fc.w", "enc.fc.b"):
        def f(_t):
            return tr.loss_sys_value(batch, model)

        err = nm.grad_check(f, model.params[name], h=1e-4)
        assert err < 1e-3, f"{name}: rel err {err}"


def test_loss_pred_chance_anchor(tiny_dims):
    model = mdl.build_model("dynamic_autoenc", tiny_dims, seed=4)
    rng = np.random.default_rng(5)
    fire = (rng.random((4, 6, 6)) < 0.5).astype(np.float32)
    value, _ = tr.loss_pred(make_batch(model, fire=fire), model)
    assert abs(value - np.log(2.0)) < 0.2


def test_loss_pred_gradients_restricted_to_fire_decoder(tiny_dims):
    model = mdl.build_model("dynamic_autoenc", tiny_dims, seed=6)
    _, grads = tr.loss_pred(make_batch(model), model)
    assert grads
    for name in grads:
        assert name.startswith("dec_fire.")
    for name, t in model.params.items():
        if not name.startswith("dec_fire."):
            assert t.grad is None


def test_loss_pred_trains_everything_on_baselines(tiny_dims):
    for variant in ("gru_baseline", "static_generative"):
        model = mdl.build_model(variant, tiny_dims, seed=7)
        _, grads = tr.loss_pred(make_batch(model), model)
        assert set(grads) == set(model.params.names())


def test_loss_pred_bias_fit_on_empty_targets(tiny_dims):
    model = mdl.build_model("dynamic_autoenc", tiny_dims, seed=8)
    empty = np.zeros((4, 6, 6), dtype=np.float32)
    state = tr.init_train_state(TrainConfig(state_size=tiny_dims.state, horizon=2, window=4,
                                            traj_len=8, batch_windows=3), tiny_dims)
    batch = make_batch(state.model, fire=empty, seed=9)
    from firecast.numerics import adam_step

    value = None
    for n in range(250):
        value, grads = tr.loss_pred(batch, state.model)
        eps_pred, _ = state.schedule.step_sizes(n)
        adam_step(state.pred_params, grads, state.adam_pred, lr=eps_pred)
    assert value < 0.1


def test_loss_pred_overfits_constant_binary_stream():
    # a constant, perfectly predictable stream is learned to low loss
    dims = Dims(channels=2, height=6, width=6, state=12, horizon=2)
    rng = np.random.default_rng(10)
    frame = (rng.random((2, 6, 6)) < 0.5).astype(np.float32)
    fire = (rng.random((6, 6)) < 0.3).astype(np.float32)
    obs = np.repeat(frame[None], 30, axis=0)
    fires = np.repeat(fire[None], 30, axis=0)
    data = dt.SequenceData(obs=obs, fire=fires)
    config = TrainConfig(state_size=12, horizon=2, window=4, traj_len=10,
                         batch_windows=3, iterations=600, seed=0)
    state, rows = tr.train_run(config, data)
    l_sys_tail = float(np.median([r[3] for r in rows[-50:]]))
    l_pred_tail = float(np.median([r[4] for r in rows[-50:]]))
    assert l_sys_tail < 0.05
    assert l_pred_tail < 0.05


# ---------------------------------------------------------------------------
# iteration / run plumbing


def test_train_iteration_deterministic(tiny_sequence, tiny_dims):
    def run():
        config = TrainConfig(state_size=8, horizon=2, window=4, traj_len=10,
                             batch_windows=3, iterations=50, seed=11)
        state, rows = tr.train_run(config, tiny_sequence)
        return state, rows

    s1, r1 = run()
    s2, r2 = run()
    assert r1 == r2
    for name in s1.model.params.names():
        assert np.array_equal(s1.model.params[name].data, s2.model.params[name].data)


def test_zero_c_sys_freezes_system_parameters(tiny_sequence):
    config = TrainConfig(state_size=8, horizon=2, window=4, traj_len=10,
                         batch_windows=3, iterations=20, seed=12, c_sys=0.0)
    dims = Dims(2, 6, 6, 8, 2)
    init = mdl.init_params(dims, config.seed)
    state, _ = tr.train_run(config, tiny_sequence)
    for name, t in state.model.params.items():
        if name.startswith("dec_fire."):
            continue
        assert np.array_equal(t.data, init[name].data), name


def test_train_run_zero_iterations(tiny_sequence):
    config = TrainConfig(state_size=8, horizon=2, window=4, traj_len=10,
                         batch_windows=3, iterations=0, seed=13)
    state, rows = tr.train_run(config, tiny_sequence)
    assert rows == []
    init = mdl.init_params(Dims(2, 6, 6, 8, 2), 13)
    for name, t in state.model.params.items():
        assert np.array_equal(t.data, init[name].data)


def test_train_run_rejects_short_dataset():
    data = make_sequence(weeks=5)
    config = TrainConfig(state_size=8, horizon=2, window=4, traj_len=6, iterations=1)
    with pytest.raises(ConfigurationError):
        tr.train_run(config, data)


def test_checkpoint_resume_equals_uninterrupted(tmp_path, tiny_sequence):
    kwargs = dict(state_size=8, horizon=2, window=4, traj_len=10, batch_windows=3, seed=14)
    full_dir = tmp_path / "full"
    config_full = TrainConfig(iterations=40, checkpoint_interval=20, **kwargs)
    state_full, rows_full = tr.train_run(config_full, tiny_sequence, out_dir=full_dir)

    resume_dir = tmp_path / "resumed"
    config_tail = TrainConfig(iterations=20, checkpoint_interval=20, **kwargs)
    state_res, rows_res = tr.train_run(
        config_tail, tiny_sequence, out_dir=resume_dir,
        resume_from=full_dir / "checkpoint_000020.fcpt",
    )
    assert rows_full[20:] == rows_res
    for name in state_full.model.params.names():
        assert np.array_equal(
            state_full.model.params[name].data, state_res.model.params[name].data
        )
    assert (full_dir / "checkpoint_final.fcpt").read_bytes() == (
        resume_dir / "checkpoint_final.fcpt"
    ).read_bytes()


def test_resume_rejects_mismatched_config(tmp_path, tiny_sequence):
    kwargs = dict(state_size=8, horizon=2, window=4, traj_len=10, batch_windows=3, seed=15)
    out = tmp_path / "run"
    tr.train_run(TrainConfig(iterations=5, checkpoint_interval=5, **kwargs), tiny_sequence, out_dir=out)
    bad = dict(kwargs, seed=16)
    with pytest.raises(ConfigurationError):
        tr.train_run(
            TrainConfig(iterations=5, **bad), tiny_sequence,
            resume_from=out / "checkpoint_000005.fcpt",
        )


def test_resume_rejects_different_dataset(tmp_path, tiny_sequence):
    kwargs = dict(state_size=8, horizon=2, window=4, traj_len=10, batch_windows=3, seed=17)
    out = tmp_path / "run"
    tr.train_run(TrainConfig(iterations=5, checkpoint_interval=5, **kwargs), tiny_sequence, out_dir=out)
    other = make_sequence(seed=99)
    with pytest.raises(ConfigurationError):
        tr.train_run(
            TrainConfig(iterations=5, **kwargs), other,
            resume_from=out / "checkpoint_000005.fcpt",
        )


def test_metrics_csv_schema(tiny_sequence):
    config = TrainConfig(state_size=8, horizon=2, window=4, traj_len=10,
                         batch_windows=3, iterations=3, seed=18)
    _, rows = tr.train_run(config, tiny_sequence)
    text = tr.metrics_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "n,eps_pred,eps_sys,l_sys,l_pred"
    assert len(lines) == 4
    assert lines[1].startswith("0,")


def test_baseline_history_has_nan_l_sys(tiny_sequence):
    config = TrainConfig(variant="static_generative", state_size=8, horizon=2, window=4,
                         traj_len=10, batch_windows=3, iterations=2, seed=19)
    _, rows = tr.train_run(config, tiny_sequence)
    assert all(np.isnan(r[3]) for r in rows)
    assert all(np.isfinite(r[4]) for r in rows)


# ---------------------------------------------------------------------------
# config parsing


def test_parse_config_text_roundtrip():
    text = """
    # training setup
    variant = gru_baseline
    iterations = 12   # short run
    c_pred = 0.005
    """
    values = tr.parse_config_text(text)
    config = TrainConfig.from_mapping(values)
    assert config.variant == "gru_baseline"
    assert config.iterations == 12
    assert config.c_pred == 0.005


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigurationError):
        TrainConfig.from_mapping({"learning_rate": "0.1"})


def test_malformed_config_line():
    with pytest.raises(ConfigurationError):
        tr.parse_config_text("iterations: 5")


def test_traj_len_must_cover_window_span():
    with pytest.raises(ConfigurationError):
        TrainConfig(window=10, horizon=4, traj_len=13)


def test_default_horizon_is_four_weeks():
    assert TrainConfig().horizon == 4
    assert Dims(channels=5, height=16, width=16).horizon == 4


def test_grid_pins_checked_against_dataset(tiny_sequence):
    config = TrainConfig(state_size=8, horizon=2, window=4, traj_len=10,
                         batch_windows=3, iterations=1, channels=9)
    with pytest.raises(ConfigurationError):
        tr.train_run(config, tiny_sequence)
