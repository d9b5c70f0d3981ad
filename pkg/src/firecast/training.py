"""Two-time-scale stochastic training.

Two loss surfaces share one sampled minibatch of trajectory windows:

* ``loss_sys``: mean BCE between each window's one-step observation
  predictions and the true next frames; its gradient trains the encoder,
  recurrent cell, and observation decoder.
* ``loss_pred``: mean BCE between the fire maps decoded from each window
  state and the ground-truth maps ``horizon`` weeks ahead; its gradient
  trains the fire decoder only (states are treated as constants).

Both parameter groups take Adam steps whose learning rates follow separate
vanishing schedules with eps_sys(n) / eps_pred(n) -> 0, so the fire decoder
tracks the slower-moving state estimator. The baseline variants have no
observation decoder and train end to end through ``loss_pred`` alone on the
fast schedule.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from . import replay
from .data import SequenceData
from .errors import ConfigurationError, TrainingError, UnsupportedVariantError
from .model import Dims, ModelVariant
from .numerics import AdamState, ParamSet, Tape, Tensor, adam_step
from . import numerics as nm


@dataclass
class TturSchedule:
    """Vanishing step sizes eps(n) = c * (1 + n) ** -a per parameter group.

    Requires 0 < a_pred < a_sys <= 1 so the ratio eps_sys/eps_pred decreases
    monotonically to zero. c_sys may be zero to freeze the slow group.
    """

    c_pred: float = 2e-2
    a_pred: float = 0.10
    c_sys: float = 2e-3
    a_sys: float = 0.35

    def __post_init__(self):
        if not 0.0 < self.a_pred < self.a_sys <= 1.0:
            raise ConfigurationError(
                f"schedule exponents must satisfy 0 < a_pred < a_sys <= 1, "
                f"got a_pred={self.a_pred}, a_sys={self.a_sys}"
            )
        if self.c_pred <= 0.0 or self.c_sys < 0.0:
            raise ConfigurationError(
                f"schedule constants must satisfy c_pred > 0, c_sys >= 0, "
                f"got c_pred={self.c_pred}, c_sys={self.c_sys}"
            )

    def step_sizes(self, n: int) -> tuple[float, float]:
        if n < 0:
            raise ConfigurationError(f"iteration index must be >= 0, got {n}")
        return (
            self.c_pred * (1.0 + n) ** (-self.a_pred),
            self.c_sys * (1.0 + n) ** (-self.a_sys),
        )


def ttur_step_sizes(schedule: TturSchedule, n: int) -> tuple[float, float]:
    """(eps_pred, eps_sys) at iteration n."""
    return schedule.step_sizes(n)


@dataclass
class TrainConfig:
    variant: str = "dynamic_autoenc"
    state_size: int = 64
    horizon: int = 4
    window: int = 12          # K: unroll length per sampled window
    batch_windows: int = 8    # L: windows per minibatch
    buffer_capacity: int = 64
    traj_len: int = 32        # frames per trajectory pushed to the buffer
    iterations: int = 500
    seed: int = 0
    checkpoint_interval: int = 0
    c_pred: float = 2e-2
    a_pred: float = 0.10
    c_sys: float = 2e-3
    a_sys: float = 0.35
    grad_clip: float = 5.0
    # optional grid pins, checked against the dataset header before training
    channels: int | None = None
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if self.variant not in mdl.VARIANTS:
            raise ConfigurationError(f"unknown model variant '{self.variant}'")
        if self.window < 1 or self.horizon < 1:
            raise ConfigurationError("window and horizon must be >= 1")
        if self.traj_len < self.window + self.horizon:
            raise ConfigurationError(
                f"traj_len {self.traj_len} shorter than window span "
                f"{self.window + self.horizon}"
            )
        if self.batch_windows < 1 or self.buffer_capacity < 1:
            raise ConfigurationError("batch_windows and buffer_capacity must be >= 1")
        if self.iterations < 0 or self.checkpoint_interval < 0:
            raise ConfigurationError("iterations and checkpoint_interval must be >= 0")

    def schedule(self) -> TturSchedule:
        return TturSchedule(self.c_pred, self.a_pred, self.c_sys, self.a_sys)

    def check_grid(self, channels: int, height: int, width: int):
        for name, have in (("channels", channels), ("height", height), ("width", width)):
            want = getattr(self, name)
            if want is not None and want != have:
                raise ConfigurationError(
                    f"config pins {name}={want} but the dataset grid has {have}"
                )

    _INT_KEYS = (
        "state_size", "horizon", "window", "batch_windows", "buffer_capacity",
        "traj_len", "iterations", "seed", "checkpoint_interval",
        "channels", "height", "width",
    )
    _FLOAT_KEYS = ("c_pred", "a_pred", "c_sys", "a_sys", "grad_clip")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        for key, raw in values.items():
            if key == "variant":
                kwargs[key] = str(raw)
            elif key in cls._INT_KEYS:
                kwargs[key] = None if raw is None else int(raw)
            elif key in cls._FLOAT_KEYS:
                kwargs[key] = float(raw)
            else:
                raise ConfigurationError(f"unknown training config key '{key}'")
        return cls(**kwargs)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, val = body.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def parse_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# losses


def _zeros_state(batch: int, dims: Dims) -> Tensor:
    return Tensor(np.zeros((batch, dims.state), dtype=np.float32))


def _step_major(frames: np.ndarray) -> np.ndarray:
    """[L, K, ...] window-major -> [K*L, ...] step-major flat batch."""
    n_win, k_steps = frames.shape[:2]
    return np.ascontiguousarray(frames.transpose(1, 0, *range(2, frames.ndim))).reshape(
        k_steps * n_win, *frames.shape[2:]
    )


def _unroll_states(
    model: ModelVariant, inputs: np.ndarray, n_win: int, k_steps: int
) -> list[Tensor]:
    """States h_0..h_{k_steps-1} from the first ``k_steps - 1`` input frames.

    The encoder runs once over all frames as a single batch (it does not
    depend on the state); only the recurrence is sequential. Taped when a
    tape is active.
    """
    dims = model.dims
    states = [_zeros_state(n_win, dims)]
    if k_steps == 1:
        return states
    feats = mdl.encode_t(Tensor(inputs), model.params, dims)  # [(k-1)*L, S]
    featsr = nm.reshape(feats, (k_steps - 1, n_win, dims.state))
    h = states[0]
    gates = model.params.slice("rnn.") if model.has_rnn else None
    for k in range(k_steps - 1):
        feat = nm.take0(featsr, k)
        h = nm.gru_cell(feat, h, gates) if model.has_rnn else feat
        states.append(h)
    return states


def loss_sys_value(batch: replay.Minibatch, model: ModelVariant) -> Tensor:
    """Forward pass of the one-step observation loss (records on the active
    tape): mean BCE between the decoded next-week predictions and the true
    next frames over every window and step."""
    if not model.has_obs_decoder:
        raise UnsupportedVariantError(
            f"loss_sys is undefined for variant '{model.tag}' (no observation decoder)"
        )
    obs = batch.obs_stack()  # [L, K+1, C, H, W]
    n_win, k1 = obs.shape[:2]
    k_steps = k1 - 1
    dims = model.dims
    # states h_1..h_K: one frame further than the fire loss's h_0..h_{K-1}
    feats = mdl.encode_t(Tensor(_step_major(obs[:, :k_steps])), model.params, dims)
    featsr = nm.reshape(feats, (k_steps, n_win, dims.state))
    h = _zeros_state(n_win, dims)
    states = []
    for k in range(k_steps):
        h = nm.gru_cell(nm.take0(featsr, k), h, model.params.slice("rnn."))
        states.append(h)
    flat = nm.reshape(nm.stack0(states), (k_steps * n_win, dims.state))
    preds = mdl.decode_obs_t(flat, model.params, dims)
    return nm.bce(preds, Tensor(_step_major(obs[:, 1:])))


def loss_pred_value(batch: replay.Minibatch, model: ModelVariant) -> Tensor:
    """Forward pass of the horizon fire loss (records on the active tape).

    For the dynamic auto-encoder the unrolled states are computed off-tape,
    so the gradient reaches only the fire decoder; the baselines run fully
    on-tape and train end to end through this loss.
    """
    obs = batch.obs_stack()
    fire = batch.fire_stack()  # [L, K, H, W]
    n_win, k_steps = fire.shape[:2]
    dims = model.dims
    inputs = _step_major(obs[:, : k_steps - 1]) if k_steps > 1 else None
    targets = _step_major(fire)
    if model.tag == "dynamic_autoenc":
        with nm.no_tape():
            states = _unroll_states(model, inputs, n_win, k_steps)
        flat = Tensor(np.concatenate([s.data for s in states]))
    else:
        states = _unroll_states(model, inputs, n_win, k_steps)
        flat = nm.reshape(nm.stack0(states), (k_steps * n_win, dims.state))
    preds = mdl.decode_fire_t(flat, model.params, dims)
    return nm.bce(preds, Tensor(targets))


def _run_loss(builder, batch, model) -> tuple[float, dict[str, np.ndarray]]:
    model.params.zero_grads()
    with Tape() as tape:
        loss = builder(batch, model)
        tape.backward(loss)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"{builder.__name__} is non-finite ({value})")
    return value, {name: t.grad for name, t in model.params.items() if t.grad is not None}


def loss_sys(batch: replay.Minibatch, model: ModelVariant) -> tuple[float, dict[str, np.ndarray]]:
    """One-step observation BCE plus the gradients of every encoder, RNN,
    and observation-decoder tensor."""
    value, grads = _run_loss(loss_sys_value, batch, model)
    return value, {n: g for n, g in grads.items() if not n.startswith(mdl.PRED_PREFIX)}


def loss_pred(batch: replay.Minibatch, model: ModelVariant) -> tuple[float, dict[str, np.ndarray]]:
    """Horizon fire-map BCE plus gradients (fire decoder only for the
    dynamic auto-encoder; all parameters for the baselines)."""
    return _run_loss(loss_pred_value, batch, model)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the gradient dict in place to a global norm cap; returns the norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# Algorithm state and loop


@dataclass
class TrainState:
    model: ModelVariant
    schedule: TturSchedule
    adam_pred: AdamState
    adam_sys: AdamState | None
    rng: np.random.Generator
    n: int = 0
    cursor: int = 0  # total stream frames consumed
    online_h: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    chunk_obs: list = field(default_factory=list)
    chunk_fire: list = field(default_factory=list)
    chunk_start: int = 0
    loss_history: list[tuple] = field(default_factory=list)  # (n, eps_pred, eps_sys, l_sys, l_pred)

    @property
    def sys_params(self) -> ParamSet:
        return self.model.params.subset(lambda n: not n.startswith(mdl.PRED_PREFIX))

    @property
    def pred_params(self) -> ParamSet:
        return self.model.params.subset(lambda n: n.startswith(mdl.PRED_PREFIX))


def init_train_state(config: TrainConfig, dims: Dims) -> TrainState:
    model = mdl.build_model(config.variant, dims, config.seed)
    two_scale = config.variant == "dynamic_autoenc"
    state = TrainState(
        model=model,
        schedule=config.schedule(),
        adam_pred=AdamState(
            model.params.subset(lambda n: n.startswith(mdl.PRED_PREFIX))
            if two_scale
            else model.params
        ),
        adam_sys=(
            AdamState(model.params.subset(lambda n: not n.startswith(mdl.PRED_PREFIX)))
            if two_scale
            else None
        ),
        rng=np.random.default_rng([config.seed, 3]),
    )
    state.online_h = np.zeros(dims.state, dtype=np.float32)
    return state


def _consume_frame(
    state: TrainState, buffer: replay.TrajectoryBuffer, dataset: SequenceData, traj_len: int
):
    """Advance the online state by one stream frame and chunk it for replay.

    The stream cycles over the dataset; the online state and the chunk
    restart at each wrap so trajectories never span the discontinuity.
    """
    n_frames = len(dataset)
    pos = state.cursor % n_frames
    if pos == 0:
        state.online_h = np.zeros(state.model.dims.state, dtype=np.float32)
        state.chunk_obs = []
        state.chunk_fire = []
        state.chunk_start = 0
    frame = dataset.obs[pos]
    out = mdl.state_update_t(
        state.model, Tensor(state.online_h[None]), Tensor(frame[None])
    )
    state.online_h = out.data[0].copy()
    if not state.chunk_obs:
        state.chunk_start = pos
    state.chunk_obs.append(frame)
    state.chunk_fire.append(dataset.fire[pos])
    if len(state.chunk_obs) >= traj_len:
        replay.push(
            buffer,
            replay.Trajectory(
                obs=np.stack(state.chunk_obs),
                fire=np.stack(state.chunk_fire),
                start_week=state.chunk_start,
            ),
        )
        state.chunk_obs = []
        state.chunk_fire = []
    state.cursor += 1


def train_iteration(
    state: TrainState,
    buffer: replay.TrajectoryBuffer,
    dataset: SequenceData,
    config: TrainConfig,
    traj_len: int | None = None,
) -> tuple:
    """One outer-loop iteration: stream one frame, sample a minibatch, take
    one Adam step per parameter group, and advance the schedule."""
    traj_len = traj_len or min(config.traj_len, len(dataset))
    _consume_frame(state, buffer, dataset, traj_len)
    batch = replay.sample(buffer, config.batch_windows, config.window, config.horizon, state.rng)

    try:
        if state.model.tag == "dynamic_autoenc":
            l_sys, g_sys = loss_sys(batch, state.model)
            l_pred, g_pred = loss_pred(batch, state.model)
            eps_pred, eps_sys = state.schedule.step_sizes(state.n)
            clip_grads(g_pred, config.grad_clip)
            clip_grads(g_sys, config.grad_clip)
            adam_step(state.pred_params, g_pred, state.adam_pred, lr=eps_pred)
            adam_step(state.sys_params, g_sys, state.adam_sys, lr=eps_sys)
        else:
            l_sys = float("nan")
            l_pred, g_all = loss_pred(batch, state.model)
            eps_pred, eps_sys = state.schedule.step_sizes(state.n)
            clip_grads(g_all, config.grad_clip)
            adam_step(state.model.params, g_all, state.adam_pred, lr=eps_pred)
    except TrainingError as exc:
        raise TrainingError(f"iteration {state.n}: {exc}") from exc

    row = (state.n, eps_pred, eps_sys, l_sys, l_pred)
    state.loss_history.append(row)
    state.n += 1
    return row


# ---------------------------------------------------------------------------
# full runs, checkpointing, resume

METRICS_COLUMNS = ("n", "eps_pred", "eps_sys", "l_sys", "l_pred")


def metrics_csv(rows) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for n, eps_pred, eps_sys, l_sys, l_pred in rows:
        lines.append(
            f"{n},{eps_pred!r},{eps_sys!r},{float(l_sys)!r},{float(l_pred)!r}"
        )
    return "\n".join(lines) + "\n"


def _dataset_fingerprint(dataset: SequenceData) -> dict:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(dataset.obs).tobytes())
    digest.update(np.ascontiguousarray(dataset.fire).tobytes())
    digest.update(dataset.week0.encode("utf-8"))
    return {"frames": len(dataset), "sha256": digest.hexdigest()}


def _training_manifest(state: TrainState, config: TrainConfig, dataset: SequenceData) -> dict:
    rng_state = state.rng.bit_generator.state
    # only resume-relevant config keys: segment-local values (iterations,
    # checkpoint interval) would break bitwise resume equality
    cfg = {key: getattr(config, key) for key in _RESUME_MUST_MATCH}
    return {
        "n": state.n,
        "cursor": state.cursor,
        "adam_pred_t": state.adam_pred.t,
        "adam_sys_t": state.adam_sys.t if state.adam_sys is not None else None,
        "rng": json.loads(json.dumps(rng_state)),
        "config": cfg,
        "dataset": _dataset_fingerprint(dataset),
    }


def _extra_tensors(state: TrainState) -> dict[str, np.ndarray]:
    extra = {"train.online_h": state.online_h}
    for name in state.adam_pred.m:
        extra[f"adam.pred.m.{name}"] = state.adam_pred.m[name]
        extra[f"adam.pred.v.{name}"] = state.adam_pred.v[name]
    if state.adam_sys is not None:
        for name in state.adam_sys.m:
            extra[f"adam.sys.m.{name}"] = state.adam_sys.m[name]
            extra[f"adam.sys.v.{name}"] = state.adam_sys.v[name]
    return extra


def save_train_checkpoint(path, state: TrainState, config: TrainConfig, dataset: SequenceData):
    mdl.save_checkpoint(
        path,
        state.model,
        meta={"iterations_completed": state.n},
        training=_training_manifest(state, config, dataset),
        extra_tensors=_extra_tensors(state),
    )


_RESUME_MUST_MATCH = (
    "variant", "state_size", "horizon", "window", "batch_windows",
    "buffer_capacity", "traj_len", "seed", "c_pred", "a_pred", "c_sys",
    "a_sys", "grad_clip",
)


def load_train_state(path, config: TrainConfig, dataset: SequenceData) -> TrainState:
    model, manifest, extra = mdl.load_checkpoint(path)
    training = manifest.get("training")
    if not training:
        raise ConfigurationError(f"{path}: not a training checkpoint, cannot resume")
    saved_cfg = training["config"]
    for key in _RESUME_MUST_MATCH:
        if saved_cfg.get(key) != getattr(config, key):
            raise ConfigurationError(
                f"resume config mismatch on '{key}': checkpoint has "
                f"{saved_cfg.get(key)!r}, run has {getattr(config, key)!r}"
            )
    if training["dataset"] != _dataset_fingerprint(dataset):
        raise ConfigurationError(f"{path}: checkpoint was trained on a different dataset")

    two_scale = model.tag == "dynamic_autoenc"
    pred_group = (
        model.params.subset(lambda n: n.startswith(mdl.PRED_PREFIX)) if two_scale else model.params
    )
    adam_pred = AdamState(pred_group)
    adam_pred.t = training["adam_pred_t"]
    for name in adam_pred.m:
        adam_pred.m[name] = extra[f"adam.pred.m.{name}"].copy()
        adam_pred.v[name] = extra[f"adam.pred.v.{name}"].copy()
    adam_sys = None
    if two_scale:
        adam_sys = AdamState(model.params.subset(lambda n: not n.startswith(mdl.PRED_PREFIX)))
        adam_sys.t = training["adam_sys_t"]
        for name in adam_sys.m:
            adam_sys.m[name] = extra[f"adam.sys.m.{name}"].copy()
            adam_sys.v[name] = extra[f"adam.sys.v.{name}"].copy()

    rng = np.random.default_rng()
    rng.bit_generator.state = training["rng"]
    state = TrainState(
        model=model,
        schedule=config.schedule(),
        adam_pred=adam_pred,
        adam_sys=adam_sys,
        rng=rng,
        n=int(training["n"]),
        cursor=int(training["cursor"]),
    )
    state.online_h = extra["train.online_h"].copy()
    return state


def _rebuild_stream(state: TrainState, buffer: replay.TrajectoryBuffer, dataset: SequenceData, traj_len: int):
    """Re-derive buffer contents and the open chunk from the consumed-frame
    count: pushes are a pure function of the dataset and the cursor."""
    n_frames = len(dataset)
    chunk_obs: list = []
    chunk_fire: list = []
    chunk_start = 0
    for c in range(state.cursor):
        pos = c % n_frames
        if pos == 0:
            chunk_obs = []
            chunk_fire = []
        if not chunk_obs:
            chunk_start = pos
        chunk_obs.append(dataset.obs[pos])
        chunk_fire.append(dataset.fire[pos])
        if len(chunk_obs) >= traj_len:
            replay.push(
                buffer,
                replay.Trajectory(
                    obs=np.stack(chunk_obs),
                    fire=np.stack(chunk_fire),
                    start_week=chunk_start,
                ),
            )
            chunk_obs = []
            chunk_fire = []
    state.chunk_obs = chunk_obs
    state.chunk_fire = chunk_fire
    state.chunk_start = chunk_start


def train_run(
    config: TrainConfig,
    dataset: SequenceData,
    out_dir=None,
    resume_from=None,
) -> tuple[TrainState, list[tuple]]:
    """Run Algorithm-1 training for ``config.iterations`` iterations.

    Writes periodic and final checkpoints plus a metrics CSV when ``out_dir``
    is given. ``resume_from`` continues bitwise-identically from a training
    checkpoint written against the same config and dataset.
    """
    config.check_grid(dataset.obs.shape[1], dataset.obs.shape[2], dataset.obs.shape[3])
    span = config.window + config.horizon
    if len(dataset) < span:
        raise ConfigurationError(
            f"dataset of {len(dataset)} weeks is shorter than the window span {span}"
        )
    traj_len = min(config.traj_len, len(dataset))
    dims = Dims(
        channels=dataset.obs.shape[1],
        height=dataset.obs.shape[2],
        width=dataset.obs.shape[3],
        state=config.state_size,
        horizon=config.horizon,
    )
    buffer = replay.TrajectoryBuffer(config.buffer_capacity, span, rng_seed=config.seed)
    if resume_from is not None:
        state = load_train_state(resume_from, config, dataset)
        if state.model.dims != dims:
            raise ConfigurationError(
                f"checkpoint dims {state.model.dims} do not match dataset dims {dims}"
            )
        _rebuild_stream(state, buffer, dataset, traj_len)
    else:
        state = init_train_state(config, dims)
        while len(buffer) == 0:
            _consume_frame(state, buffer, dataset, traj_len)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for _ in range(config.iterations):
        train_iteration(state, buffer, dataset, config, traj_len)
        if (
            out_dir is not None
            and config.checkpoint_interval > 0
            and state.n % config.checkpoint_interval == 0
        ):
            save_train_checkpoint(
                out_dir / f"checkpoint_{state.n:06d}.fcpt", state, config, dataset
            )

    rows = list(state.loss_history)
    if out_dir is not None:
        save_train_checkpoint(out_dir / "checkpoint_final.fcpt", state, config, dataset)
        (out_dir / "metrics.csv").write_text(metrics_csv(rows))
    return state, rows
