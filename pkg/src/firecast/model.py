"""The dynamic auto-encoder, its two ablation variants, and checkpoint I/O.

Three networks over weekly observation grids:

* encoder: conv stack mapping a ``[C, H, W]`` frame to a feature vector,
* recurrent cell: GRU folding features into a hidden state (the running
  estimate of the unobserved system state),
* obs decoder: reconstructs the next week's observation from the state,
* fire decoder: maps the state to a fire-risk map ``horizon`` weeks ahead.

Variants: ``dynamic_autoenc`` has all four networks, ``gru_baseline`` drops
the obs decoder, ``static_generative`` additionally drops the recurrence (its
"state" is the most recent frame's encoding).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    FormatError,
    UnsupportedVariantError,
)
from .numerics import ParamSet, Tensor

VARIANTS = ("dynamic_autoenc", "gru_baseline", "static_generative")

# Conv widths of the two encoder stages (decoders mirror them).
ENC_CH1 = 8
ENC_CH2 = 16

CHECKPOINT_MAGIC = b"FCPT1\0"

PRED_PREFIX = "dec_fire."


@dataclass(frozen=True)
class Dims:
    """Model geometry: grid channels/height/width, state width, horizon."""

    channels: int
    height: int
    width: int
    state: int = 64
    horizon: int = 4

    def __post_init__(self):
        for name in ("channels", "height", "width", "state", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"dims: {name} must be >= 1, got {getattr(self, name)}")

    # The stride-2 convs need odd inputs at both stages, so frames are
    # zero-padded up to the next size congruent to 1 mod 4 and decoder
    # outputs are cropped back.
    @property
    def pad_h(self) -> int:
        return (1 - self.height) % 4

    @property
    def pad_w(self) -> int:
        return (1 - self.width) % 4

    @property
    def enc_h(self) -> int:
        return (self.height + self.pad_h + 3) // 4

    @property
    def enc_w(self) -> int:
        return (self.width + self.pad_w + 3) // 4

    @property
    def enc_flat(self) -> int:
        return ENC_CH2 * self.enc_h * self.enc_w

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "state": self.state,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dims":
        return cls(
            channels=int(d["channels"]),
            height=int(d["height"]),
            width=int(d["width"]),
            state=int(d["state"]),
            horizon=int(d["horizon"]),
        )


@dataclass
class ObservationFrame:
    """One week's multi-channel grid; channel 0 is fire detection confidence."""

    channels: np.ndarray  # [C, H, W] in [0, 1]
    week_index: int

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3:
            raise DimensionError(f"observation frame must be [C, H, W], got {self.channels.shape}")
        if self.channels.size and (self.channels.min() < 0.0 or self.channels.max() > 1.0):
            raise DomainError("observation frame values must lie in [0, 1]")


@dataclass
class FireMap:
    """Per-pixel fire occupancy (ground truth) or risk probability (prediction)."""

    grid: np.ndarray  # [H, W]
    kind: str  # "ground_truth" | "predicted_risk"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise DimensionError(f"fire map must be [H, W], got {self.grid.shape}")
        if self.kind == "ground_truth":
            if not np.isin(self.grid, (0.0, 1.0)).all():
                raise DomainError("ground-truth fire maps must be binary")
        elif self.kind == "predicted_risk":
            if self.grid.size and (self.grid.min() <= 0.0 or self.grid.max() >= 1.0):
                raise DomainError("predicted risk maps must lie strictly in (0, 1)")
        else:
            raise DomainError(f"unknown fire map kind '{self.kind}'")


@dataclass
class HiddenState:
    """Recurrent state vector; index k estimates the system after week k-1."""

    vector: np.ndarray  # [S]
    week_index: int

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise DimensionError(f"hidden state must be a vector, got {self.vector.shape}")
        if not np.isfinite(self.vector).all():
            raise DomainError("hidden state must be finite")


@dataclass
class ModelVariant:
    tag: str
    dims: Dims
    params: ParamSet
    seed: int | None = None

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ConfigurationError(f"unknown model variant '{self.tag}'")

    @property
    def has_rnn(self) -> bool:
        return self.tag != "static_generative"

    @property
    def has_obs_decoder(self) -> bool:
        return self.tag == "dynamic_autoenc"

    def initial_state(self, week_index: int = 0) -> HiddenState:
        return HiddenState(np.zeros(self.dims.state, dtype=np.float32), week_index)


# ---------------------------------------------------------------------------
# parameter construction


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _param_plan(dims: Dims, tag: str) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every tensor, in checkpoint order. fan_in 0 = zeros."""
    c, s = dims.channels, dims.state
    flat = dims.enc_flat
    plan = [
        ("enc.conv1.k", (ENC_CH1, c, 3, 3), c * 9),
        ("enc.conv1.b", (ENC_CH1,), 0),
        ("enc.conv2.k", (ENC_CH2, ENC_CH1, 3, 3), ENC_CH1 * 9),
        ("enc.conv2.b", (ENC_CH2,), 0),
        ("enc.fc.w", (flat, s), flat),
        ("enc.fc.b", (s,), 0),
    ]
    if tag != "static_generative":
        for gate in ("z", "r", "h"):
            plan.append((f"rnn.w{gate}", (s, s), s))
            plan.append((f"rnn.u{gate}", (s, s), s))
            plan.append((f"rnn.b{gate}", (s,), 0))
    if tag == "dynamic_autoenc":
        plan += _decoder_plan("dec_obs.", dims, out_channels=c)
    plan += _decoder_plan(PRED_PREFIX, dims, out_channels=1)
    return plan


def _decoder_plan(prefix: str, dims: Dims, out_channels: int) -> list[tuple[str, tuple, int]]:
    s, flat = dims.state, dims.enc_flat
    return [
        (prefix + "fc.w", (s, flat), s),
        (prefix + "fc.b", (flat,), 0),
        (prefix + "conv1.k", (ENC_CH1, ENC_CH2, 3, 3), ENC_CH2 * 9),
        (prefix + "conv1.b", (ENC_CH1,), 0),
        (prefix + "conv2.k", (out_channels, ENC_CH1, 3, 3), ENC_CH1 * 9),
        (prefix + "conv2.b", (out_channels,), 0),
    ]


def init_params(dims: Dims, seed: int, variant: str = "dynamic_autoenc") -> ParamSet:
    """Fan-in scaled uniform weights (std sqrt(2/fan_in)), zero biases."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown model variant '{variant}'")
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, shape, fan_in in _param_plan(dims, variant):
        if fan_in:
            data = _he_uniform(rng, shape, fan_in)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params.add(name, Tensor(data, requires_grad=True))
    return params


def build_model(variant: str, dims: Dims, seed: int) -> ModelVariant:
    return ModelVariant(variant, dims, init_params(dims, seed, variant), seed=seed)


def sys_param_names(model: ModelVariant) -> list[str]:
    return [n for n in model.params.names() if not n.startswith(PRED_PREFIX)]


def pred_param_names(model: ModelVariant) -> list[str]:
    return [n for n in model.params.names() if n.startswith(PRED_PREFIX)]


# ---------------------------------------------------------------------------
# tensor-level networks (taped when a Tape is active; batched over axis 0)


def encode_t(x: Tensor, params: ParamSet, dims: Dims) -> Tensor:
    """``[B, C, H, W]`` frames -> ``[B, S]`` features."""
    if x.data.ndim != 4 or x.data.shape[1:] != (dims.channels, dims.height, dims.width):
        raise ConfigurationError(
            f"encode: frame batch {x.shape} does not match dims "
            f"(C={dims.channels}, H={dims.height}, W={dims.width})"
        )
    y = nm.pad2d(x, dims.pad_h, dims.pad_w)
    y = nm.relu(nm.bias_chw(nm.conv2d(y, params["enc.conv1.k"], stride=2, pad=1), params["enc.conv1.b"]))
    y = nm.relu(nm.bias_chw(nm.conv2d(y, params["enc.conv2.k"], stride=2, pad=1), params["enc.conv2.b"]))
    y = nm.reshape(y, (x.shape[0], dims.enc_flat))
    return nm.tanh(nm.linear(y, params["enc.fc.w"], params["enc.fc.b"]))


def _decode_t(h: Tensor, params: ParamSet, dims: Dims, prefix: str) -> Tensor:
    if h.data.ndim != 2 or h.shape[1] != dims.state:
        raise DimensionError(f"decode: state batch {h.shape} does not match S={dims.state}")
    b = h.shape[0]
    y = nm.relu(nm.linear(h, params[prefix + "fc.w"], params[prefix + "fc.b"]))
    y = nm.reshape(y, (b, ENC_CH2, dims.enc_h, dims.enc_w))
    y = nm.upsample2x(y)
    y = nm.relu(nm.bias_chw(nm.conv2d(y, params[prefix + "conv1.k"], stride=1, pad=1), params[prefix + "conv1.b"]))
    y = nm.upsample2x(y)
    y = nm.sigmoid(nm.bias_chw(nm.conv2d(y, params[prefix + "conv2.k"], stride=1, pad=1), params[prefix + "conv2.b"]))
    return nm.crop2d(y, dims.height, dims.width)


def decode_obs_t(h: Tensor, params: ParamSet, dims: Dims) -> Tensor:
    """``[B, S]`` states -> ``[B, C, H, W]`` next-observation predictions."""
    return _decode_t(h, params, dims, "dec_obs.")


def decode_fire_t(h: Tensor, params: ParamSet, dims: Dims) -> Tensor:
    """``[B, S]`` states -> ``[B, H, W]`` fire-risk maps ``horizon`` weeks out."""
    out = _decode_t(h, params, dims, PRED_PREFIX)
    return nm.reshape(out, (h.shape[0], dims.height, dims.width))


def state_update_t(model: ModelVariant, h: Tensor, x: Tensor) -> Tensor:
    """Consume one frame batch and return the next state batch."""
    feat = encode_t(x, model.params, model.dims)
    if model.has_rnn:
        return nm.gru_cell(feat, h, model.params.slice("rnn."))
    return feat


# ---------------------------------------------------------------------------
# domain-typed single-stream API (inference; never taped)


def _clip_prob(arr: np.ndarray) -> np.ndarray:
    # sigmoid saturates to exactly 0/1 in float32; keep outputs strictly inside
    eps = np.float32(nm.BCE_CLAMP)
    return np.clip(arr, eps, np.float32(1.0) - eps)


def encode(model: ModelVariant, frame: ObservationFrame) -> np.ndarray:
    """Feature vector of width S for one frame."""
    out = encode_t(Tensor(frame.channels[None]), model.params, model.dims)
    return out.data[0].copy()


def rnn_step(model: ModelVariant, h: HiddenState, feature: np.ndarray) -> HiddenState:
    """Advance the hidden state by one week given an encoded frame."""
    if not model.has_rnn:
        raise UnsupportedVariantError(f"variant '{model.tag}' has no recurrent cell")
    feature = np.asarray(feature, dtype=np.float32)
    if feature.shape != (model.dims.state,):
        raise DimensionError(
            f"rnn_step: feature {feature.shape} does not match S={model.dims.state}"
        )
    out = nm.gru_cell(
        Tensor(feature[None]), Tensor(h.vector[None]), model.params.slice("rnn.")
    )
    return HiddenState(out.data[0].copy(), h.week_index + 1)


def advance_state(model: ModelVariant, h: HiddenState, frame: ObservationFrame) -> HiddenState:
    """Consume one frame: GRU update, or plain re-encoding for the static variant."""
    out = state_update_t(model, Tensor(h.vector[None]), Tensor(frame.channels[None]))
    return HiddenState(out.data[0].copy(), h.week_index + 1)


def decode_obs(model: ModelVariant, h: HiddenState) -> ObservationFrame:
    """Predicted observation for week ``h.week_index``."""
    if not model.has_obs_decoder:
        raise UnsupportedVariantError(
            f"variant '{model.tag}' has no observation decoder"
        )
    out = decode_obs_t(Tensor(h.vector[None]), model.params, model.dims)
    return ObservationFrame(_clip_prob(out.data[0]), h.week_index)


def decode_fire(model: ModelVariant, h: HiddenState) -> FireMap:
    """Fire-risk map for week ``h.week_index + horizon``."""
    out = decode_fire_t(Tensor(h.vector[None]), model.params, model.dims)
    return FireMap(_clip_prob(out.data[0]), "predicted_risk")


@dataclass
class TrajectoryOutput:
    states: np.ndarray  # [K, S]: state after each consumed frame
    obs_preds: np.ndarray | None  # [K, C, H, W] or None for variants without it
    fire_preds: np.ndarray  # [K, H, W]: risk for weeks (k + horizon)
    week_indices: list[int] = field(default_factory=list)


def forward_trajectory(
    model: ModelVariant,
    frames: np.ndarray,
    h0: HiddenState | None = None,
) -> TrajectoryOutput:
    """Run the recursion over ``[K, C, H, W]`` frames from state ``h0``.

    Returns the K successive states, the obs prediction decoded from each
    state (absent on variants without the obs decoder), and the fire map
    decoded from each state.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise DomainError("forward_trajectory: need a non-empty [K, C, H, W] frame stack")
    h = model.initial_state() if h0 is None else h0
    states = []
    obs_preds = [] if model.has_obs_decoder else None
    fire_preds = []
    weeks = []
    for k in range(frames.shape[0]):
        h = advance_state(model, h, ObservationFrame(frames[k], h.week_index))
        states.append(h.vector)
        if obs_preds is not None:
            obs_preds.append(decode_obs(model, h).channels)
        fire_preds.append(decode_fire(model, h).grid)
        weeks.append(h.week_index)
    return TrajectoryOutput(
        states=np.stack(states),
        obs_preds=None if obs_preds is None else np.stack(obs_preds),
        fire_preds=np.stack(fire_preds),
        week_indices=weeks,
    )


# ---------------------------------------------------------------------------
# checkpoint container: JSON manifest + concatenated float32 payloads


def _manifest_tensors(params: ParamSet, extra: dict[str, np.ndarray]) -> list[tuple[str, np.ndarray]]:
    ordered = [(name, t.data) for name, t in params.items()]
    ordered += [(name, arr) for name, arr in extra.items()]
    return ordered


def save_checkpoint(
    path,
    model: ModelVariant,
    meta: dict | None = None,
    training: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
):
    """Write a checkpoint: manifest (variant, dims, seed, metadata, tensor
    list) followed by every tensor as little-endian float32 in list order."""
    extra = extra_tensors or {}
    ordered = _manifest_tensors(model.params, extra)
    manifest = {
        "format": "firecast-checkpoint",
        "version": 1,
        "variant": model.tag,
        "dims": model.dims.to_dict(),
        "seed": model.seed,
        "meta": meta or {},
        "training": training,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in ordered],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in ordered:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelVariant, dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (model, manifest, extra tensors)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte 0")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 8:
        raise FormatError(f"{path}: truncated header length at byte {off}")
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    if len(raw) < off + hlen:
        raise FormatError(f"{path}: truncated manifest at byte {off}")
    try:
        manifest = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest at byte {off}: {exc}") from exc
    off += hlen

    dims = Dims.from_dict(manifest["dims"])
    tag = manifest["variant"]
    expected_names = [name for name, _, _ in _param_plan(dims, tag)]
    params = ParamSet()
    extra: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if len(raw) < off + nbytes:
            raise FormatError(
                f"{path}: payload for tensor '{entry['name']}' truncated at byte {off}"
            )
        arr = np.frombuffer(raw[off : off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
        if entry["name"] in expected_names:
            params.add(entry["name"], Tensor(arr, requires_grad=True))
        else:
            extra[entry["name"]] = arr
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    missing = [n for n in expected_names if n not in params]
    if missing:
        raise FormatError(f"{path}: checkpoint is missing tensors {missing}")
    model = ModelVariant(tag, dims, params, seed=manifest.get("seed"))
    return model, manifest, extra
