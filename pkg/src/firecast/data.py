"""Synthetic partially-observed fire data, the GridStack container, CSV
ingestion, and the temporal train/validation split.

The simulator is a stochastic cellular automaton on a weekly clock. Its
latent per-cell fuel drives spread and burnout but is never emitted in any
observation channel, so the emitted stream is a genuinely partial view of the
system state. Observations add sensor noise and per-pixel detection dropout
on the fire channel.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, IngestionError

GRIDSTACK_MAGIC = b"GSTK1\0"

FIRE_CHANNEL = 0
FIRE_BINARIZE_THRESHOLD = 0.5

# Weeks needed to fit at least one default training window (K=12, T=4) with margin.
MIN_SYNTH_WEEKS = 26

WEEKS_PER_YEAR = 52


def week_date(week0: str, index: int) -> str:
    d = dt.date.fromisoformat(week0) + dt.timedelta(weeks=index)
    return d.isoformat()


# ---------------------------------------------------------------------------
# GridStack container


@dataclass
class GridStack:
    """Bit-exact container for a normalized weekly multi-channel grid series.

    ``values`` is ``[frames, channels, H, W]`` float32 in [0, 1], stored
    frame-major, channel-major, row-major. ``channel_min``/``channel_max``
    record the raw extremes used for normalization.
    """

    values: np.ndarray
    week0: str
    channel_names: list[str]
    channel_min: list[float]
    channel_max: list[float]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise DimensionError(
                f"grid stack values must be [frames, channels, H, W], got {self.values.shape}"
            )
        c = self.values.shape[1]
        if not (len(self.channel_names) == len(self.channel_min) == len(self.channel_max) == c):
            raise ConfigurationError(
                f"channel metadata lengths do not match {c} channels"
            )
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ConfigurationError("grid stack values must already be normalized to [0, 1]")
        dt.date.fromisoformat(self.week0)  # validates

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    def header(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "frame_count": self.frames,
            "week0": self.week0,
            "channel_names": self.channel_names,
            "channel_min": self.channel_min,
            "channel_max": self.channel_max,
        }


def write_stack(stack: GridStack, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(stack.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRIDSTACK_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(stack.values, dtype="<f4").tobytes())


def read_stack(path) -> GridStack:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(GRIDSTACK_MAGIC)] != GRIDSTACK_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    off = len(GRIDSTACK_MAGIC)
    if len(raw) < off + 8:
        raise FormatError(f"{path}: truncated header length field at byte {off}")
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    if len(raw) < off + hlen:
        raise FormatError(f"{path}: truncated header at byte {off}")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header at byte {off}: {exc}") from exc
    off += hlen
    try:
        shape = (
            int(header["frame_count"]),
            int(header["channels"]),
            int(header["height"]),
            int(header["width"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: header missing field {exc} at byte {off - hlen}") from exc
    expected = int(np.prod(shape)) * 4
    actual = len(raw) - off
    if actual != expected:
        raise FormatError(
            f"{path}: payload length mismatch at byte {off}: "
            f"expected {expected} bytes, found {actual}"
        )
    values = np.frombuffer(raw[off:], dtype="<f4").reshape(shape).copy()
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise FormatError(f"{path}: payload values outside [0, 1] at byte {off}")
    return GridStack(
        values=values,
        week0=header["week0"],
        channel_names=list(header["channel_names"]),
        channel_min=[float(v) for v in header["channel_min"]],
        channel_max=[float(v) for v in header["channel_max"]],
    )


def temporal_split(stack: GridStack, ratio: float = 0.70) -> tuple[GridStack, GridStack]:
    """First floor(ratio * frames) weeks -> train, remainder -> validation."""
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"split ratio must be in (0, 1), got {ratio}")
    n_train = math.floor(ratio * stack.frames)
    if n_train < 1 or n_train >= stack.frames:
        raise ConfigurationError(
            f"split of {stack.frames} frames at ratio {ratio} leaves an empty side"
        )
    train = replace(stack, values=stack.values[:n_train].copy())
    valid = replace(
        stack,
        values=stack.values[n_train:].copy(),
        week0=week_date(stack.week0, n_train),
    )
    return train, valid


# ---------------------------------------------------------------------------
# simulator


@dataclass
class SimConfig:
    height: int = 16
    width: int = 16
    channels: int = 5
    base_spread: float = 0.35       # per-neighbour ignition scale
    fuel_consumption: float = 0.12  # fuel burned per burning week
    extinguish_below: float = 0.05
    init_fuel_low: float = 0.6
    init_fuel_high: float = 1.0
    moisture_mid: float = 0.55
    moisture_amp: float = 0.35
    moisture_phase_week: int = 45   # driest week of the year
    moisture_noise: float = 0.02
    moisture_pattern_amp: float = 0.18  # amplitude of the advected moisture field
    advect_speed: float = 1.5       # cells/week the moisture pattern drifts with the wind
    wind_strength: float = 0.4
    wind_drift: float = 0.3         # std of weekly wind-angle random walk (radians)
    spark_attempts: int = 2         # ignition attempts injected per week
    noise_sigma: float = 0.05
    dropout_p: float = 0.3
    week0: str = "2000-01-03"

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ConfigurationError("simulator grid must be at least 2x2")
        if self.channels < 1:
            raise ConfigurationError("simulator needs at least the fire channel")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def seasonal_moisture(cfg: SimConfig, week: int) -> float:
    phase = 2.0 * math.pi * (week - cfg.moisture_phase_week) / WEEKS_PER_YEAR
    return float(np.clip(cfg.moisture_mid - cfg.moisture_amp * math.cos(phase), 0.0, 1.0))


def _smooth3(a: np.ndarray) -> np.ndarray:
    """3x3 box mean with edge-aware counts."""
    s = np.zeros_like(a)
    c = np.zeros_like(a)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(dy, 0), a.shape[0] + min(dy, 0))
            yd = slice(max(-dy, 0), a.shape[0] + min(-dy, 0))
            xs = slice(max(dx, 0), a.shape[1] + min(dx, 0))
            xd = slice(max(-dx, 0), a.shape[1] + min(-dx, 0))
            s[yd, xd] += a[ys, xs]
            c[yd, xd] += 1.0
    return s / c


@dataclass
class SimWorld:
    cfg: SimConfig
    fuel: np.ndarray
    moisture: np.ndarray
    burning: np.ndarray  # bool
    pattern: np.ndarray  # fixed smooth field in [-1, 1], advected by the wind
    drift: tuple[float, float]  # accumulated pattern displacement (rows, cols)
    wind_angle: float
    week: int
    rng: np.random.Generator

    @classmethod
    def create(cls, cfg: SimConfig, seed: int) -> "SimWorld":
        rng = np.random.default_rng([seed, 0])
        shape = (cfg.height, cfg.width)
        fuel = rng.uniform(cfg.init_fuel_low, cfg.init_fuel_high, size=shape).astype(np.float32)
        pattern = _smooth3(_smooth3(rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)))
        peak = max(float(np.abs(pattern).max()), 1e-6)
        pattern = (pattern / peak).astype(np.float32)
        world = cls(
            cfg=cfg,
            fuel=fuel,
            moisture=np.zeros(shape, dtype=np.float32),
            burning=np.zeros(shape, dtype=bool),
            pattern=pattern,
            drift=(0.0, 0.0),
            wind_angle=float(rng.uniform(0.0, 2.0 * math.pi)),
            week=0,
            rng=rng,
        )
        world.moisture = world._moisture_field()
        return world

    def _moisture_field(self) -> np.ndarray:
        base = seasonal_moisture(self.cfg, self.week)
        rolled = np.roll(
            self.pattern,
            (int(round(self.drift[0])), int(round(self.drift[1]))),
            axis=(0, 1),
        )
        noise = _smooth3(self.rng.normal(0.0, 1.0, size=self.pattern.shape).astype(np.float32))
        field = base + self.cfg.moisture_pattern_amp * rolled + self.cfg.moisture_noise * noise
        return np.clip(field, 0.0, 1.0).astype(np.float32)

    def burning_intensity(self) -> np.ndarray:
        return self.burning.astype(np.float32)

    def fire_truth(self) -> np.ndarray:
        """Binary occupancy: burning intensity thresholded at 0.5."""
        return (self.burning_intensity() >= FIRE_BINARIZE_THRESHOLD).astype(np.float32)


# Neighbour offsets (dy, dx) and the unit vector of spread direction.
_NEIGHBOURS = (
    (-1, 0, (0.0, -1.0)),
    (1, 0, (0.0, 1.0)),
    (0, -1, (-1.0, 0.0)),
    (0, 1, (1.0, 0.0)),
)


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift with zero fill; out[y, x] = a[y - dy, x - dx]."""
    out = np.zeros_like(a)
    ys = slice(max(dy, 0), a.shape[0] + min(dy, 0))
    xs = slice(max(dx, 0), a.shape[1] + min(dx, 0))
    yd = slice(max(-dy, 0), a.shape[0] + min(-dy, 0))
    xd = slice(max(-dx, 0), a.shape[1] + min(-dx, 0))
    out[ys, xs] = a[yd, xd]
    return out


def simulate_step(world: SimWorld) -> SimWorld:
    """Advance the automaton by one week (mutates and returns ``world``).

    Each burning cell tries to ignite each 4-neighbour with probability
    base * fuel_nbr * (1 - moisture_nbr) * wind_alignment; burning cells
    consume fuel at a fixed rate and extinguish below the fuel floor;
    moisture tracks a seasonal sinusoid plus smoothed noise.
    """
    cfg = world.cfg
    wx, wy = math.cos(world.wind_angle), math.sin(world.wind_angle)
    ignitable = (1.0 - world.moisture) * world.fuel
    not_ignite = np.ones_like(world.fuel)
    burning_f = world.burning.astype(np.float32)
    for dy, dx, (ux, uy) in _NEIGHBOURS:
        align = 1.0 + cfg.wind_strength * (ux * wx + uy * wy)
        p = np.clip(cfg.base_spread * ignitable * max(align, 0.0), 0.0, 1.0)
        not_ignite *= 1.0 - p * _shift(burning_f, dy, dx)
    p_ignite = 1.0 - not_ignite
    draws = world.rng.random(world.fuel.shape)
    new_fires = (
        (draws < p_ignite)
        & ~world.burning
        & (world.fuel > cfg.extinguish_below)
    )

    world.fuel = np.where(
        world.burning, np.maximum(world.fuel - cfg.fuel_consumption, 0.0), world.fuel
    ).astype(np.float32)
    survived = world.burning & (world.fuel >= cfg.extinguish_below)
    world.burning = survived | new_fires

    world.week += 1
    world.drift = (
        world.drift[0] + cfg.advect_speed * wy,
        world.drift[1] + cfg.advect_speed * wx,
    )
    world.moisture = world._moisture_field()
    world.wind_angle = float(world.wind_angle + world.rng.normal(0.0, cfg.wind_drift))
    return world


def inject_sparks(world: SimWorld, attempts: int | None = None):
    """Try to start new fires at random cells (success gated by fuel and moisture)."""
    cfg = world.cfg
    n = cfg.spark_attempts if attempts is None else attempts
    for _ in range(n):
        y = int(world.rng.integers(cfg.height))
        x = int(world.rng.integers(cfg.width))
        p = world.fuel[y, x] * (1.0 - world.moisture[y, x])
        if world.rng.random() < p and world.fuel[y, x] > cfg.extinguish_below:
            world.burning[y, x] = True


def observe(
    world: SimWorld, noise_sigma: float, dropout_p: float, seed: int
) -> np.ndarray:
    """Emit one ``[C, H, W]`` observation frame in [0, 1].

    Channel 0 is burning intensity plus Gaussian noise, with each pixel
    independently zeroed (missed detection) with probability ``dropout_p``.
    Climate channels are smoothed views of latent moisture and wind plus
    noise. Latent fuel is never emitted.
    """
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigurationError(f"dropout_p must be in [0, 1), got {dropout_p}")
    cfg = world.cfg
    rng = np.random.default_rng([seed, 1])
    shape = (cfg.height, cfg.width)

    def noisy(base):
        if noise_sigma > 0.0:
            base = base + rng.normal(0.0, noise_sigma, size=shape)
        else:
            rng.normal(0.0, 1.0, size=shape)  # keep the draw sequence fixed
        return np.clip(base, 0.0, 1.0).astype(np.float32)

    fire = noisy(world.burning_intensity())
    drop = rng.random(shape) < dropout_p
    fire = np.where(drop, 0.0, fire).astype(np.float32)

    wx, wy = math.cos(world.wind_angle), math.sin(world.wind_angle)
    ramp = np.linspace(-0.05, 0.05, cfg.width, dtype=np.float32)[None, :]

    def stretch(v):
        # push climate readings toward the rails so their week-to-week
        # movement dominates their pointwise entropy
        return 0.5 + 0.5 * np.tanh(3.0 * (v - 0.5))

    builders = [
        lambda: noisy(stretch(_smooth3(world.moisture))),
        lambda: noisy(np.full(shape, 0.5 + 0.5 * math.tanh(2.5 * wx), dtype=np.float32)),
        lambda: noisy(np.full(shape, 0.5 + 0.5 * math.tanh(2.5 * wy), dtype=np.float32)),
        lambda: noisy(stretch(1.0 - _smooth3(world.moisture) + ramp)),
    ]
    channels = [fire]
    k = 0
    while len(channels) < cfg.channels:
        channels.append(builders[k % len(builders)]())
        k += 1
    return np.stack(channels)


def _synth_channel_names(channels: int) -> list[str]:
    base = ["fire", "moisture_obs", "wind_u", "wind_v", "temp_proxy"]
    names = base[:channels]
    k = 0
    while len(names) < channels:
        names.append(f"{base[1 + k % 4]}_{k // 4 + 2}")
        k += 1
    return names


def generate_dataset(cfg: SimConfig, weeks: int, seed: int) -> tuple[GridStack, GridStack]:
    """Run the simulator for ``weeks`` and return (observations, fire truth).

    Fire truth frames are noise-free binary occupancy grids; observations
    carry the configured sensor noise and dropout. Deterministic per seed.
    """
    if weeks < MIN_SYNTH_WEEKS:
        raise ConfigurationError(
            f"synthetic dataset needs at least {MIN_SYNTH_WEEKS} weeks, got {weeks}"
        )
    world = SimWorld.create(cfg, seed)
    obs_frames = []
    fire_frames = []
    for w in range(weeks):
        inject_sparks(world)
        obs_frames.append(observe(world, cfg.noise_sigma, cfg.dropout_p, seed=[seed, 2, w]))
        fire_frames.append(world.fire_truth())
        simulate_step(world)
    names = _synth_channel_names(cfg.channels)
    obs = GridStack(
        values=np.stack(obs_frames),
        week0=cfg.week0,
        channel_names=names,
        channel_min=[0.0] * cfg.channels,
        channel_max=[1.0] * cfg.channels,
    )
    fire = GridStack(
        values=np.stack(fire_frames)[:, None],
        week0=cfg.week0,
        channel_names=["fire_truth"],
        channel_min=[0.0],
        channel_max=[1.0],
    )
    return obs, fire


# ---------------------------------------------------------------------------
# CSV raster ingestion


@dataclass
class QAReport:
    forward_filled: dict[str, list[int]] = field(default_factory=dict)

    @property
    def forward_fill_count(self) -> int:
        return sum(len(v) for v in self.forward_filled.values())

    def to_dict(self) -> dict:
        return {
            "forward_filled": self.forward_filled,
            "forward_fill_count": self.forward_fill_count,
        }


_WEEK_RE = re.compile(r"(\d+)")


def _week_of(path: Path) -> int:
    m = _WEEK_RE.findall(path.stem)
    if not m:
        raise IngestionError(f"{path}: no week index in file name")
    return int(m[-1])


def ingest_csv_rasters(directory, manifest: dict) -> tuple[GridStack, QAReport]:
    """Assemble a GridStack from per-channel, per-week CSV grids.

    ``manifest`` maps channel names to file glob patterns (``channels`` key)
    and may carry ``week0``. The trailing integer of each file name is its
    week index. Missing weeks inside the covered range are forward-filled
    from the previous week and recorded in the QA report. Each channel is
    min-max normalized to [0, 1] using its global extremes; a constant
    channel maps to 0.5.
    """
    directory = Path(directory)
    channels = manifest.get("channels")
    if not channels:
        raise IngestionError("ingestion manifest has no 'channels' mapping")
    week0 = manifest.get("week0", "1970-01-05")

    per_channel: dict[str, dict[int, np.ndarray]] = {}
    dims = None
    dims_src = None
    for name, pattern in channels.items():
        files = sorted(directory.glob(pattern))
        if not files:
            raise IngestionError(f"channel '{name}': no files match '{pattern}' in {directory}")
        grids = {}
        for f in files:
            try:
                grid = np.loadtxt(f, delimiter=",", dtype=np.float64, ndmin=2)
            except ValueError as exc:
                raise IngestionError(f"{f}: unparseable CSV grid: {exc}") from exc
            if dims is None:
                dims = grid.shape
                dims_src = f
            elif grid.shape != dims:
                raise IngestionError(
                    f"{f}: grid is {grid.shape} but {dims_src} is {dims}"
                )
            grids[_week_of(f)] = grid
        per_channel[name] = grids

    weeks = sorted({w for grids in per_channel.values() for w in grids})
    lo, hi = weeks[0], weeks[-1]
    full = list(range(lo, hi + 1))

    report = QAReport()
    raw = np.zeros((len(full), len(per_channel), *dims), dtype=np.float64)
    for ci, (name, grids) in enumerate(per_channel.items()):
        previous = None
        filled = []
        for wi, week in enumerate(full):
            grid = grids.get(week)
            if grid is None:
                if previous is None:
                    raise IngestionError(
                        f"channel '{name}': first covered week {week} is missing, "
                        "cannot forward-fill"
                    )
                grid = previous
                filled.append(week)
            raw[wi, ci] = grid
            previous = grid
        if filled:
            report.forward_filled[name] = filled

    mins, maxs = [], []
    values = np.zeros_like(raw, dtype=np.float32)
    for ci in range(raw.shape[1]):
        cmin = float(raw[:, ci].min())
        cmax = float(raw[:, ci].max())
        mins.append(cmin)
        maxs.append(cmax)
        if cmax > cmin:
            values[:, ci] = ((raw[:, ci] - cmin) / (cmax - cmin)).astype(np.float32)
        else:
            values[:, ci] = 0.5  # degenerate range
    stack = GridStack(
        values=values,
        week0=week_date(week0, lo),
        channel_names=list(per_channel),
        channel_min=mins,
        channel_max=maxs,
    )
    return stack, report


# ---------------------------------------------------------------------------
# training/evaluation pairing


@dataclass
class SequenceData:
    """Aligned observation and ground-truth fire arrays for one time span."""

    obs: np.ndarray  # [n, C, H, W]
    fire: np.ndarray  # [n, H, W] binary
    week0: str = "2000-01-03"

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.fire = np.asarray(self.fire, dtype=np.float32)
        if self.obs.ndim != 4 or self.fire.ndim != 3:
            raise DimensionError(
                f"sequence arrays must be [n, C, H, W] and [n, H, W], "
                f"got {self.obs.shape} and {self.fire.shape}"
            )
        if self.obs.shape[0] != self.fire.shape[0] or self.obs.shape[2:] != self.fire.shape[1:]:
            raise DimensionError(
                f"sequence obs {self.obs.shape} and fire {self.fire.shape} do not align"
            )
        if not np.isin(self.fire, (0.0, 1.0)).all():
            raise ConfigurationError("fire targets must be binary")

    def __len__(self) -> int:
        return self.obs.shape[0]


def fire_targets_from_stack(stack: GridStack) -> np.ndarray:
    """Binarize the fire channel at the standard threshold."""
    return (stack.values[:, FIRE_CHANNEL] >= FIRE_BINARIZE_THRESHOLD).astype(np.float32)


def sequence_from_stacks(obs: GridStack, fire: GridStack | None = None) -> SequenceData:
    """Pair an observation stack with ground truth.

    Without an explicit fire stack, targets are derived by thresholding the
    observation fire channel.
    """
    if fire is None:
        targets = fire_targets_from_stack(obs)
    else:
        if fire.frames != obs.frames or (fire.height, fire.width) != (obs.height, obs.width):
            raise ConfigurationError(
                f"fire stack {fire.values.shape} does not align with "
                f"observation stack {obs.values.shape}"
            )
        if fire.week0 != obs.week0:
            raise ConfigurationError(
                f"fire stack starts {fire.week0} but observations start {obs.week0}"
            )
        targets = (fire.values[:, 0] >= FIRE_BINARIZE_THRESHOLD).astype(np.float32)
    return SequenceData(obs=obs.values.copy(), fire=targets, week0=obs.week0)
