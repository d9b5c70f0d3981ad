import numpy as np
import pytest

from firecast import data as dt
from firecast.data import GridStack, SimConfig, SimWorld
from firecast.errors import ConfigurationError, FormatError, IngestionError


def rand_stack(seed=0, frames=8, channels=3, h=5, w=6):
    rng = np.random.default_rng(seed)
    return GridStack(
        values=rng.uniform(0, 1, (frames, channels, h, w)).astype(np.float32),
        week0="2001-01-01",
        channel_names=[f"c{i}" for i in range(channels)],
        channel_min=[0.0] * channels,
        channel_max=[1.0] * channels,
    )


# ---------------------------------------------------------------------------
# simulator


def test_no_spread_when_base_is_zero():
    cfg = SimConfig(height=10, width=10, base_spread=0.0)
    world = SimWorld.create(cfg, seed=1)
    world.burning[4:6, 4:6] = True
    counts = []
    for _ in range(20):
        counts.append(int(world.burning.sum()))
        dt.simulate_step(world)
    counts.append(int(world.burning.sum()))
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_saturated_moisture_blocks_ignition():
    cfg = SimConfig(height=8, width=8, base_spread=0.9, moisture_noise=0.0)
    world = SimWorld.create(cfg, seed=2)
    world.moisture[...] = 1.0
    world.burning[4, 4] = True
    before = world.burning.copy()
    dt.simulate_step(world)
    assert not (world.burning & ~before).any()


def test_burned_fraction_monotone_in_base_spread():
    means = []
    for base in (0.1, 0.3, 0.5):
        total = 0.0
        for seed in range(500):
            cfg = SimConfig(height=8, width=8, base_spread=base, moisture_mid=0.4,
                            moisture_amp=0.2, fuel_consumption=0.05)
            world = SimWorld.create(cfg, seed=seed)
            world.burning[4, 4] = True
            for _ in range(6):
                dt.simulate_step(world)
            total += (world.fuel < cfg.init_fuel_low).mean() + world.burning.mean()
        means.append(total / 500)
    assert means[0] < means[1] < means[2]


def test_fuel_monotonically_non_increasing():
    cfg = SimConfig(height=8, width=8)
    world = SimWorld.create(cfg, seed=3)
    world.burning[2:5, 2:5] = True
    prev = world.fuel.copy()
    for _ in range(30):
        dt.simulate_step(world)
        dt.inject_sparks(world)
        assert (world.fuel <= prev + 1e-7).all()
        prev = world.fuel.copy()


# ---------------------------------------------------------------------------
# observe


def test_observe_noiseless_channel0_is_intensity():
    cfg = SimConfig(height=8, width=8)
    world = SimWorld.create(cfg, seed=4)
    world.burning[1:3, 1:3] = True
    frame = dt.observe(world, noise_sigma=0.0, dropout_p=0.0, seed=0)
    assert np.array_equal(frame[0], world.burning_intensity())


def test_observe_dropout_misses_burning_pixels():
    cfg = SimConfig(height=8, width=8)
    world = SimWorld.create(cfg, seed=5)
    world.burning[2:6, 2:6] = True
    missed = 0
    total = 0
    for draw in range(1000):
        frame = dt.observe(world, noise_sigma=0.0, dropout_p=0.9, seed=draw)
        missed += int((frame[0][world.burning] == 0.0).sum())
        total += int(world.burning.sum())
    assert missed / total >= 0.80


def test_observe_output_range():
    cfg = SimConfig(height=8, width=8, channels=6)
    world = SimWorld.create(cfg, seed=6)
    world.burning[3, 3] = True
    for draw in range(20):
        frame = dt.observe(world, noise_sigma=0.3, dropout_p=0.4, seed=draw)
        assert frame.shape == (6, 8, 8)
        assert frame.min() >= 0.0 and frame.max() <= 1.0


def test_observe_never_emits_fuel():
    # changing hidden fuel leaves every observation channel unchanged
    cfg = SimConfig(height=8, width=8)
    a = SimWorld.create(cfg, seed=7)
    b = SimWorld.create(cfg, seed=7)
    b.fuel = np.clip(b.fuel * 0.21, 0.0, 1.0)
    fa = dt.observe(a, noise_sigma=0.05, dropout_p=0.2, seed=9)
    fb = dt.observe(b, noise_sigma=0.05, dropout_p=0.2, seed=9)
    assert np.array_equal(fa, fb)


# ---------------------------------------------------------------------------
# generate_dataset


def test_generate_dataset_deterministic_bytes(tmp_path):
    cfg = SimConfig(height=8, width=8)
    for name, seed in (("a", 9), ("b", 9)):
        obs, fire = dt.generate_dataset(cfg, 30, seed=seed)
        dt.write_stack(obs, tmp_path / f"{name}_obs.gstk")
        dt.write_stack(fire, tmp_path / f"{name}_fire.gstk")
    assert (tmp_path / "a_obs.gstk").read_bytes() == (tmp_path / "b_obs.gstk").read_bytes()
    assert (tmp_path / "a_fire.gstk").read_bytes() == (tmp_path / "b_fire.gstk").read_bytes()


def test_generate_dataset_frame_count_and_truth():
    cfg = SimConfig(height=8, width=8)
    obs, fire = dt.generate_dataset(cfg, 40, seed=10)
    assert obs.frames == 40 and fire.frames == 40
    assert np.isin(fire.values, (0.0, 1.0)).all()


def test_generate_dataset_minimum_weeks():
    with pytest.raises(ConfigurationError):
        dt.generate_dataset(SimConfig(height=8, width=8), dt.MIN_SYNTH_WEEKS - 1, seed=0)


def test_fire_seasonality_autumn_exceeds_spring():
    spring, autumn = [], []
    for seed in range(20):
        cfg = SimConfig(height=12, width=12)
        _, fire = dt.generate_dataset(cfg, 104, seed=seed)
        burned = fire.values[:, 0].mean(axis=(1, 2))
        weeks = np.arange(104) % 52
        spring.append(burned[(weeks >= 13) & (weeks < 26)].mean())
        autumn.append(burned[(weeks >= 39) & (weeks < 52)].mean())
    assert np.mean(autumn) > np.mean(spring)


# ---------------------------------------------------------------------------
# GridStack container


def test_stack_roundtrip_bitwise(tmp_path):
    for seed in range(5):
        stack = rand_stack(seed)
        path = tmp_path / f"s{seed}.gstk"
        dt.write_stack(stack, path)
        again = dt.read_stack(path)
        dt.write_stack(again, tmp_path / "again.gstk")
        assert path.read_bytes() == (tmp_path / "again.gstk").read_bytes()
        assert np.array_equal(stack.values, again.values)
        assert stack.header() == again.header()


def test_stack_truncated_payload_has_offset(tmp_path):
    stack = rand_stack(1)
    path = tmp_path / "s.gstk"
    dt.write_stack(stack, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError) as err:
        dt.read_stack(path)
    assert "byte" in str(err.value) and "mismatch" in str(err.value)


def test_stack_bad_magic(tmp_path):
    path = tmp_path / "s.gstk"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(FormatError) as err:
        dt.read_stack(path)
    assert "byte 0" in str(err.value)


def test_stack_trailing_bytes_rejected(tmp_path):
    stack = rand_stack(2)
    path = tmp_path / "s.gstk"
    dt.write_stack(stack, path)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(FormatError):
        dt.read_stack(path)


def test_stack_payload_arithmetic(tmp_path):
    # 11 channels, 30x30, 1014 weekly frames
    stack = GridStack(
        values=np.zeros((1014, 11, 30, 30), dtype=np.float32),
        week0="2000-11-01",
        channel_names=[f"c{i}" for i in range(11)],
        channel_min=[0.0] * 11,
        channel_max=[1.0] * 11,
    )
    path = tmp_path / "big.gstk"
    dt.write_stack(stack, path)
    raw = path.read_bytes()
    hlen = int.from_bytes(raw[6:14], "little")
    payload = len(raw) - 14 - hlen
    assert payload == 11 * 30 * 30 * 1014 * 4


# ---------------------------------------------------------------------------
# ingestion


def write_csv(path, grid):
    path.write_text("\n".join(",".join(str(v) for v in row) for row in grid))


def test_ingest_normalizes_minmax(tmp_path):
    write_csv(tmp_path / "temp_w000.csv", [[0.0, 10.0], [5.0, 10.0]])
    stack, report = dt.ingest_csv_rasters(tmp_path, {"channels": {"temp": "temp_w*.csv"}})
    assert stack.channel_min == [0.0] and stack.channel_max == [10.0]
    assert np.allclose(stack.values[0, 0], [[0.0, 1.0], [0.5, 1.0]])
    assert report.forward_fill_count == 0


def test_ingest_constant_channel_maps_to_half(tmp_path):
    write_csv(tmp_path / "flat_w000.csv", [[3.0, 3.0], [3.0, 3.0]])
    stack, _ = dt.ingest_csv_rasters(tmp_path, {"channels": {"flat": "flat_w*.csv"}})
    assert np.all(stack.values == 0.5)


def test_ingest_forward_fill_counts_deleted_weeks(tmp_path):
    rng = np.random.default_rng(12)
    deleted = {2, 5}
    for week in range(8):
        if week in deleted:
            continue
        write_csv(tmp_path / f"fire_w{week:03d}.csv", rng.uniform(0, 1, (3, 3)))
    for week in range(8):
        write_csv(tmp_path / f"wet_w{week:03d}.csv", rng.uniform(0, 1, (3, 3)))
    stack, report = dt.ingest_csv_rasters(
        tmp_path, {"channels": {"fire": "fire_w*.csv", "wet": "wet_w*.csv"}}
    )
    assert stack.frames == 8
    assert report.forward_fill_count == len(deleted)
    assert report.forward_filled["fire"] == sorted(deleted)
    # filled frames equal the previous week's (normalized) frame
    assert np.array_equal(stack.values[2, 0], stack.values[1, 0])


def test_ingest_dimension_mismatch_names_file(tmp_path):
    write_csv(tmp_path / "a_w000.csv", [[1.0, 2.0], [3.0, 4.0]])
    write_csv(tmp_path / "a_w001.csv", [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    with pytest.raises(IngestionError) as err:
        dt.ingest_csv_rasters(tmp_path, {"channels": {"a": "a_w*.csv"}})
    assert "a_w001" in str(err.value)


def test_ingest_missing_first_week_rejected(tmp_path):
    write_csv(tmp_path / "a_w001.csv", [[1.0]])
    write_csv(tmp_path / "b_w000.csv", [[1.0]])
    write_csv(tmp_path / "b_w001.csv", [[2.0]])
    with pytest.raises(IngestionError):
        dt.ingest_csv_rasters(tmp_path, {"channels": {"a": "a_w*.csv", "b": "b_w*.csv"}})


# ---------------------------------------------------------------------------
# temporal split


def test_split_100_frames():
    stack = rand_stack(3, frames=100)
    train, valid = dt.temporal_split(stack, 0.70)
    assert train.frames == 70 and valid.frames == 30


def test_split_floor_arithmetic():
    stack = rand_stack(4, frames=10)
    train, valid = dt.temporal_split(stack, 0.70)
    assert train.frames == 7 and valid.frames == 3


def test_split_weeks_are_contiguous():
    rng = np.random.default_rng(5)
    for _ in range(20):
        frames = int(rng.integers(4, 60))
        stack = rand_stack(int(rng.integers(0, 1000)), frames=frames)
        train, valid = dt.temporal_split(stack, 0.70)
        assert train.frames + valid.frames == frames
        assert valid.week0 == dt.week_date(train.week0, train.frames)
        assert np.array_equal(np.concatenate([train.values, valid.values]), stack.values)


def test_split_empty_side_rejected():
    stack = rand_stack(6, frames=2)
    with pytest.raises(ConfigurationError):
        dt.temporal_split(stack, 0.2)  # floor(0.4) = 0 training frames
    with pytest.raises(ConfigurationError):
        dt.temporal_split(stack, 1.0)
    with pytest.raises(ConfigurationError):
        dt.temporal_split(stack, 0.0)


def test_sequence_from_stacks_thresholds_channel0():
    obs = rand_stack(8, frames=6, channels=2)
    seq = dt.sequence_from_stacks(obs)
    assert np.array_equal(seq.fire, (obs.values[:, 0] >= 0.5).astype(np.float32))


def test_normalization_invertible_from_header(tmp_path):
    rng = np.random.default_rng(21)
    raw = rng.uniform(-40.0, 80.0, (4, 3, 3))
    for week in range(4):
        write_csv(tmp_path / f"temp_w{week:03d}.csv", raw[week])
    stack, _ = dt.ingest_csv_rasters(tmp_path, {"channels": {"temp": "temp_w*.csv"}})
    lo, hi = stack.channel_min[0], stack.channel_max[0]
    recovered = stack.values[:, 0].astype(np.float64) * (hi - lo) + lo
    assert np.abs(recovered - raw).max() < 1e-4
