import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egocognav.episodes import (
    BEHAVIOR_LABELS, Episode, WorldConfig, decode_feature_cache, encode_feature_cache,
    extract_windows, four_way_junction, parse_gaze_imu_tsv, parse_gpx, parse_joystick_csv,
    random_world, read_dataset, read_episode, resample_10hz, savgol_smooth, straight_corridor,
    synth_generate, window_count, write_dataset, write_episode)
from egocognav.episodes.data import mask_bits
from egocognav.errors import (BadConfig, BadMagic, BadWindow, EmptyStream, LengthMismatch,
                              MissingColumn, ParseError, TooShort)
from egocognav.geometry import relative_rotation_l1, rot6d_to_matrix

GPX = """<?xml version="1.0"?>
<gpx version="1.1" xmlns="http://www.topografix.com/GPX/1/1">
<trk><trkseg>
<trkpt lat="48.1000" lon="11.5000"><time>2024-05-01T10:00:00Z</time></trkpt>
<trkpt lat="48.1001" lon="11.5000"><time>2024-05-01T10:00:01Z</time></trkpt>
<trkpt lat="48.1002" lon="11.5001"><time>2024-05-01T10:00:02Z</time></trkpt>
</trkseg></trk></gpx>
"""


def test_parse_gpx():
    fixes = parse_gpx(GPX)
    assert len(fixes) == 3
    assert fixes[1][0] - fixes[0][0] == 1.0
    assert fixes[2][1:] == (48.1002, 11.5001)


def test_parse_gpx_out_of_order_reports_line():
    bad = GPX.replace("10:00:02Z", "09:59:00Z")
    with pytest.raises(ParseError) as info:
        parse_gpx(bad)
    assert info.value.line == 6
    with pytest.raises(ParseError):
        parse_gpx(GPX.replace("<time>2024-05-01T10:00:01Z</time>", ""))


def test_gaze_tsv_clamps_and_counts():
    text = "timestamp\tgaze_u\tgaze_v\tgyro_z\n0.0\t0.5\t0.5\t0.1\n0.1\t1.2\t-0.1\t0.2\n"
    table = parse_gaze_imu_tsv(text)
    np.testing.assert_array_equal(table.u, [0.5, 1.0])
    np.testing.assert_array_equal(table.v, [0.5, 0.0])
    assert table.n_clamped == 2
    np.testing.assert_array_equal(table.imu["gyro_z"], [0.1, 0.2])


def test_tables_report_missing_columns_and_bad_lines():
    with pytest.raises(MissingColumn) as info:
        parse_gaze_imu_tsv("timestamp\tgaze_u\n0\t0.5\n")
    assert info.value.line == 1
    with pytest.raises(ParseError) as info:
        parse_joystick_csv("timestamp,magnitude\n0.0,0.1\n0.1,oops\n")
    assert info.value.line == 3
    with pytest.raises(ParseError) as info:
        parse_joystick_csv("timestamp,magnitude\n0.0,0.1\n0.2,0.3\n0.1,0.3\n")
    assert info.value.line == 4


def test_joystick_clamped():
    assert parse_joystick_csv("timestamp,magnitude\n0,1.5\n1,-0.2\n") == [(0.0, 1.0), (1.0, 0.0)]


def polyfit_smooth(y, window, order):
    """Reference: least-squares polynomial per window; edges evaluated from the end windows."""
    n, half = len(y), window // 2
    out = np.empty(n)
    x = np.arange(window)
    for i in range(n):
        lo = min(max(i - half, 0), n - window)
        coef = np.polyfit(x, y[lo:lo + window], order)
        out[i] = np.polyval(coef, i - lo)
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(16, 60), st.integers(0, 10_000))
def test_savgol_reproduces_polynomials(degree, n, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / 10.0
    y = np.polyval(rng.normal(size=degree + 1), t)
    np.testing.assert_allclose(savgol_smooth(y), y, atol=1e-8 * (1 + np.abs(y).max()))


def test_savgol_matches_polyfit_oracle():
    y = np.random.default_rng(0).normal(size=40)
    np.testing.assert_allclose(savgol_smooth(y, 15, 3), polyfit_smooth(y, 15, 3), atol=1e-9)


def test_savgol_bad_window():
    with pytest.raises(BadWindow):
        savgol_smooth(np.zeros(30), 14, 3)
    with pytest.raises(BadWindow):
        savgol_smooth(np.zeros(30), 3, 3)
    with pytest.raises(BadWindow):
        savgol_smooth(np.zeros(10), 15, 3)


def brute_nearest(ts, values, grid):
    out = []
    for g in grid:
        best = 0
        for j in range(len(ts)):
            if abs(ts[j] - g) < abs(ts[best] - g):
                best = j
        out.append(values[best])
    return np.array(out)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=2, max_size=30, unique=True))
def test_resample_nearest_matches_brute_force(stamps):
    ts = np.sort(np.array(stamps))
    if ts[-1] - ts[0] < 0.1:
        return
    vals = np.arange(len(ts), dtype=float)
    grid, out = resample_10hz(ts, vals, mode="nearest")
    assert np.all(grid >= ts[0]) and np.all(grid <= ts[-1])
    np.testing.assert_array_equal(out, brute_nearest(ts, vals, grid))


def test_resample_examples():
    grid, out = resample_10hz([0.0, 0.15, 0.3], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(grid, [0.0, 0.1, 0.2, 0.3])
    # 0.1 is nearer 0.15; 0.2 nearer 0.15
    np.testing.assert_array_equal(out, [1.0, 2.0, 2.0, 3.0])
    _, lin = resample_10hz([0.0, 0.2], [[0.0, 2.0], [2.0, 0.0]], mode="linear")
    np.testing.assert_allclose(lin, [[0, 2], [1, 1], [2, 0]])
    with pytest.raises(EmptyStream):
        resample_10hz([], [])
    with pytest.raises(EmptyStream):
        resample_10hz([0.01, 0.05], [1, 2])


def tiny_episode(n=50, grid=2, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    head = np.tile([1.0, 0, 0, 0, 1.0, 0], (n, 1))
    return Episode(id=f"ep{seed}", t=np.arange(n) / 10, motion=rng.normal(size=(n, 3)) * 0.1,
                   head=head, gaze=rng.uniform(size=(n, 2)), goal_xy=rng.normal(size=(n, 2)),
                   uncertainty=rng.uniform(size=n), env=rng.integers(0, 32, n),
                   behavior=rng.integers(0, 64, n),
                   features=rng.normal(size=(n, grid, grid, channels)).astype(np.float32),
                   start_pose=rng.normal(size=3), meta={"seed": seed})


@pytest.mark.parametrize("length", [39, 40, 41, 57, 100])
@pytest.mark.parametrize("stride", [1, 3, 7])
def test_window_count(length, stride):
    expected = len(range(0, length - 40 + 1, stride)) if length >= 40 else 0
    assert window_count(length, stride) == expected
    if length >= 40:
        assert len(extract_windows(tiny_episode(length), stride)) == expected
    else:
        with pytest.raises(TooShort):
            extract_windows(tiny_episode(length), stride)


def test_windows_contents():
    ep = tiny_episode(60)
    w = extract_windows(ep, stride=5)[2]
    np.testing.assert_array_equal(w.motion, ep.motion[10:40])
    np.testing.assert_array_equal(w.future_motion, ep.motion[40:50])
    assert w.u_target == ep.uncertainty[39] and w.step == 39
    # canonical frame: world head = heading at the last step
    yaw = ep.poses()[39, 2]
    m = rot6d_to_matrix(w.head[-1])
    assert math.isclose(math.atan2(m[1, 0], m[0, 0]), -math.atan2(math.sin(yaw), math.cos(yaw)),
                        abs_tol=1e-9)


def test_feature_cache_round_trip_and_errors():
    feats = np.random.default_rng(1).normal(size=(4, 2, 2, 3)).astype(np.float32)
    blob = encode_feature_cache(feats)
    assert blob[:4] == b"ECNF" and len(blob) == 24 + feats.size * 4
    assert np.array_equal(decode_feature_cache(blob), feats)
    with pytest.raises(BadMagic):
        decode_feature_cache(b"XXXX" + blob[4:])
    with pytest.raises(LengthMismatch):
        decode_feature_cache(blob[:-1])


def test_episode_directory_round_trip(tmp_path):
    ep = tiny_episode(45)
    write_episode(tmp_path / "e", ep)
    back = read_episode(tmp_path / "e")
    for name in ("t", "motion", "head", "gaze", "goal_xy", "uncertainty", "env", "behavior",
                 "features", "start_pose"):
        assert np.array_equal(getattr(back, name), getattr(ep, name)), name
    assert back.id == ep.id and back.meta == ep.meta


def test_dataset_round_trip_and_splits(tmp_path):
    eps = [tiny_episode(45, seed=s) for s in range(3)]
    manifest = write_dataset(tmp_path, eps, splits={"ep2": "test"})
    assert manifest["total_steps"] == 135
    assert [e.id for e in read_dataset(tmp_path, "train")] == ["ep0", "ep1"]
    assert [e.id for e in read_dataset(tmp_path, "test")] == ["ep2"]


def test_truncated_episode_features(tmp_path):
    write_episode(tmp_path / "e", tiny_episode(45))
    raw = (tmp_path / "e" / "features.bin").read_bytes()
    (tmp_path / "e" / "features.bin").write_bytes(raw[:-12])
    with pytest.raises(LengthMismatch):
        read_episode(tmp_path / "e")


# ------------------------------------------------------------- generator

def test_four_way_junction_peaks_at_one():
    ep = synth_generate(four_way_junction(), seed=0)
    assert ep.uncertainty.max() == pytest.approx(1.0, abs=1e-12)
    poses = ep.poses()
    at_node = np.argmin(np.hypot(poses[:, 0], poses[:, 1]))
    assert np.hypot(*poses[at_node, :2]) < 1e-9
    assert ep.uncertainty[at_node] == pytest.approx(1.0, abs=1e-12)


def test_corridor_has_zero_uncertainty_and_constant_velocity():
    world = straight_corridor(gait_amplitude=0.0, speed_noise=0.0, head_jitter=0.0, head_bob=0.0)
    ep = synth_generate(world, seed=3)
    assert np.all(ep.uncertainty == 0)
    np.testing.assert_allclose(ep.motion[1:], np.tile([0.12, 0.0, 0.0], (len(ep) - 1, 1)), atol=1e-12)


def test_generator_deterministic_per_seed():
    a = synth_generate(random_world(4), seed=4)
    b = synth_generate(random_world(4), seed=4)
    for name in ("motion", "head", "gaze", "uncertainty", "behavior", "env", "features"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = synth_generate(random_world(4), seed=5)
    assert not np.array_equal(a.features, c.features)


@pytest.mark.parametrize("seed", range(6))
def test_wrong_and_back_above_neutral(seed):
    ep = synth_generate(random_world(seed), seed=seed)
    bits = mask_bits(ep.behavior, len(BEHAVIOR_LABELS))
    wb = bits[:, BEHAVIOR_LABELS.index("WRONG")] | bits[:, BEHAVIOR_LABELS.index("BACK")]
    neutral = ep.behavior == 0
    assert neutral.any()
    if wb.any():
        assert ep.uncertainty[wb].mean() > ep.uncertainty[neutral].mean()


def test_hesitation_has_zero_motion():
    ep = synth_generate(random_world(2), seed=2)
    hes = mask_bits(ep.behavior, 6)[:, 0]
    assert hes.any()
    np.testing.assert_array_equal(ep.motion[hes, :2], 0.0)


def test_head_rotations_valid_and_body_relative_smooth():
    ep = synth_generate(random_world(1), seed=1)
    m = rot6d_to_matrix(ep.head)
    np.testing.assert_allclose(m @ np.swapaxes(m, -1, -2), np.broadcast_to(np.eye(3), m.shape), atol=1e-9)
    # consecutive head rotations never jump by more than ~90 degrees
    assert relative_rotation_l1(m[1:], m[:-1]).max() < 4.0


def test_world_config_validation():
    base = four_way_junction().to_dict()
    with pytest.raises(BadConfig):
        WorldConfig.from_dict({**base, "bogus": 1})
    with pytest.raises(BadConfig):
        WorldConfig.from_dict({**base, "route": ["s", "n"]})
    with pytest.raises(BadConfig):
        WorldConfig.from_dict({**base, "speed": -1})
    assert WorldConfig.from_dict(base).route == ["s", "j", "e"]
