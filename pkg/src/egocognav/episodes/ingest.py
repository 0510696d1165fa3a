"""Recording ingestion: GPX tracks, gaze/IMU TSV exports, joystick CSV logs.

Everything ends up on a common 10 Hz timeline.
"""
import csv
import io
import logging
import xml.sax
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy.signal import savgol_filter

from ..errors import BadWindow, EmptyStream, MissingColumn, ParseError
from ..geometry import matrix_to_rot6d, rot_z, world_to_body_deltas
from .data import STEP_SECONDS, Episode

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371008.8


def _parse_time(text, line):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        stamp = datetime.fromisoformat(text)
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}", line) from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


class _GpxHandler(xml.sax.ContentHandler):
    def __init__(self):
        super().__init__()
        self.fixes = []
        self._point = None
        self._point_line = None
        self._in_time = False
        self._time_text = []

    def startElement(self, name, attrs):
        local = name.rsplit(":", 1)[-1]
        line = self._locator.getLineNumber() if self._locator else None
        if local == "trkpt":
            try:
                self._point = [float(attrs["lat"]), float(attrs["lon"]), None]
            except (KeyError, ValueError):
                raise ParseError("trkpt needs numeric lat and lon", line) from None
            self._point_line = line
        elif local == "time" and self._point is not None:
            self._in_time = True
            self._time_text = []

    def characters(self, content):
        if self._in_time:
            self._time_text.append(content)

    def endElement(self, name):
        local = name.rsplit(":", 1)[-1]
        if local == "time" and self._in_time:
            self._in_time = False
            self._point[2] = _parse_time("".join(self._time_text), self._point_line)
        elif local == "trkpt":
            lat, lon, stamp = self._point
            if stamp is None:
                raise ParseError("trkpt without <time>", self._point_line)
            if self.fixes and stamp <= self.fixes[-1][0]:
                raise ParseError("track points are not in chronological order", self._point_line)
            self.fixes.append((stamp, lat, lon))
            self._point = None


def parse_gpx(text):
    """Return chronological ``(timestamp, lat, lon)`` fixes from a GPX track."""
    handler = _GpxHandler()
    try:
        xml.sax.parseString(text.encode("utf-8") if isinstance(text, str) else text, handler)
    except xml.sax.SAXParseException as exc:
        raise ParseError(exc.getMessage(), exc.getLineNumber()) from None
    return handler.fixes


def latlon_to_local(lat, lon, origin=None):
    """Equirectangular projection to metres (east, north) about ``origin``."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    lat0, lon0 = origin if origin is not None else (lat[0], lon[0])
    x = np.radians(lon - lon0) * np.cos(np.radians(lat0)) * EARTH_RADIUS_M
    y = np.radians(lat - lat0) * EARTH_RADIUS_M
    return np.stack([x, y], axis=-1)


@dataclass
class GazeImuTable:
    timestamps: np.ndarray
    u: np.ndarray
    v: np.ndarray
    imu: dict = field(default_factory=dict)
    n_clamped: int = 0

    def __len__(self):
        return len(self.timestamps)


def _read_table(text, delimiter, required):
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty file", 1) from None
    for col in required:
        if col not in header:
            raise MissingColumn(f"missing column {col!r}", 1)
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            raise ParseError(f"non-numeric field in {row!r}", lineno) from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    ts = data[:, header.index("timestamp")]
    bad = np.nonzero(np.diff(ts) <= 0)[0]
    if bad.size:
        raise ParseError("timestamps must increase strictly", int(bad[0]) + 3)
    return header, data


def _clamp_unit(values, what):
    clamped = np.clip(values, 0.0, 1.0)
    n = int(np.count_nonzero(clamped != values))
    if n:
        log.warning("clamped %d %s values into [0, 1]", n, what)
    return clamped, n


def parse_gaze_imu_tsv(text):
    """Tab-separated export with ``timestamp``, ``gaze_u``, ``gaze_v`` and any IMU columns.

    Gaze is clamped into [0, 1]; the number of clamped values is kept.
    """
    header, data = _read_table(text, "\t", ("timestamp", "gaze_u", "gaze_v"))
    u, nu = _clamp_unit(data[:, header.index("gaze_u")], "gaze")
    v, nv = _clamp_unit(data[:, header.index("gaze_v")], "gaze")
    imu = {h: data[:, i] for i, h in enumerate(header) if h not in ("timestamp", "gaze_u", "gaze_v")}
    return GazeImuTable(data[:, header.index("timestamp")], u, v, imu, nu + nv)


def parse_joystick_csv(text):
    """Comma-separated ``timestamp,magnitude``; magnitude clamped into [0, 1]."""
    header, data = _read_table(text, ",", ("timestamp", "magnitude"))
    mag, _ = _clamp_unit(data[:, header.index("magnitude")], "joystick")
    return list(zip(data[:, header.index("timestamp")].tolist(), mag.tolist()))


def savgol_smooth(series, window_len=15, poly_order=3):
    """Savitzky-Golay smoothing along axis 0.

    Edge samples come from a polynomial fitted to the first/last full
    window, so polynomials up to ``poly_order`` pass through unchanged.
    """
    series = np.asarray(series, dtype=float)
    if window_len % 2 == 0 or window_len <= poly_order or window_len < 1:
        raise BadWindow(f"window_len must be odd and > poly_order (got {window_len}, {poly_order})")
    if len(series) < window_len:
        raise BadWindow(f"series of length {len(series)} is shorter than the window {window_len}")
    return savgol_filter(series, window_len, poly_order, axis=0, mode="interp")


def resample_10hz(timestamps, values, mode="nearest"):
    """Resample onto ``k * 0.1 s`` instants inside the input span.

    Nearest mode picks the closest input sample (earlier one on ties);
    linear mode interpolates each column.
    """
    ts = np.asarray(timestamps, dtype=float)
    vals = np.asarray(values)
    if ts.size == 0:
        raise EmptyStream("cannot resample an empty stream")
    if np.any(np.diff(ts) <= 0):
        raise ParseError("timestamps must increase strictly")
    k0 = int(np.ceil(ts[0] * 10))
    while (k0 - 1) / 10.0 >= ts[0]:
        k0 -= 1
    while k0 / 10.0 < ts[0]:
        k0 += 1
    k1 = int(np.floor(ts[-1] * 10))
    while (k1 + 1) / 10.0 <= ts[-1]:
        k1 += 1
    while k1 / 10.0 > ts[-1]:
        k1 -= 1
    if k1 < k0:
        raise EmptyStream("stream span contains no 10 Hz instant")
    grid = np.arange(k0, k1 + 1) / 10.0
    if mode == "nearest":
        right = np.clip(np.searchsorted(ts, grid, side="left"), 0, len(ts) - 1)
        left = np.clip(right - 1, 0, len(ts) - 1)
        pick = np.where(np.abs(grid - ts[left]) <= np.abs(ts[right] - grid), left, right)
        # distances can tie across more than two samples once rounded
        while True:
            prev = np.maximum(pick - 1, 0)
            step = (pick > 0) & (np.abs(grid - ts[prev]) <= np.abs(grid - ts[pick]))
            if not step.any():
                break
            pick = np.where(step, prev, pick)
        return grid, vals[pick]
    if mode == "linear":
        vals = vals.astype(float)
        if vals.ndim == 1:
            return grid, np.interp(grid, ts, vals)
        return grid, np.stack([np.interp(grid, ts, vals[:, j]) for j in range(vals.shape[1])], axis=1)
    raise ValueError(f"unknown resampling mode {mode!r}")


def episode_from_recordings(episode_id, gpx_text, gaze_tsv_text, joystick_text, waypoints_latlon,
                            features=None, grid=4, channels=32, window_len=15, poly_order=3):
    """Assemble an Episode from one outdoor session.

    The GPS track is projected to local metres about its first fix,
    smoothed, resampled to 10 Hz and turned into headings along the path.
    Head orientation falls back to the walking heading because raw IMU
    integration is outside this pipeline. Waypoints are (lat, lon) pairs
    visited in order; the active goal switches when within 2 m.
    """
    fixes = np.array(parse_gpx(gpx_text), dtype=float)
    if len(fixes) < 2:
        raise EmptyStream("GPX track needs at least two fixes")
    xy = latlon_to_local(fixes[:, 1], fixes[:, 2])
    if len(xy) >= window_len:
        xy = savgol_smooth(xy, window_len, poly_order)
    t_grid, pos = resample_10hz(fixes[:, 0], xy, mode="linear")

    gaze = parse_gaze_imu_tsv(gaze_tsv_text)
    _, gaze_uv = resample_10hz(gaze.timestamps, np.column_stack([gaze.u, gaze.v]), mode="nearest")
    g_times = resample_10hz(gaze.timestamps, gaze.u)[0]
    joy = np.array(parse_joystick_csv(joystick_text), dtype=float)
    j_times, u_level = resample_10hz(joy[:, 0], joy[:, 1], mode="linear")

    lo = max(t_grid[0], g_times[0], j_times[0])
    hi = min(t_grid[-1], g_times[-1], j_times[-1])
    if hi - lo < STEP_SECONDS:
        raise EmptyStream("recordings do not overlap in time")

    def clip(times, arr):
        keep = (times >= lo - 1e-9) & (times <= hi + 1e-9)
        return arr[keep]

    pos = clip(t_grid, pos)
    t = clip(t_grid, t_grid)
    gaze_uv = clip(g_times, gaze_uv)
    u_level = np.clip(clip(j_times, u_level), 0.0, 1.0)
    n = min(len(pos), len(gaze_uv), len(u_level))
    pos, t, gaze_uv, u_level = pos[:n], t[:n], gaze_uv[:n], u_level[:n]

    step = np.diff(pos, axis=0, append=pos[-1:] + (pos[-1:] - pos[-2:-1]))
    speed = np.linalg.norm(step, axis=1)
    heading = np.arctan2(step[:, 1], step[:, 0])
    # keep the previous heading while standing still
    for i in range(1, n):
        if speed[i] < 1e-3:
            heading[i] = heading[i - 1]
    heading = np.unwrap(heading)
    poses = np.column_stack([pos, heading])
    motion = np.vstack([np.zeros((1, 3)), world_to_body_deltas(poses)])

    wps = latlon_to_local(np.asarray(waypoints_latlon)[:, 0], np.asarray(waypoints_latlon)[:, 1],
                          origin=(fixes[0, 1], fixes[0, 2])) if len(waypoints_latlon) else pos[-1:]
    goal_xy = np.empty((n, 2))
    active = 0
    for i in range(n):
        while active < len(wps) - 1 and np.linalg.norm(pos[i] - wps[active]) < 2.0:
            active += 1
        goal_xy[i] = wps[active]

    head = matrix_to_rot6d(rot_z(heading), check=False) if n else np.zeros((0, 6))
    if features is None:
        features = np.zeros((n, grid, grid, channels), dtype=np.float32)
    features = np.asarray(features, dtype=np.float32)[:n]
    return Episode(
        id=episode_id, t=t - t[0], motion=motion, head=head, gaze=gaze_uv, goal_xy=goal_xy,
        uncertainty=u_level, env=np.zeros(n, np.uint8), behavior=np.zeros(n, np.uint8),
        features=features, start_pose=poses[0].copy(),
        meta={"source": "recordings", "gaze_clamped": gaze.n_clamped},
    )


__all__ = [
    "parse_gpx", "parse_gaze_imu_tsv", "parse_joystick_csv", "savgol_smooth", "resample_10hz",
    "latlon_to_local", "episode_from_recordings", "GazeImuTable",
]
