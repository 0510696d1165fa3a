"""On-disk formats: feature cache, episode directories, dataset roots.

Feature cache (``features.bin``): magic ``ECNF``, then little-endian u32
version, T, G, G, C, then T*G*G*C little-endian f32 values, row-major.

Episode directory: ``manifest.json`` + ``streams.csv`` + ``features.bin``.
A dataset root holds one directory per episode plus a ``manifest.json``
listing ids, seeds, lengths and splits.
"""
import csv
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, LengthMismatch, ParseError
from .data import BEHAVIOR_LABELS, ENV_LABELS, Episode

MAGIC = b"ECNF"
VERSION = 1
_HEADER = struct.Struct("<4s5I")

STREAM_COLUMNS = ("t", "dx", "dy", "dpsi", "h1", "h2", "h3", "h4", "h5", "h6", "u", "v",
                  "goal_x", "goal_y", "U", "env", "behavior")


def encode_feature_cache(features):
    feats = np.asarray(features)
    if feats.ndim != 4 or feats.shape[1] != feats.shape[2]:
        raise ValueError(f"features must be (T, G, G, C), got {feats.shape}")
    t, g, _, c = feats.shape
    return _HEADER.pack(MAGIC, VERSION, t, g, g, c) + np.ascontiguousarray(feats, dtype="<f4").tobytes()


def decode_feature_cache(blob):
    if len(blob) < _HEADER.size:
        raise LengthMismatch("feature cache shorter than its header")
    magic, version, t, g1, g2, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadMagic(f"unsupported feature cache version {version}")
    if g1 != g2:
        raise LengthMismatch(f"non-square feature grid {g1}x{g2}")
    expected = t * g1 * g2 * c * 4
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise LengthMismatch(f"payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, g1, g2, c).astype(np.float32)


def write_feature_cache(path, features):
    Path(path).write_bytes(encode_feature_cache(features))


def read_feature_cache(path):
    return decode_feature_cache(Path(path).read_bytes())


def write_episode(directory, ep):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "id": ep.id,
        "length": len(ep),
        "grid": [ep.grid, ep.grid, ep.channels],
        "env_labels": list(ENV_LABELS),
        "behavior_labels": list(BEHAVIOR_LABELS),
        "start_pose": [float(v) for v in ep.start_pose],
        "meta": ep.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with open(directory / "streams.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STREAM_COLUMNS)
        for i in range(len(ep)):
            # repr() of a Python float round-trips exactly
            row = [repr(float(ep.t[i]))]
            row += [repr(float(v)) for v in ep.motion[i]]
            row += [repr(float(v)) for v in ep.head[i]]
            row += [repr(float(v)) for v in ep.gaze[i]]
            row += [repr(float(v)) for v in ep.goal_xy[i]]
            row += [repr(float(ep.uncertainty[i])), int(ep.env[i]), int(ep.behavior[i])]
            writer.writerow(row)
    write_feature_cache(directory / "features.bin", ep.features)


def read_episode(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    with open(directory / "streams.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != STREAM_COLUMNS:
            raise ParseError(f"unexpected streams.csv header {header}", 1)
        rows = list(reader)
    data = np.array([[float(v) for v in r[:15]] for r in rows], dtype=float).reshape(-1, 15)
    env = np.array([int(r[15]) for r in rows], dtype=np.uint8)
    behavior = np.array([int(r[16]) for r in rows], dtype=np.uint8)
    features = read_feature_cache(directory / "features.bin")
    if len(features) != len(rows) or len(rows) != manifest["length"]:
        raise LengthMismatch(f"{directory}: manifest length {manifest['length']}, "
                             f"{len(rows)} stream rows, {len(features)} feature steps")
    return Episode(
        id=manifest["id"], t=data[:, 0], motion=data[:, 1:4], head=data[:, 4:10],
        gaze=data[:, 10:12], goal_xy=data[:, 12:14], uncertainty=data[:, 14],
        env=env, behavior=behavior, features=features,
        start_pose=np.array(manifest.get("start_pose", [0.0, 0.0, 0.0])),
        meta=manifest.get("meta", {}),
    )


def write_dataset(root, episodes, splits=None, extra=None):
    """Write episodes under ``root`` with a manifest; ``splits`` maps id -> split name."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for ep in episodes:
        write_episode(root / ep.id, ep)
        entries.append({"id": ep.id, "dir": ep.id, "length": len(ep),
                        "seed": ep.meta.get("seed"),
                        "split": (splits or {}).get(ep.id, "train")})
    manifest = {"episodes": entries, "total_steps": int(sum(e["length"] for e in entries))}
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset_manifest(root):
    return json.loads((Path(root) / "manifest.json").read_text())


def read_dataset(root, split=None):
    root = Path(root)
    manifest = read_dataset_manifest(root)
    return [read_episode(root / e["dir"]) for e in manifest["episodes"]
            if split is None or e["split"] == split]
