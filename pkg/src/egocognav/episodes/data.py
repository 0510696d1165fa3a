"""Episode and window containers."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch, TooShort, OutOfRange
from ..geometry import integrate_deltas, matrix_to_rot6d, rot6d_to_matrix, rot_z

ENV_LABELS = ("JCT", "OCC", "MULT", "CROWD", "ST")
BEHAVIOR_LABELS = ("HES", "WRONG", "BACK", "SCAN", "CONFIRM", "LB")
DIFFICULTY_LABELS = ("HES", "WRONG", "BACK", "SCAN", "LB")

T_PAST = 30
T_FUTURE = 10
STEP_SECONDS = 0.1


def labels_to_mask(labels, names):
    mask = 0
    for label in labels:
        mask |= 1 << names.index(label)
    return mask


def mask_to_labels(mask, names):
    return frozenset(name for i, name in enumerate(names) if int(mask) >> i & 1)


def mask_bits(masks, n):
    """``(...,)`` integer masks -> ``(..., n)`` boolean bit array."""
    masks = np.asarray(masks, dtype=np.int64)
    return (masks[..., None] >> np.arange(n)) & 1 == 1


@dataclass
class Episode:
    """One synchronized 10 Hz recording.

    ``motion[t]`` is the body-frame delta that moves pose t-1 to pose t, with
    ``start_pose`` playing pose -1. Head rotations are world-frame 6D.
    """

    id: str
    t: np.ndarray
    motion: np.ndarray
    head: np.ndarray
    gaze: np.ndarray
    goal_xy: np.ndarray
    uncertainty: np.ndarray
    env: np.ndarray
    behavior: np.ndarray
    features: np.ndarray
    start_pose: np.ndarray = field(default_factory=lambda: np.zeros(3))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.motion = np.asarray(self.motion, dtype=float)
        self.head = np.asarray(self.head, dtype=float)
        self.gaze = np.asarray(self.gaze, dtype=float)
        self.goal_xy = np.asarray(self.goal_xy, dtype=float)
        self.uncertainty = np.asarray(self.uncertainty, dtype=float)
        self.env = np.asarray(self.env, dtype=np.uint8)
        self.behavior = np.asarray(self.behavior, dtype=np.uint8)
        self.features = np.asarray(self.features, dtype=np.float32)
        self.start_pose = np.asarray(self.start_pose, dtype=float)
        n = len(self.t)
        expected = {"motion": (n, 3), "head": (n, 6), "gaze": (n, 2), "goal_xy": (n, 2),
                    "uncertainty": (n,), "env": (n,), "behavior": (n,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"episode {self.id}: {name} has shape "
                                    f"{getattr(self, name).shape}, expected {shape}")
        if self.features.ndim != 4 or len(self.features) != n or self.features.shape[1] != self.features.shape[2]:
            raise ShapeMismatch(f"episode {self.id}: features must be (T, G, G, C), got {self.features.shape}")
        if n and (self.uncertainty.min() < 0 or self.uncertainty.max() > 1):
            raise OutOfRange(f"episode {self.id}: uncertainty outside [0, 1]")

    def __len__(self):
        return len(self.t)

    @property
    def grid(self):
        return self.features.shape[1]

    @property
    def channels(self):
        return self.features.shape[3]

    def poses(self):
        return integrate_deltas(self.start_pose, self.motion)

    def goal_encoding(self):
        from ..geometry import encode_goal
        return encode_goal(self.poses(), self.goal_xy)


@dataclass
class WindowSample:
    """Past context and future targets cut from an episode.

    Head rotations (past and future) are expressed relative to the body
    heading at the last past step, so the heading there reads as yaw 0.
    """

    features: np.ndarray        # (T1, G, G, C)
    motion: np.ndarray          # (T1, 3)
    head: np.ndarray            # (T1, 6)
    gaze: np.ndarray            # (T1, 2)
    goal: np.ndarray            # (T1, 3) distance, sin, cos
    future_motion: np.ndarray   # (T2, 3)
    future_head: np.ndarray     # (T2, 6)
    u_target: float
    env_masks: np.ndarray       # (T1,) per-step bitmasks
    behavior_masks: np.ndarray  # (T1,)
    episode_id: str = ""
    start: int = 0

    @property
    def env_target(self):
        return mask_bits(np.bitwise_or.reduce(self.env_masks), len(ENV_LABELS))

    @property
    def behavior_target(self):
        return mask_bits(np.bitwise_or.reduce(self.behavior_masks), len(BEHAVIOR_LABELS))

    @property
    def step(self):
        """Episode index of the prediction step (last past step)."""
        return self.start + len(self.motion) - 1


@dataclass
class WindowBatch:
    """Stacked windows; every array gains a leading batch axis."""

    features: np.ndarray
    motion: np.ndarray
    head: np.ndarray
    gaze: np.ndarray
    goal: np.ndarray
    future_motion: np.ndarray
    future_head: np.ndarray
    u_target: np.ndarray
    env_masks: np.ndarray
    behavior_masks: np.ndarray
    episode_ids: list
    steps: np.ndarray

    def __len__(self):
        return len(self.motion)

    @property
    def env_target(self):
        return mask_bits(np.bitwise_or.reduce(self.env_masks, axis=1), len(ENV_LABELS))

    @property
    def behavior_target(self):
        return mask_bits(np.bitwise_or.reduce(self.behavior_masks, axis=1), len(BEHAVIOR_LABELS))

    @property
    def last_env(self):
        return self.env_masks[:, -1]

    @property
    def last_behavior(self):
        return self.behavior_masks[:, -1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return WindowBatch(
            self.features[idx], self.motion[idx], self.head[idx], self.gaze[idx], self.goal[idx],
            self.future_motion[idx], self.future_head[idx], self.u_target[idx],
            self.env_masks[idx], self.behavior_masks[idx],
            [self.episode_ids[i] for i in np.atleast_1d(idx)], self.steps[idx])


def stack_windows(windows):
    if isinstance(windows, WindowBatch):
        return windows
    windows = list(windows)
    if not windows:
        raise ShapeMismatch("cannot stack an empty window list")
    return WindowBatch(
        features=np.stack([w.features for w in windows]),
        motion=np.stack([w.motion for w in windows]),
        head=np.stack([w.head for w in windows]),
        gaze=np.stack([w.gaze for w in windows]),
        goal=np.stack([w.goal for w in windows]),
        future_motion=np.stack([w.future_motion for w in windows]),
        future_head=np.stack([w.future_head for w in windows]),
        u_target=np.array([w.u_target for w in windows], dtype=float),
        env_masks=np.stack([w.env_masks for w in windows]),
        behavior_masks=np.stack([w.behavior_masks for w in windows]),
        episode_ids=[w.episode_id for w in windows],
        steps=np.array([w.step for w in windows]),
    )


def window_count(length, stride, t_past=T_PAST, t_future=T_FUTURE):
    if length < t_past + t_future:
        return 0
    return (length - t_past - t_future) // stride + 1


def extract_windows(ep, stride=1, t_past=T_PAST, t_future=T_FUTURE):
    """All (past, future) windows of an episode at the given stride."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(ep)
    if n < t_past + t_future:
        raise TooShort(f"episode {ep.id} has {n} steps, needs {t_past + t_future}")
    poses = ep.poses()
    goal = ep.goal_encoding()
    head_m = rot6d_to_matrix(ep.head)
    out = []
    for s in range(0, window_count(n, stride, t_past, t_future) * stride, stride):
        last = s + t_past - 1
        to_local = rot_z(-poses[last, 2])
        head_local = matrix_to_rot6d(to_local @ head_m[s:s + t_past + t_future], check=False)
        out.append(WindowSample(
            features=ep.features[s:s + t_past],
            motion=ep.motion[s:s + t_past],
            head=head_local[:t_past],
            gaze=ep.gaze[s:s + t_past],
            goal=goal[s:s + t_past],
            future_motion=ep.motion[s + t_past:s + t_past + t_future],
            future_head=head_local[t_past:],
            u_target=float(ep.uncertainty[last]),
            env_masks=ep.env[s:s + t_past],
            behavior_masks=ep.behavior[s:s + t_past],
            episode_id=ep.id,
            start=s,
        ))
    return out


def windows_from_episodes(episodes, stride=1, t_past=T_PAST, t_future=T_FUTURE):
    out = []
    for ep in episodes:
        if len(ep) >= t_past + t_future:
            out.extend(extract_windows(ep, stride, t_past, t_future))
    return out
