"""Forecasting and uncertainty metrics, plus CSV report tables."""
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .episodes.data import BEHAVIOR_LABELS, DIFFICULTY_LABELS
from .errors import DegenerateInput, EmptyGroup, ShapeMismatch, TooFew, ZeroVariance
from .geometry import integrate_deltas_batch, relative_rotation_l1, rot6d_to_matrix

_DIFFICULTY_MASK = sum(1 << BEHAVIOR_LABELS.index(l) for l in DIFFICULTY_LABELS)


# ---------------------------------------------------------------- trajectory

def _xy_pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 2 or pred.ndim < 2:
        raise ShapeMismatch(f"positions must be matching (..., T, 2) arrays: {pred.shape} vs {gt.shape}")
    return pred, gt


def ade(pred_xy, gt_xy):
    """Mean Euclidean distance over steps; leading axes are kept."""
    pred, gt = _xy_pair(pred_xy, gt_xy)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def fde(pred_xy, gt_xy):
    pred, gt = _xy_pair(pred_xy, gt_xy)
    return np.linalg.norm(pred[..., -1, :] - gt[..., -1, :], axis=-1)


def head_l1_metric(pred, gt):
    """Training head loss as a metric: mean over steps of ``|R̂ᵀR − I|₁``."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 6:
        raise ShapeMismatch(f"head rotations must be matching (..., 6) arrays: {pred.shape} vs {gt.shape}")
    return relative_rotation_l1(rot6d_to_matrix(pred), rot6d_to_matrix(gt)).mean(axis=-1)


# ---------------------------------------------------------------- uncertainty

def mae(u_hat, u_human):
    a = np.asarray(u_hat, dtype=float)
    b = np.asarray(u_human, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mae: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def spearman_rho(a, b):
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"spearman_rho: {a.shape} vs {b.shape}")
    if len(a) < 3:
        raise TooFew("spearman_rho needs at least 3 pairs")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateInput("spearman_rho is undefined for a constant input")
    ra = rankdata(a) - (len(a) + 1) / 2
    rb = rankdata(b) - (len(b) + 1) / 2
    rho = float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))
    return min(1.0, max(-1.0, rho))


def top_fraction(values, fraction=0.2):
    """Indices of the ``ceil(fraction * N)`` largest values; ties keep input order."""
    values = np.asarray(values, dtype=float)
    k = math.ceil(fraction * len(values))
    return np.argsort(-values, kind="stable")[:k]


def is_difficulty(behavior_masks):
    return (np.asarray(behavior_masks, dtype=np.int64) & _DIFFICULTY_MASK) != 0


def high_u_precision(u_hat, behavior_masks, fraction=0.2):
    """Share of the top-``fraction`` u_hat records that carry a difficulty label."""
    u_hat = np.asarray(u_hat, dtype=float)
    masks = np.asarray(behavior_masks)
    if len(u_hat) != len(masks):
        raise ShapeMismatch("u_hat and behavior masks differ in length")
    if len(u_hat) < 5:
        raise TooFew("high_u_precision needs at least 5 records")
    top = top_fraction(u_hat, fraction)
    return float(is_difficulty(masks[top]).mean())


def onset_mask(behavior_masks, episode_ids=None, steps=None):
    """True at the first record of every contiguous run of labeled records.

    Records are contiguous when they share an episode and their steps are
    one stride apart (the smallest step gap seen in that episode).
    """
    masks = np.asarray(behavior_masks)
    n = len(masks)
    labeled = masks != 0
    ids = np.asarray(episode_ids if episode_ids is not None else [""] * n, dtype=object)
    steps = np.asarray(steps if steps is not None else np.arange(n))
    onset = np.zeros(n, dtype=bool)
    for ep in dict.fromkeys(ids.tolist()):
        idx = np.nonzero(ids == ep)[0]
        idx = idx[np.argsort(steps[idx], kind="stable")]
        gaps = np.diff(steps[idx])
        stride = gaps[gaps > 0].min() if np.any(gaps > 0) else 1
        for j, i in enumerate(idx):
            if not labeled[i]:
                continue
            prev = idx[j - 1] if j else None
            if prev is None or not labeled[prev] or steps[i] - steps[prev] != stride:
                onset[i] = True
    return onset


def effect_size(group_a, group_b):
    """Cohen's d with pooled (ddof=1) standard deviation."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise TooFew("effect_size needs at least two values per group")
    pooled = math.sqrt(((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2))
    if pooled == 0:
        raise ZeroVariance("both groups have zero variance")
    return float((a.mean() - b.mean()) / pooled)


def delta_u(u, behavior_masks, episode_ids=None, steps=None, return_groups=False):
    """Mean u at behaviour onsets minus mean u over neutral (unlabeled) records."""
    u = np.asarray(u, dtype=float)
    masks = np.asarray(behavior_masks)
    onsets = onset_mask(masks, episode_ids, steps)
    neutral = masks == 0
    if not onsets.any() or not neutral.any():
        raise EmptyGroup("delta_u needs both onset and neutral records")
    value = float(u[onsets].mean() - u[neutral].mean())
    return (value, u[onsets], u[neutral]) if return_groups else value


@dataclass
class BreakdownRow:
    behavior: str
    n: int
    mean_u: float
    effect: float
    present: bool


def behavior_breakdown(u, behavior_masks):
    """Mean u and effect size vs neutral per difficulty label, their union, and the rest."""
    u = np.asarray(u, dtype=float)
    masks = np.asarray(behavior_masks, dtype=np.int64)
    any_mask = is_difficulty(masks)
    groups = {name: (masks >> BEHAVIOR_LABELS.index(name)) & 1 == 1 for name in DIFFICULTY_LABELS}
    groups["Any"] = any_mask
    groups["Neutral"] = ~any_mask
    neutral = u[~any_mask]
    rows = []
    for name, sel in groups.items():
        if not sel.any():
            rows.append(BreakdownRow(name, 0, math.nan, math.nan, False))
            continue
        effect = math.nan
        if name != "Neutral":
            try:
                effect = effect_size(u[sel], neutral)
            except (TooFew, ZeroVariance):
                pass
        rows.append(BreakdownRow(name, int(sel.sum()), float(u[sel].mean()), effect, True))
    return rows


# ---------------------------------------------------------------- records

@dataclass
class EvalRecords:
    """Per-window evaluation inputs, stacked. Positions are integrated from the
    body frame at the prediction step."""

    pred_xy: np.ndarray
    gt_xy: np.ndarray
    pred_head: np.ndarray
    gt_head: np.ndarray
    u_hat: np.ndarray
    u_human: np.ndarray
    behavior: np.ndarray
    env: np.ndarray
    episode_ids: list
    steps: np.ndarray

    def __len__(self):
        return len(self.u_human)

    def subset(self, idx):
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return EvalRecords(pick(self.pred_xy), pick(self.gt_xy), pick(self.pred_head), pick(self.gt_head),
                           pick(self.u_hat), self.u_human[idx], self.behavior[idx], self.env[idx],
                           [self.episode_ids[i] for i in idx], self.steps[idx])


def make_records(batch, traj=None, head=None, u_hat=None):
    n = len(batch)
    gt_xy = integrate_deltas_batch(batch.future_motion)[..., :2]
    pred_xy = integrate_deltas_batch(np.asarray(traj, dtype=float))[..., :2] if traj is not None else None
    return EvalRecords(
        pred_xy=pred_xy, gt_xy=gt_xy,
        pred_head=None if head is None else np.asarray(head, dtype=float), gt_head=batch.future_head,
        u_hat=None if u_hat is None else np.asarray(u_hat, dtype=float).reshape(n),
        u_human=np.asarray(batch.u_target, dtype=float), behavior=batch.last_behavior.astype(np.int64),
        env=batch.last_env.astype(np.int64), episode_ids=list(batch.episode_ids),
        steps=np.asarray(batch.steps))


def forecast_summary(rec, idx=None):
    r = rec if idx is None else rec.subset(idx)
    return {"ADE": float(ade(r.pred_xy, r.gt_xy).mean()), "FDE": float(fde(r.pred_xy, r.gt_xy).mean()),
            "L1": float(head_l1_metric(r.pred_head, r.gt_head).mean())}


def uncertainty_summary(rec):
    out = {"MAE": mae(rec.u_hat, rec.u_human)}
    try:
        out["rho"] = spearman_rho(rec.u_hat, rec.u_human)
    except DegenerateInput:
        out["rho"] = math.nan
    out["precision"] = high_u_precision(rec.u_hat, rec.behavior)
    try:
        value, on, neu = delta_u(rec.u_hat, rec.behavior, rec.episode_ids, rec.steps, return_groups=True)
        out["delta_u"] = value
        try:
            out["effect"] = effect_size(on, neu)
        except (TooFew, ZeroVariance):
            out["effect"] = math.nan
    except EmptyGroup:
        out["delta_u"] = out["effect"] = math.nan
    return out


# ---------------------------------------------------------------- CSV tables

TABLE1_COLUMNS = ("method", "ADE", "FDE", "L1", "ADE_highU", "FDE_highU", "L1_highU", "comparable")
TABLE2_COLUMNS = ("method", "MAE", "rho", "precision", "delta_u", "effect")
TABLE3_COLUMNS = ("behavior", "n", "mean_u", "effect", "present")


def _fmt(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else repr(float(value))
    return "" if value is None else str(value)


def write_table(path, columns, rows):
    """Rows are dicts; floats are written with repr so they read back exactly."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _parse(value):
    if value == "":
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def read_table(path):
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def breakdown_rows(rows):
    return [{"behavior": r.behavior, "n": r.n, "mean_u": r.mean_u, "effect": r.effect, "present": r.present}
            for r in rows]
