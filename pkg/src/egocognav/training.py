"""Losses, AdamW with warm-up + cosine schedule, and the training loop."""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .episodes.data import WindowBatch
from .errors import BadConfig, NonFinite, OutOfRange, ShapeMismatch
from .geometry import rot6d_to_matrix_tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "L_traj", "L_head", "L_U", "L_aux", "L_total", "val_total")


@dataclass
class LossWeights:
    lambda_traj: float = 1.0
    lambda_head: float = 1.0
    lambda_u: float = 1.0
    lambda_var: float = 0.3
    alpha: float = 0.3
    gamma: float = 0.98

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise BadConfig(f"{f.name} must be non-negative")
        # 1.0 is allowed so the discount can be switched off in ablations
        if not 0.95 <= self.gamma <= 1.0:
            raise BadConfig(f"gamma must lie in [0.95, 1], got {self.gamma}")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise BadConfig(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def discounts(self, n):
        return self.gamma ** np.arange(1, n + 1)


# ---------------------------------------------------------------- losses

def _population_std(x, axis):
    mu = ad.mean(x, axis=axis, keepdims=True)
    var = ad.mean(ad.square(ad.sub(x, mu)), axis=axis)
    return ad.sqrt(ad.add(var, np.asarray(1e-12, dtype=var.data.dtype)))


def traj_loss(pred, gt, w=None):
    """Discounted L1 over future steps plus a temporal-spread penalty.

    ``pred``/``gt`` are ``(T2, 3)`` or ``(B, T2, 3)``; batches are averaged.
    """
    w = w or LossWeights()
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"traj_loss: pred {pred.shape} vs gt {gt.shape}")
    t2 = pred.shape[-2]
    disc = w.discounts(t2).astype(pred.data.dtype)[:, None]
    l1 = ad.sum(ad.mul(ad.abs(ad.sub(pred, gt)), disc), axis=(-2, -1))
    gt_std = np.sqrt(((gt - gt.mean(axis=-2, keepdims=True)) ** 2).mean(axis=-2) + 1e-12)
    spread = ad.sum(ad.square(ad.sub(_population_std(pred, -2), gt_std)), axis=-1)
    per_sample = ad.add(l1, ad.scale(spread, w.lambda_var))
    return ad.mean(per_sample)


def head_loss(pred, gt):
    """Mean over steps (and batch) of the entrywise L1 of ``R_predᵀ R_gt − I``."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if pred.shape != gt.shape or pred.shape[-1] != 6:
        raise ShapeMismatch(f"head_loss: pred {pred.shape} vs gt {gt.shape}")
    from .geometry import rot6d_to_matrix
    r_pred = rot6d_to_matrix_tensor(pred)
    r_gt = rot6d_to_matrix(gt).astype(pred.data.dtype)
    rel = ad.matmul(ad.swap_last(r_pred), r_gt)
    err = ad.sum(ad.abs(ad.sub(rel, np.eye(3, dtype=pred.data.dtype))), axis=(-2, -1))
    return ad.mean(err)


def u_loss(u_hat, u_human):
    u_hat = ad.as_tensor(u_hat)
    target = np.asarray(u_human, dtype=u_hat.data.dtype)
    if np.any(target < 0) or np.any(target > 1) or np.any(u_hat.data < 0) or np.any(u_hat.data > 1):
        raise OutOfRange("uncertainty values must lie in [0, 1]")
    if u_hat.shape != target.shape:
        raise ShapeMismatch(f"u_loss: {u_hat.shape} vs {target.shape}")
    return ad.mean(ad.square(ad.sub(u_hat, target)))


def aux_loss(env_logits, behavior_logits, env_target, behavior_target):
    """Mean per-class BCE-with-logits of each head, summed over the two heads."""
    total = None
    for logits, target in ((env_logits, env_target), (behavior_logits, behavior_target)):
        logits = ad.as_tensor(logits)
        target = np.asarray(target, dtype=logits.data.dtype)
        if logits.shape != target.shape:
            raise ShapeMismatch(f"aux_loss: logits {logits.shape} vs targets {target.shape}")
        part = ad.mean(ad.bce_with_logits(logits, target))
        total = part if total is None else ad.add(total, part)
    return total


def total_loss(parts, w=None):
    """``λ_traj L_traj + λ_head L_head + λ_U L_U + α L_aux``; missing parts count as zero."""
    w = w or LossWeights()
    coeffs = {"traj": w.lambda_traj, "head": w.lambda_head, "u": w.lambda_u, "aux": w.alpha}
    out = None
    for name, c in coeffs.items():
        part = parts.get(name)
        if part is None:
            continue
        value = part.data if isinstance(part, ad.Tensor) else np.asarray(part)
        if not np.all(np.isfinite(value)):
            raise NonFinite(f"loss part {name} is not finite")
        term = ad.scale(ad.as_tensor(part), c)
        out = term if out is None else ad.add(out, term)
    return out if out is not None else ad.as_tensor(0.0)


def compute_losses(net, batch, w):
    """Forward a batch and return (total, {name: float}) with the graph attached to total."""
    out = net.forward_tensors(batch)
    parts = {"traj": traj_loss(out["traj"], batch.future_motion, w),
             "head": head_loss(out["head"], batch.future_head)}
    if "u_hat" in out:
        parts["u"] = u_loss(out["u_hat"], batch.u_target)
        parts["aux"] = aux_loss(out["env_logits"], out["behavior_logits"],
                                batch.env_target, batch.behavior_target)
    total = total_loss(parts, w)
    values = {k: float(v.data) for k, v in parts.items()}
    values["total"] = float(total.data)
    if not math.isfinite(values["total"]):
        raise NonFinite("total loss is not finite")
    return total, values


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr_max: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    warmup_epochs: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_moments(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def hyperparameters(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("m", "v", "step")}


def lr_at(step, total_steps, o):
    """Linear warm-up to ``lr_max`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = int(round(total_steps * o.warmup_epochs / o.epochs)) if o.epochs else 0
    if warm > 0 and step <= warm:
        return o.lr_max * step / warm
    span = total_steps - warm
    if span <= 0:
        return o.lr_max
    progress = (step - warm) / span
    return o.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads, max_norm):
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


def adamw_step(params, grads, o, lr):
    """In-place decoupled-decay Adam update; decay only where ``p.decay``."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not o.m:
        o.init_moments(params)
    o.step += 1
    b1, b2 = o.beta1, o.beta2
    c1 = 1.0 - b1 ** o.step
    c2 = 1.0 - b2 ** o.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} vs param {p.data.shape}")
        o.m[i] = b1 * o.m[i] + (1 - b1) * g
        o.v[i] = b2 * o.v[i] + (1 - b2) * g * g
        update = (o.m[i] / c1) / (np.sqrt(o.v[i] / c2) + o.eps)
        if p.decay and o.weight_decay:
            p.data = p.data * (1 - lr * o.weight_decay)
        p.data = (p.data - lr * update).astype(p.data.dtype)
    return params


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val: float
    final_loss: float
    steps: int
    best_state: dict = None


def split_train_val(batch, fraction, seed):
    """Deterministic random train/validation split of a WindowBatch."""
    n = len(batch)
    n_val = int(round(fraction * n)) if n > 1 else 0
    if n_val == 0:
        return batch, None
    order = np.random.default_rng([seed, 1]).permutation(n)
    return batch.subset(np.sort(order[n_val:])), batch.subset(np.sort(order[:n_val]))


def _iter_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_loss(net, batch, w, chunk=128):
    """Size-weighted mean of each loss part over a batch."""
    sums = {}
    n = len(batch)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        _, values = compute_losses(net, batch.subset(idx), w)
        for k, v in values.items():
            sums[k] = sums.get(k, 0.0) + v * len(idx)
    return {k: v / n for k, v in sums.items()}


def save_training_state(path, net, opt, epoch, seed, extra=None):
    path = Path(path)
    meta = {"epoch": epoch, "optimizer": opt.hyperparameters(), "step": opt.step}
    meta.update(extra or {})
    net.save(path, seed=seed, extra=meta)
    if opt.m:
        np.savez(path / "optimizer.npz", *opt.m, *opt.v)


def load_optimizer(path, params, opt):
    data = np.load(Path(path) / "optimizer.npz")
    n = len(params)
    arrays = [data[f"arr_{i}"] for i in range(2 * n)]
    opt.m, opt.v = arrays[:n], arrays[n:]


def train(net, train_batch, val_batch=None, weights=None, opt=None, seed=0, log_path=None,
          checkpoint_dir=None, start_epoch=0, stop_epoch=None):
    """Minibatch AdamW training with a per-epoch CSV log.

    The best validation total (training total when no validation batch)
    is tracked and, with ``checkpoint_dir``, written there on improvement.
    Continues from ``opt.step`` and ``start_epoch`` when resuming;
    ``stop_epoch`` ends the run early without changing the schedule.
    """
    if not isinstance(train_batch, WindowBatch) or len(train_batch) == 0:
        raise ValueError("train needs a non-empty WindowBatch")
    weights = weights or LossWeights()
    opt = opt or OptimizerState()
    params = net.parameters()
    if not opt.m:
        opt.init_moments(params)
    n = len(train_batch)
    steps_per_epoch = math.ceil(n / opt.batch_size)
    total_steps = steps_per_epoch * opt.epochs
    rng = np.random.default_rng(seed)
    for _ in range(start_epoch):
        rng.permutation(n)
    history = []
    best_val, best_epoch, best_state = math.inf, -1, None
    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fresh = start_epoch == 0 or not Path(log_path).exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)
    try:
        end = opt.epochs if stop_epoch is None else min(stop_epoch, opt.epochs)
        for epoch in range(start_epoch, end):
            sums = {}
            lr = 0.0
            for idx in _iter_batches(n, opt.batch_size, rng):
                lr = lr_at(min(opt.step + 1, total_steps), total_steps, opt)
                loss, values = compute_losses(net, train_batch.subset(idx), weights)
                grads = ad.backward(loss, params)
                grads, _ = clip_grad_norm(grads, opt.clip_norm)
                adamw_step(params, grads, opt, lr)
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
            means = {k: v / n for k, v in sums.items()}
            val = evaluate_loss(net, val_batch, weights)["total"] if val_batch is not None and len(val_batch) else means["total"]
            row = {"epoch": epoch, "lr": lr, "L_traj": means.get("traj", 0.0), "L_head": means.get("head", 0.0),
                   "L_U": means.get("u", 0.0), "L_aux": means.get("aux", 0.0), "L_total": means["total"],
                   "val_total": val}
            history.append(row)
            if writer:
                writer.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in LOG_COLUMNS])
                fh.flush()
            log.info("epoch %d lr %.2e total %.4f val %.4f", epoch, lr, means["total"], val)
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_state = net.state_dict()
                if checkpoint_dir is not None:
                    save_training_state(checkpoint_dir, net, opt, epoch, seed,
                                        {"loss_weights": weights.to_dict(), "best_val": val})
    finally:
        if fh:
            fh.close()
    final = history[-1]["L_total"] if history else math.nan
    return TrainResult(history, best_epoch, best_val, final, opt.step, best_state)


def read_training_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def weights_json(w):
    return json.dumps(w.to_dict(), sort_keys=True)
