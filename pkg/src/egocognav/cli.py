"""Command line: ``egocognav {synth,train,eval,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite
loss, 5 checkpoint error.
"""
import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import EMUProxy, PathU, const_vel, lin_ext
from .episodes import (WorldConfig, random_world, read_dataset, stack_windows, synth_generate,
                       windows_from_episodes, write_dataset)
from .errors import (BadConfig, BadMagic, EgoCogNavError, EmptyStream, LengthMismatch, NonFinite,
                     ParseError, ShapeMismatch, TooShort)
from .metrics import (TABLE1_COLUMNS, TABLE2_COLUMNS, TABLE3_COLUMNS, behavior_breakdown,
                      breakdown_rows, forecast_summary, make_records, top_fraction,
                      uncertainty_summary, write_table)
from .model import EgoCogNav, InputStats, ModelConfig, MTransformer, load_network
from .training import (LossWeights, OptimizerState, load_optimizer, save_training_state, split_train_val,
                       train)

log = logging.getLogger("egocognav")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

METHOD_NAMES = {"EgoCogNav": "EgoCogNav", "MTransformer": "M_Transformer"}
DEFAULT_METHODS = ("Const_Vel", "Lin_Ext", "M_Transformer", "EgoCogNav", "EMU", "PATH_U")
VARIANTS = {
    "full": {},
    "no-aux": {"loss": {"alpha": 0.0}},
    "no-traj-extras": {"loss": {"gamma": 1.0, "lambda_var": 0.0}},
    "video+motion": {"model": {"modalities": ["video", "motion"]}},
    "video-only": {"model": {"modalities": ["video"]}},
    "motion-only": {"model": {"modalities": ["motion"]}},
}


class CheckpointError(EgoCogNavError):
    pass


# ---------------------------------------------------------------- run config

@dataclass
class DataSection:
    stride: int = 4
    max_windows: int = 0
    val_fraction: float = 0.1


@dataclass
class OptimSection:
    epochs: int = 20
    batch_size: int = 16
    lr_max: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: float = 2.0
    clip_norm: float = 1.0


@dataclass
class RunConfig:
    """Validated contents of a ``--config`` JSON file."""

    method: str = "EgoCogNav"
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    # synth
    n_episodes: int = 5
    test_fraction: float = 0.2
    world: dict = None
    random_world: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise BadConfig("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        for name, section in (("optim", OptimSection), ("data", DataSection)):
            sub = raw.get(name, {})
            bad = set(sub) - {f.name for f in fields(section)}
            if bad:
                raise BadConfig(f"unknown {name} keys: {sorted(bad)}")
            raw[name] = section(**sub)
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.method not in METHOD_NAMES:
            raise BadConfig(f"method must be one of {sorted(METHOD_NAMES)}")
        self.model_config(grid=4, channels=32)
        self.loss_weights()
        if self.optim.epochs < 1 or self.optim.batch_size < 1 or self.optim.lr_max <= 0:
            raise BadConfig("optim needs epochs >= 1, batch_size >= 1, lr_max > 0")
        if self.data.stride < 1 or not 0 <= self.data.val_fraction < 1 or self.data.max_windows < 0:
            raise BadConfig("data needs stride >= 1, 0 <= val_fraction < 1, max_windows >= 0")
        if self.n_episodes < 1 or not 0 <= self.test_fraction < 1:
            raise BadConfig("need n_episodes >= 1 and 0 <= test_fraction < 1")
        if self.world is not None:
            WorldConfig.from_dict(self.world)

    def model_config(self, grid, channels):
        overrides = dict(self.model)
        overrides.setdefault("dtype", "float32")
        for key in ("grid", "channels"):
            if key in overrides:
                raise BadConfig(f"model.{key} comes from the dataset")
        try:
            return ModelConfig.from_dict({**overrides, "grid": grid, "channels": channels})
        except TypeError as exc:
            raise BadConfig(str(exc)) from None

    def loss_weights(self):
        try:
            return LossWeights.from_dict(self.loss)
        except TypeError as exc:
            raise BadConfig(str(exc)) from None

    def optimizer(self):
        o = self.optim
        return OptimizerState(lr_max=o.lr_max, weight_decay=o.weight_decay, batch_size=o.batch_size,
                              epochs=o.epochs, warmup_epochs=o.warmup_epochs, clip_norm=o.clip_norm)

    def with_overrides(self, variant):
        raw = {"method": self.method, "model": {**self.model, **variant.get("model", {})},
               "loss": {**self.loss, **variant.get("loss", {})}, "optim": vars(self.optim).copy(),
               "data": vars(self.data).copy()}
        return RunConfig.from_dict(raw)


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise BadConfig(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise BadConfig(f"config file {path} is not valid JSON: {exc}") from None
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise BadConfig(str(exc)) from None


# ---------------------------------------------------------------- data

def load_windows(dataset, split, stride, max_windows=0, seed=0):
    root = Path(dataset)
    if not (root / "manifest.json").exists():
        raise EmptyStream(f"no dataset manifest under {root}")
    episodes = read_dataset(root, split)
    windows = windows_from_episodes(episodes, stride=stride)
    if not windows:
        raise TooShort(f"split {split!r} of {root} yields no windows")
    batch = stack_windows(windows)
    if max_windows and len(batch) > max_windows:
        keep = np.sort(np.random.default_rng([seed, 2]).permutation(len(batch))[:max_windows])
        batch = batch.subset(keep)
    return batch


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    out = Path(args.out)
    base_seed = int(args.seed)
    n = cfg.n_episodes
    n_test = int(math.ceil(cfg.test_fraction * n)) if cfg.test_fraction else 0
    episodes, splits = [], {}
    for i in range(n):
        seed = base_seed * 1000 + i
        world = WorldConfig.from_dict(cfg.world) if cfg.world is not None else random_world(seed, **cfg.random_world)
        ep = synth_generate(world, seed, episode_id=f"ep{i:04d}")
        episodes.append(ep)
        splits[ep.id] = "test" if i >= n - n_test else "train"
    manifest = write_dataset(out, episodes, splits, extra={"seed": base_seed, "generator": "synth"})
    print(f"wrote {n} episodes ({manifest['total_steps']} steps) to {out}")
    return EXIT_OK


def _new_network(cfg, batch, seed):
    _, _, g, _, c = batch.features.shape
    mc = cfg.model_config(g, c)
    cls = EgoCogNav if cfg.method == "EgoCogNav" else MTransformer
    return cls(mc, seed=seed)


def cmd_train(args, cfg):
    seed = int(args.seed)
    batch = load_windows(args.dataset, "train", cfg.data.stride, cfg.data.max_windows, seed)
    train_b, val_b = split_train_val(batch, cfg.data.val_fraction, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = cfg.loss_weights()
    opt = cfg.optimizer()
    start_epoch = 0
    if args.checkpoint:
        net, manifest = _load_checkpoint(args.checkpoint[0])
        extra = manifest.get("extra", {})
        start_epoch = int(extra.get("epoch", -1)) + 1
        opt.step = int(extra.get("step", 0))
        try:
            load_optimizer(args.checkpoint[0], net.parameters(), opt)
        except (OSError, KeyError) as exc:
            raise CheckpointError(f"cannot restore optimizer state: {exc}") from None
    else:
        net = _new_network(cfg, train_b, seed)
        net.stats = InputStats.fit(train_b)
    result = train(net, train_b, val_b, weights, opt, seed=seed, log_path=out / "train_log.csv",
                   checkpoint_dir=out / "checkpoint", start_epoch=start_epoch)
    # final weights and optimizer moments, for resuming
    save_training_state(out / "last", net, opt, start_epoch + len(result.history) - 1, seed,
                        {"loss_weights": weights.to_dict()})
    summary = {"method": METHOD_NAMES[type(net).__name__], "epochs": len(result.history),
               "steps": result.steps, "best_epoch": result.best_epoch, "best_val": result.best_val,
               "final_loss": result.final_loss, "loss_weights": weights.to_dict()}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if result.history:
        last = result.history[-1]
        print("final " + " ".join(f"{k}={last[k]:.6f}" for k in ("L_traj", "L_head", "L_U", "L_aux", "L_total")))
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_network(path)
    except (OSError, KeyError, LengthMismatch, ShapeMismatch, json.JSONDecodeError, BadConfig) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from None


def _predict_network(net, batch, chunk=256):
    outs = [net.forward(batch.subset(np.arange(s, min(s + chunk, len(batch))))) for s in range(0, len(batch), chunk)]
    traj = np.concatenate([o.traj for o in outs])
    head = np.concatenate([o.head for o in outs])
    u = np.concatenate([o.u_hat for o in outs]) if outs[0].u_hat is not None else None
    return traj, head, u


def evaluate_methods(dataset, methods, checkpoints, stride, seed=0):
    """Run every requested method on the test split; returns (tables, plot rows)."""
    test = load_windows(dataset, "test", stride)
    nets = {}
    for path in checkpoints or []:
        net, _ = _load_checkpoint(path)
        nets[METHOD_NAMES[type(net).__name__]] = net
    high = top_fraction(test.u_target)
    table1, table2, table3 = [], [], []
    traj_plot, u_plot = [], {}
    train_batch = None
    for method in methods:
        traj = head = u = None
        comparable = True
        if method == "Const_Vel":
            traj, head = const_vel(test)
        elif method == "Lin_Ext":
            traj, head = lin_ext(test)
            comparable = False
        elif method in ("EgoCogNav", "M_Transformer"):
            if method not in nets:
                log.warning("skipping %s: no checkpoint given", method)
                continue
            traj, head, u = _predict_network(nets[method], test)
        elif method in ("EMU", "PATH_U"):
            if train_batch is None:
                train_batch = load_windows(dataset, "train", stride)
            est = (EMUProxy() if method == "EMU" else PathU()).fit(train_batch)
            u = est.predict(test)
        else:
            raise BadConfig(f"unknown method {method!r}")
        rec = make_records(test, traj, head, u)
        if traj is not None:
            row = {"method": method, **forecast_summary(rec)}
            row.update({f"{k}_highU": v for k, v in forecast_summary(rec, high).items()})
            row["comparable"] = comparable
            table1.append(row)
            for i in range(len(rec)):
                for k in range(rec.pred_xy.shape[1]):
                    traj_plot.append({"window": i, "method": method, "step": k + 1,
                                      "pred_x": rec.pred_xy[i, k, 0], "pred_y": rec.pred_xy[i, k, 1],
                                      "gt_x": rec.gt_xy[i, k, 0], "gt_y": rec.gt_xy[i, k, 1]})
        if u is not None:
            table2.append({"method": method, **uncertainty_summary(rec)})
            u_plot[method] = rec.u_hat
            if method == "EgoCogNav" or not table3:
                table3 = breakdown_rows(behavior_breakdown(rec.u_hat, rec.behavior))
    u_rows = []
    for i in range(len(test)):
        row = {"window": i, "episode": test.episode_ids[i], "step": int(test.steps[i]),
               "u_human": float(test.u_target[i])}
        row.update({m: float(v[i]) for m, v in u_plot.items()})
        u_rows.append(row)
    return (table1, table2, table3), (traj_plot, u_rows, list(u_plot))


def cmd_eval(args, cfg):
    methods = _method_list(args.methods)
    (t1, t2, t3), (traj_plot, u_rows, u_methods) = evaluate_methods(
        args.dataset, methods, args.checkpoint, cfg.data.stride, int(args.seed))
    out = Path(args.out)
    write_table(out / "table1.csv", TABLE1_COLUMNS, t1)
    write_table(out / "table2.csv", TABLE2_COLUMNS, t2)
    write_table(out / "table3.csv", TABLE3_COLUMNS, t3)
    write_table(out / "plotdata" / "trajectories.csv",
                ("window", "method", "step", "pred_x", "pred_y", "gt_x", "gt_y"), traj_plot)
    write_table(out / "plotdata" / "uncertainty.csv",
                ("window", "episode", "step", "u_human", *u_methods), u_rows)
    for row in t1:
        print(f"{row['method']:>14} ADE={row['ADE']:.4f} FDE={row['FDE']:.4f} L1={row['L1']:.4f}")
    for row in t2:
        print(f"{row['method']:>14} MAE={row['MAE']:.4f} rho={row['rho']:.4f} precision={row['precision']:.4f}")
    return EXIT_OK


TABLE4_COLUMNS = ("variant", "alpha", "gamma", "lambda_var", "modalities", "ADE", "FDE", "L1", "MAE", "rho")


def cmd_ablate(args, cfg):
    names = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise BadConfig(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    seed = int(args.seed)
    batch = load_windows(args.dataset, "train", cfg.data.stride, cfg.data.max_windows, seed)
    train_b, val_b = split_train_val(batch, cfg.data.val_fraction, seed)
    test = load_windows(args.dataset, "test", cfg.data.stride)
    out = Path(args.out)
    rows = []
    for name in names:
        vcfg = cfg.with_overrides(VARIANTS[name])
        vcfg.method = "EgoCogNav"
        net = _new_network(vcfg, train_b, seed)
        net.stats = InputStats.fit(train_b)
        w = vcfg.loss_weights()
        result = train(net, train_b, val_b, w, vcfg.optimizer(), seed=seed,
                       log_path=out / name / "train_log.csv")
        if result.best_state is not None:
            net.load_state_dict(result.best_state)
        traj, head, u = _predict_network(net, test)
        rec = make_records(test, traj, head, u)
        summary = uncertainty_summary(rec)
        rows.append({"variant": name, "alpha": w.alpha, "gamma": w.gamma, "lambda_var": w.lambda_var,
                     "modalities": "+".join(net.config.modalities), **forecast_summary(rec),
                     "MAE": summary["MAE"], "rho": summary["rho"]})
        print(f"{name:>15} ADE={rows[-1]['ADE']:.4f} L1={rows[-1]['L1']:.4f} MAE={rows[-1]['MAE']:.4f}")
    write_table(out / "table4.csv", TABLE4_COLUMNS, rows)
    return EXIT_OK


def _method_list(text):
    if not text:
        return list(DEFAULT_METHODS)
    methods = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in methods if m not in DEFAULT_METHODS]
    if unknown:
        raise BadConfig(f"unknown methods {unknown}; choose from {list(DEFAULT_METHODS)}")
    return methods


# ---------------------------------------------------------------- entry point

COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser():
    parser = argparse.ArgumentParser(prog="egocognav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        if name != "synth":
            p.add_argument("--dataset", required=True, help="dataset root written by synth")
        if name in ("train", "eval"):
            p.add_argument("--checkpoint", action="append",
                           help="checkpoint directory (train: resume from it; eval: repeatable)")
        if name == "eval":
            p.add_argument("--methods", help="comma-separated subset of " + ",".join(DEFAULT_METHODS))
        if name == "ablate":
            p.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFinite as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NAN
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (EmptyStream, TooShort, ParseError, LengthMismatch, BadMagic, ShapeMismatch,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
