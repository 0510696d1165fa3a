import json
import math

import numpy as np
import pytest

from egocognav.cli import RunConfig, main
from egocognav.episodes import straight_corridor
from egocognav.metrics import read_table
from egocognav.training import read_training_log


def _write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "synth.json", {"n_episodes": 4, "test_fraction": 0.25})
    assert main(["synth", "--config", cfg, "--seed", "2", "--out", str(root / "ds")]) == 0
    return root / "ds"


def test_synth_writes_n_episodes_deterministically(tmp_path):
    cfg = _write(tmp_path / "c.json", {"n_episodes": 5})
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert len([p for p in (tmp_path / "a").iterdir() if p.is_dir()]) == 5
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["total_steps"] == sum(e["length"] for e in manifest["episodes"])
    assert [e["seed"] for e in manifest["episodes"]] == [7000, 7001, 7002, 7003, 7004]
    assert [e["split"] for e in manifest["episodes"]] == ["train"] * 4 + ["test"]


@pytest.mark.parametrize("config", [
    {"bogus": 1},
    {"optim": {"epochs": 0}},
    {"model": {"d_model": 10}},
    {"loss": {"gamma": 0.5}},
    {"method": "Oracle"},
    {"world": {"nodes": []}},
])
def test_invalid_config_exits_2(tmp_path, config, capsys):
    cfg = _write(tmp_path / "bad.json", config)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "config error" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


def test_missing_dataset_exits_3(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3
    assert main(["eval", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_bad_checkpoint_exits_5(tmp_path, dataset):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.json").write_text("{}")
    assert main(["eval", "--dataset", str(dataset), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "ck")]) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_4(tmp_path, dataset):
    cfg = _write(tmp_path / "c.json", {"model": {"d_model": 8, "n_heads": 2}, "optim": {"epochs": 3, "lr_max": 1e38,
                                       "clip_norm": 0, "warmup_epochs": 0}, "data": {"max_windows": 64}})
    assert main(["train", "--config", cfg, "--dataset", str(dataset), "--out", str(tmp_path / "o")]) == 4


def test_unknown_method_or_variant_exits_2(tmp_path, dataset):
    assert main(["eval", "--dataset", str(dataset), "--out", str(tmp_path / "o"), "--methods", "Oracle"]) == 2
    assert main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path / "o"), "--variants", "nope"]) == 2


def test_run_config_rejects_unknown_sections():
    with pytest.raises(Exception):
        RunConfig.from_dict({"optim": {"momentum": 0.9}})
    assert RunConfig.from_dict({}).optim.epochs == 20


def test_const_vel_eval_on_corridor(tmp_path):
    world = straight_corridor(gait_amplitude=0.0, speed_noise=0.0, head_jitter=0.0, head_bob=0.0).to_dict()
    cfg = _write(tmp_path / "c.json", {"n_episodes": 2, "test_fraction": 0.5, "world": world})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "ds")]) == 0
    assert main(["eval", "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "ev"),
                 "--methods", "Const_Vel"]) == 0
    row = read_table(tmp_path / "ev" / "table1.csv")[0]
    assert row["method"] == "Const_Vel"
    assert row["ADE"] <= 1e-9 and row["FDE"] <= 1e-9


def test_eval_high_u_subset_and_repeatability(tmp_path, dataset):
    args = ["eval", "--dataset", str(dataset), "--methods", "Const_Vel,Lin_Ext,EMU,PATH_U"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    u_rows = read_table(tmp_path / "a" / "plotdata" / "uncertainty.csv")
    n = len(u_rows)
    k = math.ceil(0.2 * n)
    u = np.array([r["u_human"] for r in u_rows])
    top = set(np.argsort(-u, kind="stable")[:k].tolist())
    per_window = {}
    for r in read_table(tmp_path / "a" / "plotdata" / "trajectories.csv"):
        if r["method"] == "Const_Vel":
            d = math.hypot(r["pred_x"] - r["gt_x"], r["pred_y"] - r["gt_y"])
            per_window.setdefault(r["window"], []).append(d)
    ade_top = np.mean([np.mean(per_window[i]) for i in sorted(top)])
    table1 = {r["method"]: r for r in read_table(tmp_path / "a" / "table1.csv")}
    assert table1["Const_Vel"]["ADE_highU"] == pytest.approx(ade_top, abs=1e-12)
    assert table1["Lin_Ext"]["comparable"] == 0
    table2 = {r["method"]: r for r in read_table(tmp_path / "a" / "table2.csv")}
    assert set(table2) == {"EMU", "PATH_U"}
    assert [r["behavior"] for r in read_table(tmp_path / "a" / "table3.csv")][-2:] == ["Any", "Neutral"]


def test_train_smoke_config_reduces_loss(tmp_path, dataset):
    cfg = _write(tmp_path / "c.json", {"optim": {"epochs": 30}, "data": {"max_windows": 512, "stride": 2,
                                                                         "val_fraction": 0.0}})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--dataset", str(dataset), "--out", str(out)]) == 0
    log = read_training_log(out / "train_log.csv")
    assert len(log) == 30
    assert log[-1]["L_total"] < 0.7 * log[0]["L_total"]
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["steps"] == 30 * 32
    assert summary["loss_weights"] == {"lambda_traj": 1.0, "lambda_head": 1.0, "lambda_u": 1.0,
                                       "lambda_var": 0.3, "alpha": 0.3, "gamma": 0.98}


def test_train_resume_continues_step_count(tmp_path, dataset):
    base = {"model": {"d_model": 16}, "data": {"max_windows": 64}}
    one = _write(tmp_path / "one.json", {**base, "optim": {"epochs": 1}})
    two = _write(tmp_path / "two.json", {**base, "optim": {"epochs": 2}})
    assert main(["train", "--config", one, "--dataset", str(dataset), "--out", str(tmp_path / "a")]) == 0
    first = json.loads((tmp_path / "a" / "train_summary.json").read_text())
    assert main(["train", "--config", two, "--dataset", str(dataset), "--out", str(tmp_path / "b"),
                 "--checkpoint", str(tmp_path / "a" / "last")]) == 0
    second = json.loads((tmp_path / "b" / "train_summary.json").read_text())
    assert second["steps"] == 2 * first["steps"]
    assert [r["epoch"] for r in read_training_log(tmp_path / "b" / "train_log.csv")] == [1]


def test_train_eval_with_checkpoints(tmp_path, dataset):
    cfg = {"model": {"d_model": 16}, "optim": {"epochs": 1}, "data": {"max_windows": 64}}
    ego = _write(tmp_path / "ego.json", cfg)
    mt = _write(tmp_path / "mt.json", {**cfg, "method": "MTransformer"})
    assert main(["train", "--config", ego, "--dataset", str(dataset), "--out", str(tmp_path / "ego")]) == 0
    assert main(["train", "--config", mt, "--dataset", str(dataset), "--out", str(tmp_path / "mt")]) == 0
    assert main(["eval", "--dataset", str(dataset), "--out", str(tmp_path / "ev"),
                 "--checkpoint", str(tmp_path / "ego" / "checkpoint"),
                 "--checkpoint", str(tmp_path / "mt" / "checkpoint")]) == 0
    methods = [r["method"] for r in read_table(tmp_path / "ev" / "table1.csv")]
    assert methods == ["Const_Vel", "Lin_Ext", "M_Transformer", "EgoCogNav"]
    assert [r["method"] for r in read_table(tmp_path / "ev" / "table2.csv")] == ["EgoCogNav", "EMU", "PATH_U"]


def test_ablate_default_variants(tmp_path, dataset):
    cfg = _write(tmp_path / "c.json", {"model": {"d_model": 8, "n_heads": 2, "n_fusion_layers": 1,
                                                 "n_decoder_layers": 1},
                                       "optim": {"epochs": 1}, "data": {"max_windows": 32}})
    assert main(["ablate", "--config", cfg, "--dataset", str(dataset), "--out", str(tmp_path / "ab")]) == 0
    rows = {r["variant"]: r for r in read_table(tmp_path / "ab" / "table4.csv")}
    assert list(rows) == ["full", "no-aux", "no-traj-extras", "video+motion", "video-only", "motion-only"]
    assert rows["no-aux"]["alpha"] == 0.0 and rows["full"]["alpha"] == 0.3
    assert rows["no-traj-extras"]["gamma"] == 1.0 and rows["no-traj-extras"]["lambda_var"] == 0.0
    assert rows["motion-only"]["modalities"] == "motion"
