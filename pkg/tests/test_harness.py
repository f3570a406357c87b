import csv
import json

import numpy as np
import pytest

from egofocus import harness
from egofocus.cli import run
from egofocus.harness import ConfigError, resolve_config
from egofocus.metrics import CSV_COLUMNS
from egofocus.model import init_params
from egofocus.nn import save_checkpoint
from egofocus.scenarios import KINDS, load_scenarios

ALL_KINDS = {k: 2 for k in KINDS}
# Constant-velocity metrics on generate_counts(ALL_KINDS, seed=4), computed once from
# roll_constant_velocity predictions and the metric primitives (no model involved).
CV_ANCHOR = {"minade": 0.3729527295922758, "minfde": 0.7285053697817296, "mr": 0.0963855421686747,
             "epa": 0.9036144578313253, "l2_1s": 0.5110734067759336, "l2_2s": 2.0442936271037344,
             "l2_3s": 4.598899128167707, "l2_avg": 2.384755387349125, "col_1s": 0.0, "col_2s": 0.25,
             "col_3s": 0.4166666666666667, "col_avg": 0.22222222222222224}

TINY_MODEL = {"dim": 8, "hidden": 8, "heads": 2}


def tiny_cfg(tmp_path, **over):
    base = {"seed": 4, "counts": ALL_KINDS, "model": TINY_MODEL, "epochs": 1, "batch_size": 4,
            "out": str(tmp_path / "run")}
    base.update(over)
    return resolve_config(base)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key 'model.widht'"):
            resolve_config({"model": {"widht": 3}})

    def test_bad_kind(self):
        with pytest.raises(ConfigError, match="unknown maneuver kind"):
            resolve_config({"counts": {"u_turn": 2}})

    def test_bad_values(self):
        for over in ({"epochs": -1}, {"optimizer": {"lr_decay": "step"}}, {"model": {"k": 0}},
                     {"ablation": {"k_values": []}}):
            with pytest.raises(ConfigError):
                resolve_config(over)

    def test_default_k_and_sweep(self):
        cfg = resolve_config()
        assert cfg["model"]["k"] == 5 and cfg["ablation"]["k_values"] == [3, 5, 7]


class TestGenerate:
    def test_ten_free_flow(self, tmp_path):
        cfg = resolve_config({"counts": {"free_flow": 10}, "out": str(tmp_path)})
        path, summary = harness.cmd_generate(cfg)
        assert summary == {"free_flow": 10}
        with open(path) as fh:
            assert len(fh.read().splitlines()) == 10

    def test_byte_identical(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        a, _ = harness.cmd_generate(cfg, str(tmp_path / "a.jsonl"))
        b, _ = harness.cmd_generate(cfg, str(tmp_path / "b.jsonl"))
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_mixed_counts(self, tmp_path):
        counts = {"cut_in": 3, "yield": 1, "free_flow": 2}
        path, summary = harness.cmd_generate(resolve_config({"counts": counts, "out": str(tmp_path)}))
        assert summary == counts
        kinds = [s.kind for s in load_scenarios(path)]
        assert {k: kinds.count(k) for k in counts} == counts

    def test_config_echoed(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        path, _ = harness.cmd_generate(cfg)
        assert json.load(open(path + ".config.json")) == cfg

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(RuntimeError, match="cannot write"):
            harness.cmd_generate(tiny_cfg(tmp_path), str(blocker / "s.jsonl"))


class TestTrain:
    def test_zero_epochs_is_init(self, tmp_path):
        cfg = tiny_cfg(tmp_path, epochs=0)
        path, _ = harness.cmd_generate(cfg)
        res = harness.cmd_train(cfg, path)
        assert open(res.checkpoint_path).read() == harness.initial_checkpoint_text(cfg)
        p0 = init_params(harness.model_config(cfg))
        for k in p0:
            np.testing.assert_array_equal(res.params[k], p0[k])

    def test_same_hash(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        path, _ = harness.cmd_generate(cfg)
        a = harness.cmd_train(cfg, path)
        b = harness.cmd_train({**cfg, "out": str(tmp_path / "again")}, path)
        assert a.checkpoint_hash == b.checkpoint_hash
        assert harness.checkpoint_file_hash(a.checkpoint_path) == a.checkpoint_hash

    def test_log_rows(self, tmp_path):
        cfg = tiny_cfg(tmp_path, epochs=2, batch_size=5)
        path, _ = harness.cmd_generate(cfg)
        harness.cmd_train(cfg, path)
        rows = read_csv(tmp_path / "run" / "train_log.csv")
        assert len(rows) == 2 * 3  # 12 scenes in batches of 5
        assert set(rows[0]) == set(harness.LOG_COLUMNS)

    def test_resume_matches_straight_run(self, tmp_path):
        cfg = tiny_cfg(tmp_path, epochs=2)
        path, _ = harness.cmd_generate(cfg)
        straight = harness.cmd_train(cfg, path)
        first = harness.cmd_train({**cfg, "epochs": 1, "out": str(tmp_path / "half")}, path)
        resumed = harness.cmd_train({**cfg, "out": str(tmp_path / "half")}, path,
                                    resume=first.checkpoint_path)
        for k in straight.params:
            np.testing.assert_array_equal(resumed.params[k], straight.params[k])

    def test_non_finite_aborts_with_id(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        scenes = load_scenarios(harness.cmd_generate(cfg)[0])
        scenes[0].agent_futures[:] = np.nan
        with pytest.raises(FloatingPointError, match=scenes[0].id):
            harness.train(cfg, scenes)


class TestEval:
    def test_twice_identical(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        path, _ = harness.cmd_generate(cfg)
        res = harness.cmd_train(cfg, path)
        harness.cmd_eval(cfg, res.checkpoint_path, path, out_dir=str(tmp_path / "e1"))
        harness.cmd_eval(cfg, res.checkpoint_path, path, out_dir=str(tmp_path / "e2"))
        assert (tmp_path / "e1" / "metrics.csv").read_bytes() == (tmp_path / "e2" / "metrics.csv").read_bytes()

    def test_zero_checkpoint_is_constant_velocity(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        path, _ = harness.cmd_generate(cfg)
        ckpt = tmp_path / "zero.json"
        save_checkpoint(ckpt, init_params(harness.model_config(cfg)).zeros_like(), cfg)
        rep = harness.cmd_eval(cfg, str(ckpt), path).as_row()
        for key, value in CV_ANCHOR.items():
            assert rep[key] == pytest.approx(value, abs=1e-12), key

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_dump_selects_min_k_n(self, tmp_path, k):
        cfg = tiny_cfg(tmp_path, model={**TINY_MODEL, "k": k})
        path, _ = harness.cmd_generate(cfg)
        ckpt = tmp_path / "init.json"
        save_checkpoint(ckpt, init_params(harness.model_config(cfg)), cfg)
        harness.cmd_eval(cfg, str(ckpt), path)
        dump = json.load(open(tmp_path / "run" / "eval_dump.json"))
        assert dump["config"] == cfg
        by_id = {s.id: s for s in load_scenarios(path)}
        for d in dump["scenarios"]:
            assert len(d["selected"]) == min(k, by_id[d["scenario_id"]].num_agents)
            assert set(d["selected"][0]) == {"agent_index", "score", "alpha"}

    def test_dim_mismatch_names_fields(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        path, _ = harness.cmd_generate(cfg)
        ckpt = tmp_path / "c.json"
        save_checkpoint(ckpt, init_params(harness.model_config(cfg)), cfg)
        wide = tiny_cfg(tmp_path, model={**TINY_MODEL, "dim": 16})
        with pytest.raises(ConfigError, match="node_enc.1.weight"):
            harness.cmd_eval(wide, str(ckpt), path)

    def test_csv_header_and_config(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        path, _ = harness.cmd_generate(cfg)
        ckpt = tmp_path / "c.json"
        save_checkpoint(ckpt, init_params(harness.model_config(cfg)), cfg)
        harness.cmd_eval(cfg, str(ckpt), path)
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# EPA")
        assert json.loads(lines[1][len("# config: "):]) == cfg
        assert lines[2] == ",".join(CSV_COLUMNS)


class TestAblate:
    def test_rows_and_baseline(self, tmp_path):
        ab = {"train_count": 6, "eval_count": 5, "k_values": [1, 2]}
        cfg = tiny_cfg(tmp_path, ablation=ab)
        rows = harness.cmd_ablate(cfg, out_dir=str(tmp_path / "a"))
        assert [r["variant"] for r in rows] == ["baseline", "elai_k1", "elai_k2",
                                                "elai_fla_k1", "elai_fla_k2"]
        other = harness.cmd_ablate(tiny_cfg(tmp_path, ablation=ab, model={**TINY_MODEL, "k": 2}))
        assert rows[0] == other[0]
        written = read_csv(tmp_path / "a" / "ablation.csv")
        assert len(written) == 1 + 2 + 2
        assert (tmp_path / "a" / "ablation.csv").read_text().startswith("# config: ")


class TestCli:
    def test_round_trip(self, tmp_path, capsys):
        out = str(tmp_path / "cli")
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"counts": {"cut_in": 2, "free_flow": 2}, "epochs": 1,
                                        "model": TINY_MODEL}))
        assert run(["generate", "--config", str(cfg_path), "--out", out]) == 0
        assert "cut_in" in capsys.readouterr().out
        scen = f"{out}/scenarios.jsonl"
        assert run(["train", "--config", str(cfg_path), "--out", out, "--scenarios", scen]) == 0
        assert "sha256" in capsys.readouterr().out
        assert run(["eval", "--checkpoint", f"{out}/checkpoint.json", "--scenarios", scen,
                    "--out", out, "--k", "2", "--no-fla"]) == 0
        assert "col_avg" in capsys.readouterr().out
        dump = json.load(open(f"{out}/eval_dump.json"))
        assert dump["config"]["model"]["dim"] == 8 and dump["config"]["model"]["k"] == 2

    def test_validation_errors_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"modle": {}}))
        assert run(["generate", "--config", str(bad)]) == 2
        assert run(["generate", "--k", "0"]) == 2
        assert run(["train", "--out", str(tmp_path)]) == 2
        assert run(["bogus"]) == 2

    def test_runtime_errors_exit_1(self, tmp_path):
        assert run(["train", "--scenarios", str(tmp_path / "missing.jsonl"),
                    "--out", str(tmp_path)]) == 1
