"""End-to-end CLI tests: exit codes, file outputs, run manifests."""

from __future__ import annotations

import json

import numpy as np
import pytest

from dial.cli import main
from dial.dataio import RunManifest, read_grid_csv, read_metrics
from dial.trainer import ControllerPolicy

CFG = {"env": "basic_nav", "seed": 3, "env_steps": 150, "n_experts": 3,
       "expert_steps": 400, "n_rollouts": 2, "constraint_steps": 2,
       "eval_episodes": 2, "env_config": {"horizon": 60}}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-experts -> train-il -> train-tl, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("chain")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(CFG))
    assert main(["gen-experts", "--config", str(cfg_path),
                 "--out-dir", str(root / "exp")]) == 0
    assert main(["train-il", "--config", str(cfg_path),
                 "--experts", str(root / "exp" / "experts.jsonl"),
                 "--out-dir", str(root / "il")]) == 0
    assert main(["train-tl", "--config", str(cfg_path),
                 "--constraint", str(root / "il" / "constraint.ckpt"),
                 "--policy", str(root / "il" / "policy.ckpt"),
                 "--out-dir", str(root / "tl")]) == 0
    return {"root": root, "cfg": cfg_path,
            "experts": root / "exp" / "experts.jsonl",
            "constraint": root / "il" / "constraint.ckpt",
            "policy": root / "tl" / "policy.ckpt"}


class TestDispatch:
    def test_unknown_subcommand(self, capsys):
        assert main(["optimize-everything"]) == 64
        err = capsys.readouterr().err
        assert "unknown command" in err
        assert "usage:" in err

    def test_no_args_prints_usage(self, capsys):
        assert main([]) == 0
        assert "usage:" in capsys.readouterr().out

    def test_help_flag(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-experts" in capsys.readouterr().out

    def test_subcommand_help(self, capsys):
        assert main(["train-il", "--help"]) == 0
        assert "--experts" in capsys.readouterr().out

    def test_missing_required_flag(self, capsys):
        # argparse reports missing --experts; config-style failure
        assert main(["train-il"]) == 2


class TestConfigErrors:
    def test_malformed_json_names_path(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"env": "basic_nav",')
        code = main(["eval", "--config", str(bad), "--policy", "x.ckpt",
                     "--out-dir", str(tmp_path)])
        assert code == 2
        assert "bad.json" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["eval", "--config", str(tmp_path / "none.json"),
                     "--policy", "x.ckpt", "--out-dir", str(tmp_path)])
        assert code == 2
        assert "none.json" in capsys.readouterr().err

    def test_no_env_given(self, tmp_path, capsys):
        code = main(["eval", "--policy", "x.ckpt", "--out-dir", str(tmp_path)])
        assert code == 2
        assert "env" in capsys.readouterr().err

    def test_unknown_env(self, tmp_path):
        assert main(["eval", "--env", "gridworld", "--policy", "x.ckpt",
                     "--out-dir", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "cfg.json"
        bad.write_text(json.dumps({"env": "basic_nav", "warmup": 5}))
        assert main(["eval", "--policy", "x.ckpt", "--config", str(bad),
                     "--out-dir", str(tmp_path)]) == 2
        assert "warmup" in capsys.readouterr().err

    def test_uncertified_experts_rejected(self, tmp_path, chain):
        data = tmp_path / "experts.jsonl"
        data.write_text(chain["experts"].read_text())
        (tmp_path / "experts.manifest.json").write_text(
            json.dumps({"certified": False}))
        assert main(["train-il", "--config", str(chain["cfg"]),
                     "--experts", str(data),
                     "--out-dir", str(tmp_path / "il")]) == 2


class TestRuntimeErrors:
    def test_infeasible_expert_exit_3(self, tmp_path, capsys):
        cfg = dict(CFG, env_config={"horizon": 40,
                                    "hazard_center": [0.5, 0.5]})
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        assert main(["gen-experts", "--config", str(p),
                     "--out-dir", str(tmp_path / "exp")]) == 3
        assert "refusing" in capsys.readouterr().err

    def test_wrong_checkpoint_kind_exit_3(self, tmp_path, chain):
        assert main(["eval", "--config", str(chain["cfg"]),
                     "--policy", str(chain["constraint"]),
                     "--out-dir", str(tmp_path)]) == 3


class TestEvalCommand:
    def test_metrics_schema(self, tmp_path, chain, capsys):
        out = tmp_path / "ev"
        assert main(["eval", "--config", str(chain["cfg"]),
                     "--policy", str(chain["policy"]),
                     "--out-dir", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        payload = json.loads((out / "eval.json").read_text())
        for doc in (printed, payload):
            assert {"rr", "cr", "cv", "se"} <= set(doc)
        assert len(payload["episodes"]) == CFG["eval_episodes"]
        assert 0.0 <= payload["cv"] <= 1.0

    def test_seed_flag_overrides_config(self, tmp_path, chain):
        out = tmp_path / "ev"
        assert main(["eval", "--config", str(chain["cfg"]),
                     "--policy", str(chain["policy"]), "--seed", "77",
                     "--out-dir", str(out)]) == 0
        man = RunManifest.load(out / "run_manifest.json")
        assert man.seeds == [77]

    def test_same_seed_same_output(self, tmp_path, chain):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["eval", "--config", str(chain["cfg"]),
                         "--policy", str(chain["policy"]),
                         "--out-dir", str(out)]) == 0
            payload = json.loads((out / "eval.json").read_text())
            outs.append(payload)
        assert outs[0] == outs[1]


class TestRunManifests:
    def test_every_stage_writes_verifiable_manifest(self, chain):
        for sub in ("exp", "il", "tl"):
            man = RunManifest.load(chain["root"] / sub / "run_manifest.json")
            assert man.artifacts, sub
            assert man.seeds == [CFG["seed"]]
            assert len(man.binary_version) == 16

    def test_train_il_lists_all_outputs(self, chain):
        man = RunManifest.load(chain["root"] / "il" / "run_manifest.json")
        assert set(man.artifacts) == {"constraint", "policy", "metrics"}

    def test_metrics_log_readable(self, chain):
        recs = read_metrics(chain["root"] / "tl" / "metrics.jsonl")
        assert recs
        assert {"iteration", "rr", "cr", "cv", "se"} <= set(recs[0])


class TestExports:
    def test_constraint_map_is_20_by_20(self, tmp_path, chain):
        out = tmp_path / "map"
        assert main(["export-constraint-map", "--config", str(chain["cfg"]),
                     "--constraint", str(chain["constraint"]),
                     "--out-dir", str(out)]) == 0
        grid = read_grid_csv(out / "constraint_map.csv")
        assert grid.shape == (20, 20)
        assert np.all((grid >= 0.0) & (grid <= 1.0))
        header = (out / "constraint_map.csv").read_text().splitlines()[0]
        assert header.startswith("#")
        assert "axis 0" in header and "axis 1" in header

    def test_constraint_map_risk_level_flag(self, tmp_path, chain):
        outs = []
        for lam in ("0.1", "0.9"):
            out = tmp_path / f"map{lam}"
            assert main(["export-constraint-map", "--config", str(chain["cfg"]),
                         "--constraint", str(chain["constraint"]),
                         "--risk-level", lam, "--out-dir", str(out)]) == 0
            outs.append(read_grid_csv(out / "constraint_map.csv"))
        assert not np.array_equal(outs[0], outs[1])

    def test_constraint_map_needs_2d_obs(self, tmp_path, chain, capsys):
        cfg = tmp_path / "cp.json"
        cfg.write_text(json.dumps({"env": "cartpole"}))
        assert main(["export-constraint-map", "--config", str(cfg),
                     "--constraint", str(chain["constraint"]),
                     "--out-dir", str(tmp_path)]) == 2
        assert "2-d" in capsys.readouterr().err

    def test_visitation_map_counts(self, tmp_path, chain):
        out = tmp_path / "vis"
        assert main(["export-visitation-map", "--config", str(chain["cfg"]),
                     "--policy", str(chain["policy"]),
                     "--out-dir", str(out)]) == 0
        grid = read_grid_csv(out / "visitation_map.csv")
        assert grid.shape == (20, 20)
        total = grid.sum()
        assert 0 < total <= CFG["eval_episodes"] * 60


class TestSweep:
    def test_sweep_rows_cover_lambda_grid(self, tmp_path, chain):
        cfg = dict(CFG, env_steps=60, eval_episodes=1)
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        out = tmp_path / "sw"
        assert main(["sweep-lambda", "--config", str(p),
                     "--constraint", str(chain["constraint"]),
                     "--policy", str(chain["root"] / "il" / "policy.ckpt"),
                     "--out-dir", str(out)]) == 0
        rows = read_metrics(out / "sweep.jsonl")
        assert [r["lambda"] for r in rows] == pytest.approx(
            [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
        for r in rows:
            assert {"rr", "cr", "cr_total", "cv", "se", "feasible"} <= set(r)
            assert r["feasible"] in (True, False)
        for lam in ("0.1", "0.9"):
            assert (out / f"lam_{lam}" / "policy.ckpt").exists()
