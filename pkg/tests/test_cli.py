"""Command-layer tests: config plumbing, file outputs, exit codes."""

import json

import numpy as np
import pytest

from jointplan.cli import (
    ABLATION_CELLS,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    EXIT_VERIFY,
    main,
)
from jointplan.core import SearchConfig
from jointplan.envs import matrix_optimal
from jointplan.kvconfig import (
    KVError,
    coerce,
    dataclass_updates,
    format_value,
    parse_kv_text,
    parse_override,
    snapshot_text,
)
from jointplan.model import load_checkpoint
from jointplan.train import METRICS_COLUMNS, TrainerConfig


class TestKvConfig:
    def test_parse_basics(self):
        text = "# comment\n\na.b = 3\nname = hello world\n"
        assert parse_kv_text(text) == {"a.b": "3", "name": "hello world"}

    def test_parse_rejects_malformed(self):
        with pytest.raises(KVError):
            parse_kv_text("just words\n")
        with pytest.raises(KVError):
            parse_kv_text("= value\n")
        with pytest.raises(KVError):
            parse_kv_text("a = 1\na = 2\n")

    def test_override_pairs(self):
        assert parse_override("k.x=5") == ("k.x", "5")
        assert parse_override("k = spaced ") == ("k", "spaced")
        with pytest.raises(KVError):
            parse_override("novalue")

    def test_coercion(self):
        assert coerce("3", int) == 3
        assert coerce("2.5", float) == 2.5
        assert coerce("true", bool) is True
        assert coerce("no", bool) is False
        assert coerce("none", int | None) is None
        assert coerce("7", int | None) == 7
        assert coerce("1,2,3", tuple[int, ...]) == (1, 2, 3)
        assert coerce("", tuple[int, ...]) == ()
        with pytest.raises(KVError):
            coerce("abc", int)
        with pytest.raises(KVError):
            coerce("maybe", bool)

    def test_format_round_trip(self):
        for value, typ in [
            (3, int), (0.1, float), (True, bool), (None, int | None),
            ((4, 5), tuple[int, ...]),
        ]:
            assert coerce(format_value(value), typ) == value

    def test_dataclass_updates(self):
        updates = dataclass_updates(
            TrainerConfig, {"train.lr": "0.01", "train.reanalyze": "true",
                            "other.key": "9"}, "train",
        )
        assert updates == {"lr": 0.01, "reanalyze": True}
        with pytest.raises(KVError):
            dataclass_updates(TrainerConfig, {"train.bogus": "1"}, "train")

    def test_snapshot_sorted_and_reparseable(self):
        mapping = {"b.z": "2", "a.y": "1"}
        text = snapshot_text(mapping)
        assert text.splitlines() == ["a.y = 1", "b.z = 2"]
        assert parse_kv_text(text) == mapping


def run_bandit(tmp_path, name, extra=()):
    out = tmp_path / name
    code = main(["bandit", "--out", str(out), "--steps", "10",
                 "--seed", "2", *extra])
    return code, out


MATRIX_ARGS = [
    "--set", "env.name=matrix", "--set", "env.seed=5",
    "--set", "env.dims=2,2",
    "--set", "search.num_sampled_actions=3",
    "--set", "search.num_simulations=4",
]
SMALL_MODEL = [
    "--set", "model.latent_dim=6", "--set", "model.trunk_hidden=6",
    "--set", "model.head_hidden=4",
]
SMALL_TRAIN = [
    "--set", "train.train_steps=3", "--set", "train.batch_size=4",
    "--set", "train.min_replay=2", "--set", "train.unroll_steps=1",
    "--set", "train.td_steps=1", "--set", "train.eval_episodes=2",
]


class TestBandit:
    def test_outputs_and_schema(self, tmp_path):
        code, out = run_bandit(tmp_path, "run")
        assert code == EXIT_OK
        lines = (out / "bandit_curves.csv").read_text().splitlines()
        assert lines[0] == "seed,step,bc_loss,bc_value,weighted_loss,weighted_value"
        assert len(lines) == 11
        assert (out / "config_resolved.kv").exists()
        svg = (out / "bandit_curves.svg").read_text()
        assert svg.lstrip().startswith("<?xml")

    def test_rerun_is_byte_identical(self, tmp_path):
        _, a = run_bandit(tmp_path, "a")
        _, b = run_bandit(tmp_path, "b")
        assert (a / "bandit_curves.csv").read_bytes() == \
            (b / "bandit_curves.csv").read_bytes()
        assert (a / "bandit_curves.svg").read_bytes() == \
            (b / "bandit_curves.svg").read_bytes()

    def test_zero_steps_header_only(self, tmp_path):
        out = tmp_path / "zero"
        code = main(["bandit", "--out", str(out), "--steps", "0"])
        assert code == EXIT_OK
        lines = (out / "bandit_curves.csv").read_text().splitlines()
        assert len(lines) == 1

    def test_config_file_and_override_precedence(self, tmp_path):
        cfg = tmp_path / "bandit.kv"
        cfg.write_text("bandit.steps = 5\nbandit.lr = 0.2\n")
        out = tmp_path / "cfg"
        code = main(["bandit", "--out", str(out), "--config", str(cfg),
                     "--set", "bandit.steps=7", "--seed", "1"])
        assert code == EXIT_OK
        snapshot = parse_kv_text((out / "config_resolved.kv").read_text())
        assert snapshot["bandit.steps"] == "7"
        assert snapshot["bandit.lr"] == "0.2"
        assert snapshot["bandit.seeds"] == "1"
        lines = (out / "bandit_curves.csv").read_text().splitlines()
        assert len(lines) == 8


class TestVerify:
    QUICK = ["--trees", "15", "--instances", "20"]

    def test_stock_build_passes(self, tmp_path, capsys):
        out = tmp_path / "v"
        code = main(["verify", "--out", str(out), *self.QUICK])
        assert code == EXIT_OK
        records = [
            json.loads(line)
            for line in (out / "report.jsonl").read_text().splitlines()
        ]
        assert {r["suite"] for r in records} == {
            "optimistic-tree", "tilted-stationarity", "constant-advantage",
            "policy-gradient", "transform-roundtrip", "support-roundtrip",
        }
        assert all(r["pass"] for r in records)
        # the report is echoed to stdout line for line
        assert len(capsys.readouterr().out.splitlines()) == len(records)

    def test_fault_injection_fails_tree_suite(self, tmp_path, capsys):
        out = tmp_path / "vf"
        code = main(["verify", "--out", str(out), *self.QUICK,
                     "--fault-quantile-floor"])
        capsys.readouterr()
        assert code == EXIT_VERIFY
        records = [
            json.loads(line)
            for line in (out / "report.jsonl").read_text().splitlines()
        ]
        tree = next(r for r in records if r["suite"] == "optimistic-tree")
        assert not tree["pass"] and tree["failures"] > 0
        others = [r for r in records if r["suite"] != "optimistic-tree"]
        assert all(r["pass"] for r in others)

    def test_report_deterministic(self, tmp_path, capsys):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            main(["verify", "--out", str(out), *self.QUICK, "--seed", "4"])
            outs.append((out / "report.jsonl").read_bytes())
        capsys.readouterr()
        assert outs[0] == outs[1]


def run_train(tmp_path, name, seed="9"):
    out = tmp_path / name
    code = main(["train", "--out", str(out), "--seed", seed,
                 *MATRIX_ARGS, *SMALL_MODEL, *SMALL_TRAIN])
    return code, out


class TestTrain:
    def test_outputs(self, tmp_path):
        code, out = run_train(tmp_path, "t")
        assert code == EXIT_OK
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRICS_COLUMNS)
        assert len(lines) == 4  # header + train_steps rows
        assert (out / "metrics.svg").exists()
        model, meta = load_checkpoint(out / "checkpoint.npz")
        assert model.config.n_agents == 2

    def test_rerun_byte_identical(self, tmp_path):
        _, a = run_train(tmp_path, "a")
        _, b = run_train(tmp_path, "b")
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_tabular_matrix_reports_optimum(self, tmp_path):
        out = tmp_path / "tab"
        code = main([
            "train", "--out", str(out),
            "--set", "env.name=matrix", "--set", "env.seed=5",
            "--set", "env.dims=2,2",
            "--set", "model.kind=tabular",
            "--set", "train.eval_episodes=2",
            "--set", "search.num_sampled_actions=4",
            "--set", "search.num_simulations=40",
        ])
        assert code == EXIT_OK
        assert len((out / "metrics.csv").read_text().splitlines()) == 1
        rows = (out / "eval.csv").read_text().splitlines()
        header = rows[0].split(",")
        with_search = dict(zip(header, rows[1].split(",")))
        assert with_search["mode"] == "with-search"

        from jointplan.core import RngStream

        payoff = RngStream(5).split("matrix-payoff").generator().uniform(
            -1.0, 1.0, (2, 2)
        )
        _, best = matrix_optimal(payoff)
        assert float(with_search["return_mean"]) == pytest.approx(best, abs=1e-12)
        assert float(with_search["return_std"]) == 0.0

    def test_tabular_requires_matrix(self, tmp_path):
        out = tmp_path / "bad"
        code = main(["train", "--out", str(out),
                     "--set", "model.kind=tabular"])
        assert code == EXIT_USAGE

    def test_derived_model_keys_rejected(self, tmp_path):
        out = tmp_path / "derived"
        code = main(["train", "--out", str(out), *MATRIX_ARGS,
                     "--set", "model.obs_dim=3"])
        assert code == EXIT_USAGE


class TestEval:
    def test_eval_trained_checkpoint(self, tmp_path):
        _, trained = run_train(tmp_path, "t")
        out = tmp_path / "e"
        code = main(["eval", "--out", str(out),
                     "--checkpoint", str(trained / "checkpoint.npz"),
                     "--episodes", "3", *MATRIX_ARGS])
        assert code == EXIT_OK
        lines = (out / "eval.csv").read_text().splitlines()
        assert lines[0] == "mode,episodes,return_mean,return_std"
        assert len(lines) == 3
        assert lines[1].startswith("with-search,3,")
        assert lines[2].startswith("raw-policy,3,")

    def test_eval_rerun_byte_identical(self, tmp_path):
        _, trained = run_train(tmp_path, "t")
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            main(["eval", "--out", str(out),
                  "--checkpoint", str(trained / "checkpoint.npz"),
                  "--episodes", "2", *MATRIX_ARGS])
            outs.append((out / "eval.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_structured_error(self, tmp_path, capsys):
        out = tmp_path / "miss"
        code = main(["eval", "--out", str(out),
                     "--checkpoint", str(tmp_path / "absent.npz"),
                     *MATRIX_ARGS])
        assert code == EXIT_RUNTIME
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "FileNotFoundError"
        # snapshot lands before the failure
        assert (out / "config_resolved.kv").exists()


class TestAblate:
    def test_grid_and_outputs(self, tmp_path):
        out = tmp_path / "ab"
        code = main(["ablate", "--out", str(out), "--seeds", "0",
                     *MATRIX_ARGS, *SMALL_MODEL,
                     "--set", "train.train_steps=2",
                     "--set", "train.batch_size=4",
                     "--set", "train.min_replay=2",
                     "--set", "train.unroll_steps=1",
                     "--set", "train.td_steps=1",
                     "--set", "train.eval_episodes=2"])
        assert code == EXIT_OK
        lines = (out / "ablation.csv").read_text().splitlines()
        assert len(lines) == 1 + len(ABLATION_CELLS)
        cells = [tuple(line.split(",")[:3]) for line in lines[1:]]
        assert cells == [tuple(c) for c in ABLATION_CELLS]
        assert (out / "ablation.svg").exists()


class TestUsageErrors:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "subcommand" in capsys.readouterr().out.lower() or True

    def test_malformed_set(self, tmp_path):
        assert main(["bandit", "--out", str(tmp_path / "x"),
                     "--set", "oops"]) == EXIT_USAGE

    def test_unknown_key(self, tmp_path):
        assert main(["bandit", "--out", str(tmp_path / "x"),
                     "--set", "bandit.nope=1"]) == EXIT_USAGE

    def test_bad_value_type(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "x"), *MATRIX_ARGS,
                     "--set", "train.lr=abc"]) == EXIT_USAGE

    def test_unknown_env_key(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "x"), *MATRIX_ARGS,
                     "--set", "env.shape=9"]) == EXIT_USAGE

    def test_bad_search_value(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "x"), *MATRIX_ARGS,
                     "--set", "search.rho=1.5"]) == EXIT_USAGE
