"""Command-line front end.

Subcommands: ``bandit`` (softmax descent comparison), ``verify`` (oracle
suites), ``train`` / ``eval`` (the planning loop), ``ablate`` (the 2x2
backup/policy grid). Every subcommand resolves its config from defaults,
an optional ``--config`` file, and ``--set key=value`` overrides, writes
the resolved snapshot into the output directory before doing any work,
and is bit-reproducible for a fixed seed.

Exit codes: 0 success, 1 usage, 2 verification failure, 3 runtime error.
"""

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .core import RngStream, SearchConfig, replace_fields
from .envs import bandit_experiment, make_env
from .kvconfig import (
    KVError,
    dataclass_updates,
    load_kv,
    parse_override,
    write_snapshot,
)
from .model import LearnedModel, load_checkpoint, save_checkpoint
from .train import (
    METRICS_COLUMNS,
    TrainerConfig,
    evaluate,
    model_config_for_env,
    tabular_matrix_model,
    train_loop,
)
from . import verify as verify_suites

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_RUNTIME = 3

SNAPSHOT_NAME = "config_resolved.kv"

ABLATION_CELLS = (
    ("full", "optimistic", "weighted"),
    ("no-weighting", "optimistic", "cloning"),
    ("no-optimistic", "mean", "weighted"),
    ("both-off", "mean", "cloning"),
)

# model fields derived from the environment, not settable by config
_MODEL_DERIVED = ("n_agents", "obs_dim", "action_dims", "support")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    tmp.replace(path)


def _resolve(args, defaults: dict, scalar_keys: set, prefixes: tuple) -> dict:
    """Merge defaults <- config file <- --set pairs <- dedicated flags."""
    mapping = dict(defaults)
    if getattr(args, "config", None):
        mapping.update(load_kv(args.config))
    for pair in getattr(args, "set", None) or []:
        key, value = parse_override(pair)
        mapping[key] = value
    for key in mapping:
        if key in scalar_keys or any(key.startswith(p) for p in prefixes):
            continue
        raise KVError(f"unknown config key {key!r} for this subcommand")
    return mapping


def _prepare_out(args, mapping: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / SNAPSHOT_NAME, mapping)
    return out


def _runtime_error(err: Exception) -> int:
    record = {"error": type(err).__name__, "detail": str(err)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return EXIT_RUNTIME


def _int_key(mapping: dict, key: str) -> int:
    try:
        return int(mapping[key])
    except ValueError:
        raise KVError(f"{key}: expected an integer, got {mapping[key]!r}") from None


def _float_key(mapping: dict, key: str) -> float:
    try:
        return float(mapping[key])
    except ValueError:
        raise KVError(f"{key}: expected a number, got {mapping[key]!r}") from None


def _int_list(mapping: dict, key: str) -> list[int]:
    raw = mapping[key]
    try:
        return [int(part.strip()) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise KVError(f"{key}: expected comma-separated integers, got {raw!r}") from None


def _bool_key(mapping: dict, key: str) -> bool:
    raw = mapping[key].lower()
    if raw in ("true", "1", "yes"):
        return True
    if raw in ("false", "0", "no"):
        return False
    raise KVError(f"{key}: expected a boolean, got {mapping[key]!r}")


_ENV_FIELDS = {
    "bandit": {},
    "matrix": {"seed": "int", "dims": "ints"},
    "gridworld": {
        "width": "int",
        "height": "int",
        "horizon": "int",
        "window_radius": "int",
        "step_penalty": "float",
        "success_reward": "float",
        "starts": "pairs",
        "goals": "pairs",
    },
}


def _parse_pairs(raw: str, key: str):
    """Coordinate list like ``0,0;4,0``."""
    pairs = []
    for chunk in raw.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise KVError(f"{key}: expected x,y;x,y pairs, got {raw!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise KVError(f"{key}: expected integer coordinates in {raw!r}") from None
    return tuple(pairs)


def _build_env(mapping: dict):
    name = mapping.get("env.name", "gridworld")
    if name not in _ENV_FIELDS:
        raise KVError(f"env.name must be one of {sorted(_ENV_FIELDS)}, got {name!r}")
    field_types = _ENV_FIELDS[name]
    kwargs = {}
    for key, raw in mapping.items():
        if not key.startswith("env.") or key == "env.name":
            continue
        field = key[len("env."):]
        kind = field_types.get(field)
        if kind is None:
            raise KVError(f"unknown key {key!r} for env {name!r}")
        if kind == "int":
            kwargs[field] = _int_key(mapping, key)
        elif kind == "float":
            kwargs[field] = _float_key(mapping, key)
        elif kind == "ints":
            kwargs[field] = tuple(_int_list(mapping, key))
        else:
            kwargs[field] = _parse_pairs(raw, key)
    return make_env(name, **kwargs)


def _build_search(mapping: dict) -> SearchConfig:
    updates = dataclass_updates(SearchConfig, mapping, "search")
    return replace_fields(SearchConfig(), **updates).validate()


def _build_trainer(mapping: dict) -> TrainerConfig:
    updates = dataclass_updates(TrainerConfig, mapping, "train")
    cfg = replace_fields(TrainerConfig(), **updates)
    cfg.validate()
    return cfg


def _model_overrides(mapping: dict) -> dict:
    for name in _MODEL_DERIVED:
        if f"model.{name}" in mapping:
            raise KVError(f"model.{name} is derived from the environment")
    filtered = {
        k: v for k, v in mapping.items()
        if k.startswith("model.") and k != "model.kind"
    }
    from .model import ModelConfig

    return dataclass_updates(ModelConfig, filtered, "model")


# ---------------------------------------------------------------------------
# subcommands


def cmd_bandit(args) -> int:
    defaults = {
        "bandit.lr": "0.1",
        "bandit.steps": "1500",
        "bandit.alpha": "1.0",
        "bandit.seeds": "0,1,2,3,4",
    }
    mapping = _resolve(args, defaults, set(defaults), ("bandit.",))
    if args.seed is not None:
        mapping["bandit.seeds"] = str(args.seed)
    if args.steps is not None:
        mapping["bandit.steps"] = str(args.steps)
    if args.lr is not None:
        mapping["bandit.lr"] = repr(args.lr)
    for key in mapping:
        if key not in defaults:
            raise KVError(f"unknown config key {key!r} for bandit")
    out = _prepare_out(args, mapping)

    lr = _float_key(mapping, "bandit.lr")
    steps = _int_key(mapping, "bandit.steps")
    alpha = _float_key(mapping, "bandit.alpha")
    seeds = _int_list(mapping, "bandit.seeds")
    if lr <= 0:
        raise KVError("bandit.lr must be > 0")
    if steps < 0:
        raise KVError("bandit.steps must be >= 0")
    if not seeds:
        raise KVError("bandit.seeds must name at least one seed")

    try:
        runs = bandit_experiment(lr=lr, steps=steps, seeds=seeds, alpha=alpha)
        rows = []
        for run in runs:
            for s in range(1, steps + 1):
                rows.append((
                    run.seed, s,
                    float(run.loss_bc[s]), float(run.value_bc[s]),
                    float(run.loss_weighted[s]), float(run.value_weighted[s]),
                ))
        _write_csv(
            out / "bandit_curves.csv",
            ("seed", "step", "bc_loss", "bc_value", "weighted_loss",
             "weighted_value"),
            rows,
        )
        xs = np.arange(1, steps + 1)
        mean_bc = np.mean([run.value_bc[1:] for run in runs], axis=0) \
            if steps else np.zeros(0)
        mean_w = np.mean([run.value_weighted[1:] for run in runs], axis=0) \
            if steps else np.zeros(0)
        from .figures import line_chart

        line_chart(
            out / "bandit_curves.svg",
            [("behavior-cloning", xs, mean_bc),
             ("advantage-weighted", xs, mean_w)],
            xlabel="gradient step",
            ylabel="expected arm value",
            title="softmax bandit descent",
        )
    except Exception as err:  # noqa: BLE001
        return _runtime_error(err)
    return EXIT_OK


def cmd_verify(args) -> int:
    defaults = {
        "verify.trees": "1000",
        "verify.instances": "1000",
        "verify.seed": "0",
        "verify.fault_quantile_floor": "false",
    }
    mapping = _resolve(args, defaults, set(defaults), ("verify.",))
    if args.seed is not None:
        mapping["verify.seed"] = str(args.seed)
    if args.trees is not None:
        mapping["verify.trees"] = str(args.trees)
    if args.instances is not None:
        mapping["verify.instances"] = str(args.instances)
    if args.fault_quantile_floor:
        mapping["verify.fault_quantile_floor"] = "true"
    for key in mapping:
        if key not in defaults:
            raise KVError(f"unknown config key {key!r} for verify")
    out = _prepare_out(args, mapping)

    trees = _int_key(mapping, "verify.trees")
    instances = _int_key(mapping, "verify.instances")
    seed = _int_key(mapping, "verify.seed")
    floor_mode = _bool_key(mapping, "verify.fault_quantile_floor")

    try:
        results = verify_suites.run_all(
            trees=trees, instances=instances, seed=seed, floor_mode=floor_mode
        )
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in results]
        report = out / "report.jsonl"
        tmp = report.with_name(report.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        tmp.replace(report)
        for line in lines:
            print(line)
    except Exception as err:  # noqa: BLE001
        return _runtime_error(err)
    if all(r.passed for r in results):
        return EXIT_OK
    return EXIT_VERIFY


_TRAIN_DEFAULTS = {
    "seed": "0",
    "env.name": "gridworld",
    "model.kind": "learned",
}


def _train_one(env, overrides: dict, seed: int, trainer: TrainerConfig,
               search_cfg: SearchConfig):
    model = LearnedModel(
        model_config_for_env(env, **overrides),
        rng=RngStream(seed).split("model-init"),
    )
    result = train_loop(env, model, trainer, search_cfg, seed=seed)
    return model, result


def _eval_both(model, env, search_cfg: SearchConfig, episodes: int, seed: int):
    ws_mean, ws_std, _ = evaluate(
        model, env, search_cfg, mode="with-search", episodes=episodes,
        rng=RngStream(seed).split("eval-with-search"),
    )
    rp_mean, rp_std, _ = evaluate(
        model, env, search_cfg, mode="raw-policy", episodes=episodes,
        rng=RngStream(seed).split("eval-raw-policy"),
    )
    return ws_mean, ws_std, rp_mean, rp_std


def cmd_train(args) -> int:
    mapping = _resolve(
        args, _TRAIN_DEFAULTS, {"seed"},
        ("env.", "model.", "train.", "search."),
    )
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    out = _prepare_out(args, mapping)

    seed = _int_key(mapping, "seed")
    env = _build_env(mapping)
    search_cfg = _build_search(mapping)
    trainer = _build_trainer(mapping)
    kind = mapping.get("model.kind", "learned")
    if kind not in ("learned", "tabular"):
        raise KVError(f"model.kind must be learned or tabular, got {kind!r}")
    if kind == "tabular" and not hasattr(env, "payoff"):
        raise KVError("model.kind=tabular requires env.name=matrix")
    overrides = _model_overrides(mapping)

    try:
        if kind == "tabular":
            # exact model: nothing to learn, report evaluation directly
            model = tabular_matrix_model(env.payoff)
            _write_csv(out / "metrics.csv", METRICS_COLUMNS, [])
            ws_mean, ws_std, rp_mean, rp_std = _eval_both(
                model, env, search_cfg, trainer.eval_episodes, seed
            )
            _write_csv(
                out / "eval.csv",
                ("mode", "episodes", "return_mean", "return_std"),
                [("with-search", trainer.eval_episodes, ws_mean, ws_std),
                 ("raw-policy", trainer.eval_episodes, rp_mean, rp_std)],
            )
            return EXIT_OK

        model, result = _train_one(env, overrides, seed, trainer, search_cfg)
        rows = [[row[c] for c in METRICS_COLUMNS] for row in result.rows]
        _write_csv(out / "metrics.csv", METRICS_COLUMNS, rows)
        save_checkpoint(out / "checkpoint.npz", model)

        steps = [row["step"] for row in result.rows]
        losses = [row["loss_total"] for row in result.rows]
        eval_pts = [
            (row["step"], row["eval_return_mean"])
            for row in result.rows if row["eval_return_mean"] is not None
        ]
        from .figures import line_chart

        series = [("total loss", steps, losses)]
        if eval_pts:
            series.append((
                "eval return",
                [p[0] for p in eval_pts],
                [p[1] for p in eval_pts],
            ))
        line_chart(
            out / "metrics.svg", series,
            xlabel="gradient step", ylabel="value",
            title="training metrics",
        )
    except Exception as err:  # noqa: BLE001
        return _runtime_error(err)
    return EXIT_OK


def cmd_eval(args) -> int:
    defaults = {
        "seed": "0",
        "env.name": "gridworld",
        "eval.episodes": "32",
    }
    mapping = _resolve(args, defaults, {"seed"}, ("env.", "search.", "eval."))
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.episodes is not None:
        mapping["eval.episodes"] = str(args.episodes)
    mapping["eval.checkpoint"] = str(args.checkpoint)
    for key in mapping:
        if key.startswith("eval.") and key not in ("eval.episodes", "eval.checkpoint"):
            raise KVError(f"unknown config key {key!r} for eval")
    out = _prepare_out(args, mapping)

    seed = _int_key(mapping, "seed")
    episodes = _int_key(mapping, "eval.episodes")
    if episodes < 1:
        raise KVError("eval.episodes must be >= 1")
    env = _build_env(mapping)
    search_cfg = _build_search(mapping)

    ckpt = Path(args.checkpoint)
    try:
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        model, _ = load_checkpoint(ckpt)
        ws_mean, ws_std, rp_mean, rp_std = _eval_both(
            model, env, search_cfg, episodes, seed
        )
        _write_csv(
            out / "eval.csv",
            ("mode", "episodes", "return_mean", "return_std"),
            [("with-search", episodes, ws_mean, ws_std),
             ("raw-policy", episodes, rp_mean, rp_std)],
        )
    except Exception as err:  # noqa: BLE001
        return _runtime_error(err)
    return EXIT_OK


def cmd_ablate(args) -> int:
    defaults = {
        "env.name": "gridworld",
        "ablate.seeds": "0,1,2",
    }
    mapping = _resolve(
        args, defaults, set(defaults),
        ("env.", "model.", "train.", "search.", "ablate."),
    )
    if args.seed is not None:
        mapping["ablate.seeds"] = str(args.seed)
    if args.seeds is not None:
        mapping["ablate.seeds"] = args.seeds
    for key in mapping:
        if key.startswith("ablate.") and key != "ablate.seeds":
            raise KVError(f"unknown config key {key!r} for ablate")
    out = _prepare_out(args, mapping)

    seeds = _int_list(mapping, "ablate.seeds")
    if not seeds:
        raise KVError("ablate.seeds must name at least one seed")
    env_template = _build_env(mapping)  # validates env keys up front
    del env_template
    base_search = _build_search(mapping)
    base_trainer = _build_trainer(mapping)
    overrides = _model_overrides(mapping)

    try:
        rows = []
        finals: dict[str, list[float]] = {cell: [] for cell, _, _ in ABLATION_CELLS}
        for cell, backup, policy_mode in ABLATION_CELLS:
            search_cfg = replace_fields(base_search, backup=backup)
            trainer = replace_fields(base_trainer, policy_mode=policy_mode)
            for seed in seeds:
                env = _build_env(mapping)
                model, result = _train_one(
                    env, overrides, seed, trainer, search_cfg
                )
                ws_mean, ws_std, rp_mean, rp_std = _eval_both(
                    model, env, search_cfg, trainer.eval_episodes, seed
                )
                finals[cell].append(ws_mean)
                rows.append((
                    cell, backup, policy_mode, seed,
                    result.env_steps, result.grad_steps,
                    ws_mean, ws_std, rp_mean, rp_std,
                ))
        _write_csv(
            out / "ablation.csv",
            ("cell", "backup", "policy_mode", "seed", "env_steps",
             "grad_steps", "with_search_mean", "with_search_std",
             "raw_policy_mean", "raw_policy_std"),
            rows,
        )
        from .figures import bar_chart

        labels = [cell for cell, _, _ in ABLATION_CELLS]
        medians = [statistics.median(finals[c]) for c in labels]
        bar_chart(
            out / "ablation.svg", labels, medians,
            ylabel="median eval return",
            title="backup/policy ablation",
        )
    except Exception as err:  # noqa: BLE001
        return _runtime_error(err)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser, default_out: str) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", default=default_out, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bandit", help="softmax-arm descent comparison")
    _add_common(p, "out-bandit")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_bandit)

    p = sub.add_parser("verify", help="oracle verification suites")
    _add_common(p, "out-verify")
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument(
        "--fault-quantile-floor", action="store_true",
        help="inject the quantile floor fault (negative control)",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="run the training loop")
    _add_common(p, "out-train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p, "out-eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="backup/policy 2x2 ablation grid")
    _add_common(p, "out-ablate")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help exits 0 through here
        return EXIT_OK if not err.code else EXIT_USAGE
    try:
        return args.func(args)
    except (KVError, UsageError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as err:
        # config construction errors (bad field values, unknown envs)
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
