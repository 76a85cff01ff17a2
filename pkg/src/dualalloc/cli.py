"""Command-line harness: train policies, run baselines, verify, dump policies.

Every artifact starts with an audit header carrying the fully resolved
configuration and the run seed. The per-iteration metric log is a JSONL
file whose rows are deterministic for a fixed seed; measured step timings go
to a separate timings file so the metric log stays byte-reproducible.

Configuration can come from an INI file (sections [run], [problem],
[trainer]) with command-line flags taking precedence.
"""

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    binary_reference_rates,
    equal_power_policy,
    exact_awgn_dual_sgd,
    random_k_binary_policy,
    random_k_policy,
    wmmse_binary_reference_policy,
    wmmse_mac_policy,
)
from .mlp import load_model, mean_allocation_batch, save_model
from .problem import ContractError, DualIterates
from .problems import (
    AwgnConfig,
    InterferenceConfig,
    build_awgn,
    build_interference,
    draw_experiment_params,
    evaluate_policy,
    stochastic_policy,
)
from .trainer import MetricRecord, TrainerConfig, train
from .verify import check_sandwich, surrogate_sandwich

OUTPUT_ROOT_ENV = "DUALALLOC_OUTPUT_ROOT"


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (json.JSONDecodeError, KeyError, ValueError, OSError) as exc:
        raise ContractError(f"cannot load checkpoint {path}: {exc}") from exc

PROBLEM_KINDS = ("awgn", "interference-mac", "interference-binary", "toy")

_BASELINES_BY_PROBLEM = {
    "awgn": ("exact-dual-sgd", "equal-power"),
    "toy": ("exact-dual-sgd", "equal-power"),
    "interference-mac": ("equal-power", "random-k", "wmmse"),
    "interference-binary": ("random-k", "wmmse"),
}

_METRIC_FIELDS = [f.name for f in fields(MetricRecord) if f.name != "wall_ms"]


def metric_to_json(record):
    """Deterministic JSON line for one metric record (timing excluded)."""
    payload = {name: getattr(record, name) for name in _METRIC_FIELDS}
    return json.dumps(payload, sort_keys=True)


def metric_from_json(line):
    payload = json.loads(line)
    return MetricRecord(wall_ms=None, **payload)


def _resolve_output_dir(out):
    if out is not None:
        path = Path(out)
    else:
        path = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "latest"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _header_dict(args_dict, seed):
    return {
        "record": "header",
        "package_version": __version__,
        "seed": seed,
        "config": {k: v for k, v in sorted(args_dict.items()) if v is not None},
    }


def _write_csv(path, header, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, value in sorted(header.items()):
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _load_config_file(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ContractError(f"cannot read config file {path}")
    merged = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            merged[key.replace("-", "_")] = value
    return merged


_INT_KEYS = {"users", "iters", "batch", "seed", "param_seed", "eval_batch",
             "states", "levels", "k"}
_FLOAT_KEYS = {"pmax", "p0", "lr", "lr_theta", "lr_x", "lr_lambda", "lr_mu",
               "dual_decay", "x_cap", "power"}


def _coerce(key, value):
    if not isinstance(value, str):
        return value
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key == "hidden":
        return value
    return value


def _merge_config(args, parser_defaults):
    """defaults < config file < explicit flags."""
    merged = dict(parser_defaults)
    if getattr(args, "config", None):
        for key, value in _load_config_file(args.config).items():
            merged[key] = _coerce(key, value)
    for key, value in vars(args).items():
        if key == "config":
            continue
        if value is not None and (key not in merged or value != parser_defaults.get(key)):
            merged[key] = value
        merged.setdefault(key, value)
    return merged


def _parse_hidden(spec):
    if isinstance(spec, tuple):
        return spec
    try:
        return tuple(int(tok) for tok in str(spec).split(",") if tok.strip())
    except ValueError as exc:
        raise ContractError(f"bad hidden layer spec {spec!r}") from exc


def build_problem(conf):
    """Problem + untrained model from a resolved config mapping."""
    kind = conf["problem"]
    if kind not in PROBLEM_KINDS:
        raise ContractError(f"unknown problem kind {kind!r}")
    hidden = _parse_hidden(conf.get("hidden") or ((8, 4) if kind in ("awgn", "toy") else (32, 16)))
    if kind == "toy":
        cfg = AwgnConfig(m=1, w=1.0, v=1.0, p_max=conf.get("pmax") or 1.0,
                         hidden=hidden, x_cap=conf.get("x_cap") or 5.0)
        spec, model = build_awgn(cfg)
        return spec, model, cfg
    users = conf.get("users")
    if users is None:
        raise ContractError(f"--users is required for problem {kind!r}")
    if conf.get("param_seed") is None:
        w, v = 1.0, 1.0
    else:
        w, v = draw_experiment_params(users, conf["param_seed"])
    if kind == "awgn":
        cfg = AwgnConfig(m=users, w=w, v=v, p_max=conf.get("pmax") or 20.0,
                         hidden=hidden, x_cap=conf.get("x_cap") or 5.0)
        spec, model = build_awgn(cfg)
        return spec, model, cfg
    mode = "continuous" if kind == "interference-mac" else "binary"
    cfg = InterferenceConfig(
        m=users, mode=mode, w=w, v=v,
        p_max=conf.get("pmax") or 20.0, p0=conf.get("p0") or 10.0,
        hidden=hidden, x_cap=conf.get("x_cap") or 5.0,
    )
    spec, model = build_interference(cfg)
    return spec, model, cfg


def trainer_config(conf):
    lr = conf.get("lr")
    kwargs = {}
    for name, key in (("lr_theta", "lr_theta"), ("lr_x", "lr_x"),
                      ("lr_lambda", "lr_lambda"), ("lr_mu", "lr_mu")):
        value = conf.get(key)
        if value is None and lr is not None:
            value = lr
        if value is not None:
            kwargs[name] = value
    for name in ("batch", "dual_decay", "seed"):
        if conf.get(name) is not None:
            kwargs[name] = conf[name]
    if conf.get("estimator") is not None:
        kwargs["estimator_kind"] = conf["estimator"]
    return TrainerConfig(iters=conf["iters"], **kwargs)


def cmd_train(args, parser_defaults):
    conf = _merge_config(args, parser_defaults)
    conf["iters"] = conf.get("iters") or 1000
    spec, model, _ = build_problem(conf)
    tcfg = trainer_config(conf)
    out_dir = _resolve_output_dir(conf.get("out"))
    header = _header_dict(
        {k: conf.get(k) for k in ("problem", "users", "pmax", "p0", "param_seed",
                                  "hidden", "iters", "batch", "dual_decay",
                                  "estimator", "x_cap", "lr", "lr_theta", "lr_x",
                                  "lr_lambda", "lr_mu")},
        tcfg.seed,
    )
    metrics_path = out_dir / "metrics.jsonl"
    timings = []
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")

        def sink(record):
            fh.write(metric_to_json(record) + "\n")
            timings.append((record.iter, record.wall_ms))

        state, _ = train(spec, model, tcfg, metric_sink=sink)

    _write_csv(out_dir / "timings.csv", {"seed": tcfg.seed},
               ["iter", "wall_ms"], timings)
    save_model(model, out_dir / "checkpoint.json")
    if conf.get("dump_policy_grid"):
        _dump_grid(model, conf["dump_policy_grid"], out_dir,
                   {"checkpoint": str(out_dir / "checkpoint.json")})
    trainer_state = {
        "record": "trainer-state",
        "header": header,
        "k": state.k,
        "x": state.x.tolist(),
        "lam": state.duals.lam.tolist(),
        "mu": state.duals.mu.tolist(),
        "adam_m": state.adam_m.tolist(),
        "adam_v": state.adam_v.tolist(),
    }
    with open(out_dir / "trainer_state.json", "w", encoding="utf-8") as fh:
        json.dump(trainer_state, fh)
    print(f"wrote {metrics_path} ({tcfg.iters} iterations)")
    return 0


def _baseline_policy(kind, baseline, spec, cfg, conf):
    if baseline == "exact-dual-sgd":
        result = exact_awgn_dual_sgd(cfg, seed=conf.get("seed") or 0)
        return result.policy(cfg), {"mu_pow": result.mu_pow,
                                    "sgd_objective": result.objective}
    if baseline == "equal-power":
        return equal_power_policy(cfg.m, cfg.p_max), {}
    if baseline == "random-k":
        k = conf.get("k") or 1
        if kind == "interference-binary":
            return random_k_binary_policy(cfg.m, k), {}
        return random_k_policy(cfg.m, k, conf.get("power") or cfg.p_max / k), {}
    if baseline == "wmmse":
        if kind == "interference-binary":
            return wmmse_binary_reference_policy(cfg), {}
        return wmmse_mac_policy(cfg), {}
    raise ContractError(f"unknown baseline {baseline!r}")


def cmd_baseline(args, parser_defaults):
    conf = _merge_config(args, parser_defaults)
    kind, baseline = conf["problem"], conf["baseline"]
    allowed = _BASELINES_BY_PROBLEM.get(kind, ())
    if baseline not in allowed:
        raise ContractError(
            f"baseline {baseline!r} does not apply to problem {kind!r}; "
            f"choose from {allowed}"
        )
    spec, _, cfg = build_problem(conf)
    policy, extra = _baseline_policy(kind, baseline, spec, cfg, conf)
    eval_batch = conf.get("eval_batch") or 20000
    seed = conf.get("seed") or 0

    if kind == "interference-binary" and baseline == "wmmse":
        # continuous reference: rates evaluated outside the binary ProblemSpec
        rng_h = spec.sampler.draw(eval_batch, _eval_rng(seed))
        powers = policy(rng_h)
        rates = binary_reference_rates(cfg, rng_h, powers)
        objective = float(rates.mean(axis=0) @ cfg.w)
        ef = np.append(rates.mean(axis=0), cfg.p_max - powers.sum(axis=1).mean())
        budget = float(ef[-1])
    else:
        result = evaluate_policy(spec, policy, eval_batch, seed)
        objective, ef, budget = result.objective, result.expected_f, result.budget_residual

    out_dir = _resolve_output_dir(conf.get("out"))
    header = _header_dict(
        {k: conf.get(k) for k in ("problem", "baseline", "users", "pmax", "p0",
                                  "param_seed", "k", "power", "eval_batch")},
        seed,
    )
    # budget row stores p_max - E[total power], so recover the mean draw power
    mean_power = cfg.p_max - budget
    row = [baseline, objective, budget, mean_power, eval_batch] + [
        float(x) for x in ef
    ]
    columns = ["baseline", "objective", "budget_residual", "mean_total_power",
               "eval_batch"] + [f"ef_{i}" for i in range(len(ef))]
    for key, value in extra.items():
        columns.append(key)
        row.append(value)
    _write_csv(out_dir / "summary.csv", {**header["config"], "seed": seed},
               columns, [row])
    print(f"{baseline} objective {objective:.6f} (budget residual {budget:+.4f})")
    return 0


def _eval_rng(seed):
    from .rng import named_stream

    return named_stream(seed, "evaluation")


def cmd_verify(args, parser_defaults):
    conf = _merge_config(args, parser_defaults)
    conf.setdefault("problem", "toy")
    spec, model, _ = build_problem(conf)
    states = conf.get("states") or 16
    levels = conf.get("levels") or 32
    seed = conf.get("seed") or 0
    out_dir = _resolve_output_dir(conf.get("out"))

    if conf.get("surrogate"):
        report = surrogate_sandwich(spec, states=states, levels=levels, seed=seed)
    else:
        if conf.get("checkpoint"):
            model = _load_checkpoint(conf["checkpoint"])
            with open(Path(conf["checkpoint"]).parent / "trainer_state.json",
                      encoding="utf-8") as fh:
                saved = json.load(fh)
            x_bar = np.asarray(saved["x"], dtype=float)
            duals = DualIterates(np.asarray(saved["lam"]), np.asarray(saved["mu"]))
        else:
            tcfg = trainer_config({**conf, "iters": conf.get("iters") or 8000})
            state, _ = train(spec, model, tcfg)
            x_bar, duals = state.x, state.duals
        report = check_sandwich(spec, model, x_bar, duals, states=states,
                                levels=levels, seed=seed)

    payload = {"record": "duality-gap-report",
               "header": _header_dict({"problem": conf.get("problem"),
                                       "states": states, "levels": levels},
                                      seed),
               **report.to_dict()}
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    status = "ok" if report.sandwich_ok else "FAILED"
    print(f"sandwich {status}: lower {report.lower_bound:.6f} <= "
          f"dual {report.d_phi_hat:.6f} <= upper {report.upper_bound:.6f}")
    return 0 if report.sandwich_ok else 1


def _parse_grid(spec):
    try:
        start, stop, count = spec.split(":")
        return np.linspace(float(start), float(stop), int(count))
    except ValueError as exc:
        raise ContractError(f"bad grid spec {spec!r}, want start:stop:count") from exc


def _dump_grid(model, grid_spec, out_dir, header_extra):
    grid = _parse_grid(grid_spec)
    if getattr(model, "n_copies", None) is None:
        raise ContractError("policy grid dumps require a per-user policy bank")
    h = np.tile(grid[:, None], (1, model.n_copies))
    outputs = model.forward_batch(h)
    means = mean_allocation_batch(model, h)
    sigmas = outputs[:, 1::2]
    columns = ["h"] + [f"mean_user{i}" for i in range(model.n_copies)] + [
        f"stddev_user{i}" for i in range(model.n_copies)
    ]
    rows = [
        [grid[j]] + [float(x) for x in means[j]] + [float(s) for s in sigmas[j]]
        for j in range(grid.size)
    ]
    _write_csv(out_dir / "policy_grid.csv", {**header_extra, "grid": grid_spec},
               columns, rows)
    return grid.size


def cmd_dump_policy(args, parser_defaults):
    conf = _merge_config(args, parser_defaults)
    model = _load_checkpoint(conf["checkpoint"])
    grid_spec = conf.get("grid") or "0:4:81"
    out_dir = _resolve_output_dir(conf.get("out"))
    n_rows = _dump_grid(model, grid_spec, out_dir,
                        {"checkpoint": conf["checkpoint"]})
    print(f"wrote {out_dir / 'policy_grid.csv'} ({n_rows} rows)")
    return 0


def _add_common_problem_flags(sub):
    sub.add_argument("--problem", choices=PROBLEM_KINDS)
    sub.add_argument("--users", type=int)
    sub.add_argument("--pmax", type=float)
    sub.add_argument("--p0", type=float)
    sub.add_argument("--param-seed", dest="param_seed", type=int)
    sub.add_argument("--hidden")
    sub.add_argument("--x-cap", dest="x_cap", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out")
    sub.add_argument("--config")


def _add_trainer_flags(sub):
    sub.add_argument("--iters", type=int)
    sub.add_argument("--batch", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--lr-theta", dest="lr_theta", type=float)
    sub.add_argument("--lr-x", dest="lr_x", type=float)
    sub.add_argument("--lr-lambda", dest="lr_lambda", type=float)
    sub.add_argument("--lr-mu", dest="lr_mu", type=float)
    sub.add_argument("--dual-decay", dest="dual_decay", type=float)
    sub.add_argument("--estimator", choices=("policy-gradient", "finite-difference"))


def make_parser():
    parser = argparse.ArgumentParser(
        prog="dualalloc",
        description="Train and verify constrained wireless allocation policies.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="run the primal-dual trainer")
    _add_common_problem_flags(p_train)
    _add_trainer_flags(p_train)
    p_train.add_argument("--dump-policy-grid", dest="dump_policy_grid",
                         metavar="START:STOP:COUNT")
    p_train.set_defaults(func=cmd_train)

    p_base = subs.add_parser("baseline", help="evaluate a reference strategy")
    _add_common_problem_flags(p_base)
    p_base.add_argument("--baseline", required=True,
                        choices=("exact-dual-sgd", "equal-power", "random-k", "wmmse"))
    p_base.add_argument("--k", type=int)
    p_base.add_argument("--power", type=float)
    p_base.add_argument("--eval-batch", dest="eval_batch", type=int)
    p_base.set_defaults(func=cmd_baseline)

    p_verify = subs.add_parser("verify", help="duality-gap sandwich on a tiny instance")
    _add_common_problem_flags(p_verify)
    _add_trainer_flags(p_verify)
    p_verify.add_argument("--surrogate", action="store_true")
    p_verify.add_argument("--checkpoint")
    p_verify.add_argument("--states", type=int)
    p_verify.add_argument("--levels", type=int)
    p_verify.set_defaults(func=cmd_verify)

    p_dump = subs.add_parser("dump-policy", help="tabulate a trained policy on a channel grid")
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--grid", help="start:stop:count")
    p_dump.add_argument("--out")
    p_dump.set_defaults(func=cmd_dump_policy)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    defaults = {
        key: parser.get_default(key)
        for key in vars(args)
        if key not in ("func", "command")
    }
    try:
        return args.func(args, defaults)
    except (ContractError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
