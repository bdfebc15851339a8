"""Command-line entry point wiring the lab into reproducible workflows.

Every subcommand reads one JSON config file, applies ``--set key=value``
overrides (dotted keys, values parsed as JSON when possible), echoes the
effective config into the output directory before doing any work, and
exits 0 on success, 1 on a validation problem (unusable config, unknown
flags), or 2 on a runtime failure (non-finite loss, empty rejection
sampling yield).

Run ``dftlab <subcommand> --help`` for per-command flags; config schemas
are documented in the README.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .evalreport import (
    comparison_report,
    evaluate,
    lowest_bin_tokens,
    token_histogram,
    write_comparison,
)
from .model import load_checkpoint
from .rft import RftConfig, sample_and_filter
from .seeding import derive_seed
from .tasks import TaskSpec, generate_dataset, load_jsonl, save_jsonl, verify
from .theory import implicit_reward_scan, run_verification
from .training import RunConfig, TrainingAborted, train_run, write_manifest

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

SWEEP_LEARNING_RATES = (2e-4, 1e-4, 5e-5, 1e-5)


class CliError(Exception):
    """Configuration problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_VALIDATION)


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: dict, assignments) -> dict:
    """Apply dotted-key overrides like run.learning_rate=5e-4."""
    for item in assignments or ():
        if "=" not in item:
            raise CliError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(f"override {key!r} walks through a non-object")
        node[parts[-1]] = _coerce(raw)
    return config


def _load_config(path: str, assignments) -> dict:
    if not os.path.exists(path):
        raise CliError(f"config file {path!r} does not exist")
    try:
        with open(path) as f:
            config = json.load(f)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path!r} is not valid JSON: {exc}")
    if not isinstance(config, dict):
        raise CliError("config root must be a JSON object")
    return apply_overrides(config, assignments)


def _prepare_dir(config: dict, out_override) -> str:
    out = out_override or config.get("output_dir")
    if not out:
        raise CliError("no output directory (set output_dir or pass --out)")
    config["output_dir"] = out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "effective_config.json"), "w") as f:
        json.dump(config, f, indent=1, sort_keys=True)
    return out


def _eval_hook(eval_set, k, temperature, seed, cap):
    subset = eval_set[:cap] if cap else eval_set

    def hook(step, model):
        result = evaluate(model, subset, k=k, temperature=temperature,
                          seed=derive_seed(seed, "curve", step))
        return {"in_dist_acc": result.avg_at_k}

    return hook


# --- subcommands ---


def cmd_gen_data(config: dict, out: str) -> int:
    spec = TaskSpec.from_dict(config["task"])
    train, eval_in, eval_ood = generate_dataset(
        spec,
        int(config.get("n_train", 5000)),
        int(config.get("n_eval_in", 500)),
        int(config.get("n_eval_ood", 500)),
    )
    for name, demos in (("train", train), ("eval_in", eval_in),
                        ("eval_ood", eval_ood)):
        save_jsonl(demos, os.path.join(out, f"{name}.jsonl"))
    write_manifest(out)
    print(f"wrote {len(train)}/{len(eval_in)}/{len(eval_ood)} items to {out}")
    return EXIT_OK


def cmd_train(config: dict, out: str) -> int:
    run_dict = dict(config["run"])
    run_dict["output_dir"] = out
    run = RunConfig.from_dict(run_dict)
    data = load_jsonl(config["train_data"])
    hooks = []
    if config.get("eval_data") and run.eval_every > 0:
        hooks.append(_eval_hook(
            load_jsonl(config["eval_data"]),
            int(config.get("eval_k", 4)),
            float(config.get("eval_temperature", 1.0)),
            run.seed,
            int(config.get("eval_prompt_cap", 0)),
        ))
    train_run(run, data, eval_hooks=hooks)
    write_manifest(out)
    print(f"training complete: {out}")
    return EXIT_OK


def cmd_eval(config: dict, out: str) -> int:
    model = load_checkpoint(config["checkpoint"])
    data = load_jsonl(config["eval_data"])
    split = config.get("split", "in")
    if split not in ("in", "ood"):
        raise CliError(f"split must be 'in' or 'ood', got {split!r}")
    result = evaluate(
        model, data,
        k=int(config.get("k", 16)),
        temperature=float(config.get("temperature", 1.0)),
        seed=int(config.get("seed", 0)),
        split="in-dist" if split == "in" else "ood",
        greedy=bool(config.get("greedy", False)),
    )
    path = os.path.join(out, f"eval_{split}.json")
    with open(path, "w") as f:
        json.dump(result.to_dict(), f, indent=1)
    write_manifest(out)
    print(f"avg@{result.k} = {result.avg_at_k:.4f} ({split}) -> {path}")
    return EXIT_OK


def cmd_rft_sample(config: dict, out: str) -> int:
    model = load_checkpoint(config["checkpoint"])
    prompts = load_jsonl(config["prompts_data"])
    rft = RftConfig.from_dict(config.get("rft", {}))
    retained, stats = sample_and_filter(model, prompts, verify, rft)
    save_jsonl(retained, os.path.join(out, "filtered.jsonl"))
    with open(os.path.join(out, "rft_stats.json"), "w") as f:
        json.dump(stats.to_dict(), f, indent=1)
    write_manifest(out)
    print(f"kept {stats.n_retained} of {stats.n_samples} samples "
          f"(keep rate {stats.keep_rate:.3f})")
    if not retained:
        print("no verified samples; raise n_responses_per_prompt or warm "
              "the model further", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_verify(config: dict, out) -> int:
    results = run_verification(
        seed=int(config.get("seed", 0)),
        vocab_sizes=tuple(config.get("vocab_sizes", (2, 3))),
        horizons=tuple(config.get("horizons", (1, 2, 3, 4))),
        models_per_cell=int(config.get("models_per_cell", 5)),
        n_samples=int(config.get("n_samples", 100_000)),
    )
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}: {r['detail']}")
    if out:
        with open(os.path.join(out, "verify_report.json"), "w") as f:
            json.dump(results, f, indent=1)
        write_manifest(out)
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_RUNTIME


def cmd_analyze(config: dict, out: str) -> int:
    model = load_checkpoint(config["checkpoint"])
    data = load_jsonl(config["data"])
    tag = config.get("model_tag", os.path.basename(config["checkpoint"]))
    hist = token_histogram(model, data, bin_edges=config.get("bin_edges"),
                           model_tag=tag)
    with open(os.path.join(out, "histogram.json"), "w") as f:
        json.dump(hist.to_dict(), f, indent=1)
    ranked = lowest_bin_tokens(model, data, float(config.get("threshold", 0.05)))
    with open(os.path.join(out, "lowest_bin_tokens.json"), "w") as f:
        json.dump([{"token": t, "count": c} for t, c in ranked], f, indent=1)
    scan = implicit_reward_scan(model, data)
    with open(os.path.join(out, "implicit_weights.json"), "w") as f:
        json.dump(scan, f, indent=1)
    write_manifest(out)
    print(f"analyzed {hist.total} tokens -> {out}")
    return EXIT_OK


def cmd_report(config: dict, out: str) -> int:
    report = comparison_report(config.get("run_dirs", []))
    write_comparison(report, os.path.join(out, "comparison.csv"),
                     os.path.join(out, "comparison.json"))
    write_manifest(out)
    print(f"{len(report['rows'])} runs reported, "
          f"{len(report['errors'])} errors -> {out}")
    return EXIT_OK


def _train_and_eval(run_dict: dict, data, eval_in, eval_ood, eval_cfg,
                    run_dir: str, hooks=()):
    run_dict = dict(run_dict)
    run_dict["output_dir"] = run_dir
    run = RunConfig.from_dict(run_dict)
    model, metrics = train_run(run, data, eval_hooks=hooks)
    for split, demos in (("in", eval_in), ("ood", eval_ood)):
        if not demos:
            continue
        result = evaluate(
            model, demos,
            k=eval_cfg["k"], temperature=eval_cfg["temperature"],
            seed=derive_seed(run.seed, "final-eval", split),
            split="in-dist" if split == "in" else "ood",
        )
        with open(os.path.join(run_dir, f"eval_{split}.json"), "w") as f:
            json.dump(result.to_dict(), f, indent=1)
    write_manifest(run_dir)
    return model, metrics


def _eval_cfg(config: dict) -> dict:
    return {
        "k": int(config.get("eval_k", 4)),
        "temperature": float(config.get("eval_temperature", 1.0)),
        "cap": int(config.get("eval_prompt_cap", 0)),
    }


def _load_splits(config: dict):
    data = load_jsonl(config["train_data"])
    eval_in = load_jsonl(config["eval_in"]) if config.get("eval_in") else []
    eval_ood = load_jsonl(config["eval_ood"]) if config.get("eval_ood") else []
    cfg = _eval_cfg(config)
    if cfg["cap"]:
        eval_in = eval_in[: cfg["cap"]]
        eval_ood = eval_ood[: cfg["cap"]]
    return data, eval_in, eval_ood, cfg


def cmd_sweep(config: dict, out: str) -> int:
    data, eval_in, eval_ood, eval_cfg = _load_splits(config)
    rates = config.get("learning_rates", list(SWEEP_LEARNING_RATES))
    run_dirs = []
    for lr in rates:
        run_dict = dict(config["run"])
        run_dict["learning_rate"] = float(lr)
        run_dir = os.path.join(out, f"lr{lr:g}")
        _train_and_eval(run_dict, data, eval_in, eval_ood, eval_cfg, run_dir)
        run_dirs.append(run_dir)
    report = comparison_report(run_dirs)
    write_comparison(report, os.path.join(out, "comparison.csv"),
                     os.path.join(out, "comparison.json"))
    write_manifest(out)
    print(f"swept {len(rates)} learning rates -> {out}")
    return EXIT_OK


def reproduce_figures(config: dict) -> dict:
    """Learning curves, histograms, and hyperparameter sweeps.

    Trains the plain and token-scaled objectives under one shared config,
    emits accuracy-vs-step CSVs with identical step grids, histogram
    JSONs over the same training set, and short learning-rate and
    batch-size sweep tables. Returns the run directories produced.
    """
    out = config["output_dir"]
    data, eval_in, eval_ood, eval_cfg = _load_splits(config)
    kinds = ("sft", "dft_token")
    run_dirs = []

    # convergence curves and final histograms under identical configs
    for kind in kinds:
        run_dict = dict(config["run"])
        run_dict["loss"] = {"kind": kind}
        run_dir = os.path.join(out, f"fig1_{kind}")
        hooks = []
        if eval_in and run_dict.get("eval_every", 0) > 0:
            hooks.append(_eval_hook(
                eval_in, eval_cfg["k"], eval_cfg["temperature"],
                int(run_dict.get("seed", 0)), eval_cfg["cap"],
            ))
        model, _ = _train_and_eval(run_dict, data, eval_in, eval_ood,
                                   eval_cfg, run_dir, hooks=hooks)
        run_dirs.append(run_dir)

        curve_path = os.path.join(out, f"learning_curve_{kind}.csv")
        with open(curve_path, "w") as f:
            f.write("step,in_dist_acc\n")
            evals_path = os.path.join(run_dir, "evals.jsonl")
            if os.path.exists(evals_path):
                for line in open(evals_path):
                    row = json.loads(line)
                    f.write(f"{row['step']},{row['in_dist_acc']!r}\n")

        hist = token_histogram(model, data, model_tag=kind)
        with open(os.path.join(out, f"histogram_{kind}.json"), "w") as f:
            json.dump(hist.to_dict(), f, indent=1)

    # short sweeps over learning rate and batch size, both objectives
    sweep_steps = config.get("sweep_max_steps")
    for axis, values in (
        ("lr", config.get("sweep_learning_rates", list(SWEEP_LEARNING_RATES))),
        ("batch", config.get("sweep_batch_sizes", [])),
    ):
        if not values:
            continue
        axis_dirs = []
        for value in values:
            for kind in kinds:
                run_dict = dict(config["run"])
                run_dict["loss"] = {"kind": kind}
                run_dict["eval_every"] = 0
                if sweep_steps is not None:
                    run_dict["max_steps"] = int(sweep_steps)
                    run_dict["epochs"] = None
                if axis == "lr":
                    run_dict["learning_rate"] = float(value)
                else:
                    run_dict["batch_size"] = int(value)
                run_dir = os.path.join(out, f"fig3_{axis}{value:g}_{kind}")
                _train_and_eval(run_dict, data, eval_in, eval_ood, eval_cfg, run_dir)
                axis_dirs.append(run_dir)
        report = comparison_report(axis_dirs)
        write_comparison(
            report,
            os.path.join(out, f"fig3_{axis}_comparison.csv"),
            os.path.join(out, f"fig3_{axis}_comparison.json"),
        )
        run_dirs.extend(axis_dirs)

    write_manifest(out)
    return {"run_dirs": run_dirs}


def cmd_figures(config: dict, out: str) -> int:
    result = reproduce_figures(config)
    print(f"figure runs: {len(result['run_dirs'])} -> {out}")
    return EXIT_OK


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rft-sample": cmd_rft_sample,
    "verify": cmd_verify,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "sweep": cmd_sweep,
    "figures": cmd_figures,
}

_NEEDS_DIR = {name for name in _HANDLERS if name != "verify"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dftlab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override applied after the config loads")
        p.add_argument("--out", default=None,
                       help="output directory (overrides config output_dir)")
    return parser


def dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = _load_config(args.config, args.set)
        if args.subcommand in _NEEDS_DIR:
            out = _prepare_dir(config, args.out)
        else:
            out = args.out or config.get("output_dir")
            if out:
                out = _prepare_dir(config, args.out)
        return _HANDLERS[args.subcommand](config, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
