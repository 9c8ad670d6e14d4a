"""
Command-line interface.

Every subcommand accepts the shared run flags; values merge with `ROT_<FIELD>` environment
variables, the `--config` file and the built-in defaults, in that order of precedence.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 missing artifact, 5 model or layer
mismatch, 6 corrupt file.
"""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path

import pandas as pd
import yaml
from loguru import logger

from cot_repe import Pipeline
from cot_repe.config import RunConfig, load_yaml
from cot_repe.control import save_policy
from cot_repe.dump import DumpSource, dump_prefixes, dump_prompts, dump_stimulus_set, save_dump
from cot_repe.enum import Polarity
from cot_repe.evaluation import parse_condition, regenerate_robustness_table, write_benchmark
from cot_repe.exceptions import CotRepeError, InvalidConfig, IoFailure
from cot_repe.localization import write_reports
from cot_repe.reading import load_reading_vectors, save_reading_vectors, write_text_export
from cot_repe.tasks import generate_task, write_task

__all__ = ["build_parser", "main"]

# Flags whose destination differs from the `RunConfig` field they set
_FLAG_FIELDS = {"format": "formats"}

_ABLATION_N = (32, 64, 128, 256, 512)
_ABLATION_LAST = (1, 3, 5, 10, 15)


def _run_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run settings")
    group.add_argument("--config", help="YAML config file, or the name of a bundled config (e.g. `toy`).")
    group.add_argument("--model", type=Path, help="Checkpoint to load; a toy model is built from --seed otherwise.")
    group.add_argument("--seed", type=int, help="Root seed.")
    group.add_argument("--layers", help="Layer specification, e.g. `last:5`, `last(3)` or `2,3,4-6`.")
    group.add_argument("--n-samples", type=int, dest="n_samples", help="Number of source queries N.")
    group.add_argument("--select", help="Query selection: random, low-ppl or high-ppl.")
    group.add_argument("--stimuli", help="Stimulus kind: zero or few.")
    group.add_argument("--stimulus-index", type=int, dest="stimulus_index", help="Bundled stimulus to fit on (0-based).")
    group.add_argument("--m", type=int, help="Stimuli per query M.")
    group.add_argument("--delta", type=float, help="Localization threshold.")
    group.add_argument("--alpha", type=float, help="Steering magnitude.")
    group.add_argument("--sign", help="Steering sign rule: proj, pos or neg.")
    group.add_argument("--max-new-tokens", type=int, dest="max_new_tokens", help="Generation budget.")
    group.add_argument("--template", help="Template id.")
    group.add_argument("--task", help="Task file, or a bundled task name.")
    group.add_argument("--out", type=Path, help="Output directory.")
    group.add_argument("--format", help="Report formats, comma-separated: plain, ansi, html.")
    group.add_argument("--workers", type=int, help="Worker threads.")
    verbosity = group.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log per-step detail.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log errors only.")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _run_flags()
    parser = argparse.ArgumentParser(
        prog="cot-repe",
        description="Read, localize and steer chain-of-thought representations of a toy transformer.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("read", parents=[parent], help="Fit reading vectors and write a ROTV file.").add_argument(
        "--dump", type=Path, help="Capture populations from an activation dump instead of the model."
    )

    localize = commands.add_parser("localize", parents=[parent], help="Mark reasoning errors in a response.")
    localize.add_argument("--readers", type=Path, required=True, help="ROTV file.")
    localize.add_argument("--prompt", required=True, help="Prompt text.")
    localize.add_argument("--response", help="Response text; generated without steering when omitted.")
    localize.add_argument("--dump", type=Path, help="Read prefix activations from an activation dump.")

    steer = commands.add_parser("steer", parents=[parent], help="Generate with steering.")
    steer.add_argument("--readers", type=Path, required=True, help="ROTV file.")
    steer.add_argument("--prompt", required=True, help="Prompt text.")
    steer.add_argument("--save-policy", type=Path, dest="save_policy", help="Also write the policy as a ROTS file.")

    generate = commands.add_parser("generate", parents=[parent], help="Generate without steering.")
    generate.add_argument("--prompt", required=True, help="Prompt text.")

    evaluate = commands.add_parser("eval", parents=[parent], help="Run the benchmark over conditions.")
    evaluate.add_argument("conditions", nargs="*", help="Conditions, e.g. base cot_z1 rot_z1; defaults to the config.")

    dump = commands.add_parser("dump", parents=[parent], help="Write an activation dump.")
    dump.add_argument("--prompts", type=Path, help="Text file with one prompt per line; the stimulus set otherwise.")
    dump.add_argument("--prompt", help="Prompt whose response prefixes are dumped (with --response).")
    dump.add_argument("--response", help="Response whose prefixes are dumped.")
    dump.add_argument("--dtype", choices=("f4", "f8"), default="f8", help="Storage precision.")

    commands.add_parser("robustness", parents=[parent], help="Recompute the published robustness scores.")

    calibrate = commands.add_parser("calibrate", parents=[parent], help="Sweep alpha and record the best per task.")
    calibrate.add_argument("--grid", default="0.25,0.5,1,2,4", help="Comma-separated alphas.")
    calibrate.add_argument("--condition", default="rot_z1", help="Steered condition scored for each alpha.")

    make_task = commands.add_parser("make-task", parents=[parent], help="Write a bundled toy task as JSON lines.")
    make_task.add_argument("--size", type=int, help="Number of items.")

    ablate = commands.add_parser("ablate", parents=[parent], help="Sweep selection strategy, N or the layer count.")
    ablate.add_argument("--sweep", choices=("select", "n", "last"), required=True, help="Setting to sweep.")
    ablate.add_argument("--condition", default="rot_z1", help="Steered condition scored for each setting.")

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = "DEBUG" if args.verbose else "ERROR" if args.quiet else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format="<level>{level: <8}</level> {message}")


def _config(args: argparse.Namespace) -> RunConfig:
    names = set(RunConfig.model_fields) | set(_FLAG_FIELDS)
    flags = {_FLAG_FIELDS.get(name, name): value for name, value in vars(args).items() if name in names and value != []}
    # An explicit --alpha replaces the per-task magnitudes of the config file
    if args.alpha is not None:
        flags["alpha_by_task"] = {}
    return RunConfig.from_sources(flags=flags, config_file=args.config)


def cmd_read(args: argparse.Namespace) -> int:
    config = _config(args)
    pipeline = Pipeline.from_config(config)
    source = DumpSource.from_file(args.dump) if args.dump else None
    readers = pipeline.read(source=source)

    path = config.out / "readers.rotv"
    save_reading_vectors(readers, path)
    write_text_export(readers, config.out / "readers.txt")
    for layer in readers.layers:
        print(f"layer {layer}\t{readers.explained_variance[layer]:.6f}")
    return 0


def cmd_localize(args: argparse.Namespace) -> int:
    config = _config(args)
    readers = load_reading_vectors(args.readers)
    pipeline = Pipeline.from_config(config)
    source = DumpSource.from_file(args.dump) if args.dump else None

    report = pipeline.localize(readers, args.prompt, args.response, source=source)
    for path in write_reports(report, config.out / "report", config.formats):
        logger.info(f"Wrote '{path}'")
    print(f"marked\t{','.join(map(str, report.marked)) or '-'}")
    return 0


def cmd_steer(args: argparse.Namespace) -> int:
    config = _config(args)
    readers = load_reading_vectors(args.readers)
    pipeline = Pipeline.from_config(config)

    generation = pipeline.steer(readers, args.prompt)
    for layer, alpha in generation.diagnostics.alphas.items():
        print(f"layer {layer}\talpha {alpha:+g}\tprojection {generation.diagnostics.projections[layer]:+.6f}")
    print(generation.text)
    if args.save_policy:
        save_policy(pipeline.policy(readers), args.save_policy)
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    config = _config(args)
    pipeline = Pipeline.from_config(config)
    print(pipeline.runner.complete(args.prompt, config.max_new_tokens))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    pipeline = Pipeline.from_config(config)
    result = pipeline.evaluate(args.conditions or None)
    write_benchmark(result, config.out, stem=result.task)
    print(result.summary[["condition", "accuracy", "robustness"]].to_string(index=False))
    return 0


def _read_prompt_lines(path: Path) -> list[str]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"Could not read prompts file '{path}': {exc}") from exc
    return [line.replace("\\n", "\n") for line in lines if line.strip()]


def cmd_dump(args: argparse.Namespace) -> int:
    config = _config(args)
    pipeline = Pipeline.from_config(config)
    layers = list(pipeline.layers)

    if args.prompt is not None:
        if args.response is None:
            raise InvalidConfig("Dumping response prefixes needs --response")
        tokens = pipeline.runner.tokenizer.split(args.response)
        dump = dump_prefixes(pipeline.runner, args.prompt, tokens, layers)
    elif args.prompts is not None:
        prompts = [(prompt, Polarity.NONE) for prompt in _read_prompt_lines(args.prompts)]
        dump = dump_prompts(pipeline.runner, prompts, layers, dtype=args.dtype, workers=config.workers)
    else:
        dump = dump_stimulus_set(pipeline.runner, pipeline.stimulus_set(), layers, dtype=args.dtype, workers=config.workers)

    save_dump(dump, config.out / "activations.rotd")
    return 0


def cmd_robustness(args: argparse.Namespace) -> int:
    config = _config(args)
    table = regenerate_robustness_table()
    path = config.out / "robustness.tsv"
    try:
        config.out.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, sep="\t", index=False, float_format="%.2f")
    except OSError as exc:
        raise IoFailure(f"Could not write '{path}': {exc}") from exc
    print(table.to_string(index=False, float_format=lambda value: f"{value:.2f}"))
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _config(args)
    condition = parse_condition(args.condition)
    if not condition.steered:
        raise InvalidConfig(f"Calibration needs a steered condition, got '{condition.name}'")
    try:
        grid = [float(value) for value in args.grid.split(",") if value.strip()]
    except ValueError as exc:
        raise InvalidConfig(f"Invalid alpha grid '{args.grid}'") from exc
    if not grid:
        raise InvalidConfig("The alpha grid is empty")

    pipeline = Pipeline.from_config(config)
    readers = pipeline.read(condition.stimulus_kind, condition.variant - 1)

    rows = []
    for alpha in grid:
        swept = pipeline.model_copy(update={"config": config.model_copy(update={"alpha_by_task": {pipeline.task.name: alpha}})})
        result = swept.evaluate([condition.name], readers={condition.name: readers})
        accuracy = float(result.summary.loc[0, "accuracy"])
        logger.info(f"[alpha {alpha:g}] Accuracy {accuracy:.2f}%")
        rows.append({"alpha": alpha, "accuracy": accuracy})

    table = pd.DataFrame(rows)
    best = table.assign(magnitude=table["alpha"].abs()).sort_values(["accuracy", "magnitude"], ascending=[False, True]).iloc[0]

    path = config.out / "calibration.yaml"
    existing = {}
    if path.exists():
        existing = load_yaml(path) or {}
    existing.setdefault("alpha_by_task", {})[pipeline.task.name] = float(best["alpha"])
    try:
        config.out.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(existing, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Could not write '{path}': {exc}") from exc

    print(table.to_string(index=False))
    print(f"best alpha for {pipeline.task.name}: {best['alpha']:g}")
    return 0


def cmd_make_task(args: argparse.Namespace) -> int:
    config = _config(args)
    size = args.size or config.task_size
    task = generate_task(config.task, config.seed, size)
    write_task(task, config.out / f"{task.name}.jsonl")
    return 0


def _ablation_settings(sweep: str, task_size: int, depth: int) -> list[dict]:
    if sweep == "select":
        return [{"select": strategy} for strategy in ("random", "low_perplexity", "high_perplexity")]
    if sweep == "n":
        return [{"n_samples": n} for n in _ABLATION_N if n <= task_size]
    return [{"layers": f"last:{count}"} for count in _ABLATION_LAST if count <= depth]


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args)
    condition = parse_condition(args.condition)
    if not condition.steered:
        raise InvalidConfig(f"Ablations score a steered condition, got '{condition.name}'")
    pipeline = Pipeline.from_config(config)

    rows = []
    for setting in _ablation_settings(args.sweep, len(pipeline.task), pipeline.runner.model.depth):
        swept_config = RunConfig.model_validate({**config.model_dump(), **setting})
        swept = pipeline.model_copy(update={"config": swept_config})
        readers = swept.read(condition.stimulus_kind, condition.variant - 1)
        result = swept.evaluate([condition.name], readers={condition.name: readers})
        label = ", ".join(f"{key}={value}" for key, value in setting.items())
        accuracy = float(result.summary.loc[0, "accuracy"])
        logger.info(f"[{label}] Accuracy {accuracy:.2f}%")
        rows.append({**setting, "condition": condition.name, "accuracy": accuracy})

    table = pd.DataFrame(rows)
    path = config.out / f"ablation-{args.sweep}.jsonl"
    try:
        config.out.mkdir(parents=True, exist_ok=True)
        table.to_json(path, orient="records", lines=True)
    except OSError as exc:
        raise IoFailure(f"Could not write '{path}': {exc}") from exc
    print(table.to_string(index=False))
    return 0


_COMMANDS = {
    "read": cmd_read,
    "localize": cmd_localize,
    "steer": cmd_steer,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "dump": cmd_dump,
    "robustness": cmd_robustness,
    "calibrate": cmd_calibrate,
    "make-task": cmd_make_task,
    "ablate": cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Runs one subcommand and returns its exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        return _COMMANDS[args.command](args)
    except CotRepeError as exc:
        logger.error(f"[{type(exc).__name__}] {exc}")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
