"""
Command-line interface for goalmask-nav.

Every subcommand takes a run configuration file (see settings.py) and the
optional --seed and --out overrides. Artifacts are written under the output
directory (default: $OUTPUT_DIR or ./runs):

    maps/          held-out benchmark maps and index.txt
    data/          dataset.bin and its metadata
    checkpoints/   one checkpoint and training report per variant
    benchmark/     episode records, graph dumps, results.csv
    probe/         probe.json and the rendered sample fans
    renders/       rollout images

Usage:
    goalmask-nav gen-maps configs/desk.ini
    goalmask-nav gen-data configs/desk.ini --seed 3
    goalmask-nav train configs/desk.ini --variant unified
    goalmask-nav eval configs/desk.ini [--recompute]
    goalmask-nav probe configs/desk.ini
    goalmask-nav render configs/desk.ini runs/benchmark/episodes/unified/900000-0-explore.json
    goalmask-nav gradcheck configs/miniature.ini
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .benchmark import generate_heldout_maps, recompute_results, run_benchmark
from .checkpoint import load_checkpoint
from .config import Config
from .dataset import SampleDataset, build_dataset, split_holdout, validate_dataset
from .logger import logger
from .navigator import EpisodeResult, TopoGraph
from .probe import run_probe
from .render import render_rollout
from .settings import load_settings
from .training import VARIANTS, evaluate_distance, policy_loss_gradcheck, train_variants
from .world import GridMap, generate_map


GRADCHECK_TOLERANCE = 1e-4
HOLDOUT_FRACTION = 0.1


def _prepare(args):
    out_dir = Path(args.out or Config.OUTPUT_DIR)
    seed = args.seed if args.seed is not None else Config.DEFAULT_SEED
    settings = load_settings(args.config, seed).resolved(out_dir)
    return settings, out_dir


def dataset_path(out_dir: Path) -> Path:
    return out_dir / "data" / "dataset.bin"


def cmd_gen_maps(args):
    settings, out_dir = _prepare(args)
    index = generate_heldout_maps(settings.benchmark, out_dir / "maps", settings.world)
    print(f"Wrote {settings.benchmark.n_maps} maps, index at {index}")


def cmd_gen_data(args):
    settings, out_dir = _prepare(args)
    info = build_dataset(dataset_path(out_dir), settings.data, settings.world)
    print(f"Wrote {info.count} samples from {settings.data.n_maps} maps to {info.path} ({info.dropped} dropped)")
    if args.validate:
        count = validate_dataset(info.path, settings.world)
        print(f"Validated {count} records")


def cmd_train(args):
    settings, out_dir = _prepare(args)
    dataset = SampleDataset.open(dataset_path(out_dir))
    train_idx, held_idx = split_holdout(dataset, HOLDOUT_FRACTION, settings.train.seed)
    names = list(VARIANTS) if args.variant == "all" else [args.variant]
    reports = train_variants(dataset, settings.train, settings.model, out_dir / "checkpoints", names, train_idx)

    evaluations = {}
    for name, report in reports.items():
        model = load_checkpoint(report.checkpoint_path)
        if not model.supports_goal:
            continue
        result = evaluate_distance(model, dataset, held_idx)
        evaluations[name] = asdict(result)
        print(f"{name}: {report.parameter_count} parameters, held-out distance spearman {result.spearman:.3f}, "
              f"self-goal fraction {result.self_fraction:.3f}")
    (out_dir / "checkpoints" / "distance-eval.json").write_text(json.dumps(evaluations, indent=2, sort_keys=True) + "\n")


def cmd_eval(args):
    settings, out_dir = _prepare(args)
    if args.recompute:
        table = recompute_results(settings.benchmark.out_dir, settings.benchmark)
    else:
        table = run_benchmark(settings.benchmark, settings.navigator, settings.world)
    print(table.to_csv(), end="")


def cmd_probe(args):
    settings, out_dir = _prepare(args)
    report = run_probe(settings.probe)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def cmd_render(args):
    settings, out_dir = _prepare(args)
    record = EpisodeResult.load(args.episode)
    grid = GridMap.load(args.map) if args.map else generate_map(record.map_seed, settings.world)
    graph = TopoGraph.load(args.graph) if args.graph else None
    path = render_rollout(record, grid, graph, out_dir / "renders" / f"{Path(args.episode).stem}.svg")
    print(f"Rendered {path}")


def cmd_gradcheck(args):
    settings, out_dir = _prepare(args)
    report = policy_loss_gradcheck(settings.model, settings.train, seed=settings.train.seed)
    print(f"max relative error {report.max_rel_error:.3e} ({report.checked} coordinates, "
          f"{report.skipped} below floor, {report.nonsmooth} nonsmooth)")
    if not report.passed(GRADCHECK_TOLERANCE):
        sys.exit(1)


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Goal-masked diffusion navigation policy",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    def command(name, func, help_text):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("config", help="Run configuration file (INI)")
        sub.add_argument("--seed", type=int, default=None, help="Override every seed in the config (default: $DEFAULT_SEED if set)")
        sub.add_argument("--out", default=None, help="Output directory")
        sub.set_defaults(func=func)
        return sub

    command("gen-maps", cmd_gen_maps, "Generate the held-out benchmark maps")
    data_parser = command("gen-data", cmd_gen_data, "Generate the expert dataset")
    data_parser.add_argument("--validate", action="store_true", help="Replay-validate every record")
    train_parser = command("train", cmd_train, "Train policy variants")
    train_parser.add_argument("--variant", choices=["all", *VARIANTS], default="all")
    eval_parser = command("eval", cmd_eval, "Run the exploration and navigation benchmark")
    eval_parser.add_argument("--recompute", action="store_true", help="Rebuild results.csv from episode records")
    command("probe", cmd_probe, "Multimodality probe at a T-junction")
    render_parser = command("render", cmd_render, "Render an episode record to SVG")
    render_parser.add_argument("episode", help="Episode record (JSON)")
    render_parser.add_argument("--graph", default=None, help="Graph dump to overlay")
    render_parser.add_argument("--map", default=None, help="Map file (default: regenerate from the record's seed)")
    command("gradcheck", cmd_gradcheck, "Finite-difference check of the training loss")

    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        sys.exit(1)

    torch.set_num_threads(Config.NUM_THREADS)
    try:
        args.func(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
