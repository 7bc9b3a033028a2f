"""Command-line entry point.

    maskforget pretrain   --config run.json --out runs/a
    maskforget unlearn    --config run.json --checkpoint runs/a/base.ck
    maskforget eval       --checkpoint runs/a/final.ck [--forgotten tench,beagle]
    maskforget sample     --checkpoint runs/a/final.ck --cond tench --n 200
    maskforget ablate     --checkpoint runs/a/base.ck --axis beta --values 0,0.25,0.5
    maskforget mask-stats --out runs/a

Exit codes: 0 success, 1 config error, 2 divergence abort, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .concepts import ConceptRegistry, classify
from .config import ConfigError, RunConfig
from .diffusion import sample
from .eval import evaluate, write_report
from .masking import write_mask_stats
from .nn import DenoiserParams, load_checkpoint, save_checkpoint
from .pipeline import pretrain, relapse, resolve_tasks, run_unlearning
from .unlearning import DivergenceError, MetricsRow, TrainerState, write_trace

log = logging.getLogger("maskforget")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
ABLATION_AXES = ("alpha", "beta", "sparsity", "delta_T")
PRETRAIN_LOG_EVERY = 100


def load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_checkpoint(path) -> DenoiserParams:
    try:
        return load_checkpoint(path)
    except ValueError as err:
        raise OSError(f"cannot read checkpoint {path}: {err}") from err


def require_checkpoint(args) -> DenoiserParams:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    return read_checkpoint(args.checkpoint)


def check_arch(params: DenoiserParams, cfg: RunConfig, reg: ConceptRegistry) -> None:
    expected = cfg.arch.build(reg)
    if params.arch != expected:
        raise ConfigError(f"checkpoint architecture {params.arch} does not match config {expected}")


def write_rows(path: Path, header: str, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    reg = cfg.load_registry()
    sched = cfg.schedule.build()
    out = out_dir(cfg)
    params, losses = pretrain(cfg.arch.build(reg), reg, sched, cfg.pretrain, cfg.seed, log_every=1000)
    save_checkpoint(params, out / "base.ck")
    (out / "config.json").write_text(cfg.to_json())
    windows = [(i + PRETRAIN_LOG_EVERY, repr(float(np.mean(losses[i:i + PRETRAIN_LOG_EVERY]))))
               for i in range(0, len(losses), PRETRAIN_LOG_EVERY)]
    write_rows(out / "pretrain_loss.csv", cfg.header(), ("step", "mean_loss"), windows)
    report = evaluate(params, reg, [], sched, cfg.eval.n_eval, seed=cfg.seed)
    write_report(report, out / "pretrain_eval.csv", cfg.header())
    worst = min(report.per_concept_acc.values())
    print(f"pretrained {params.arch.n_params} params; min per-concept accuracy {worst:.3f}; wrote {out / 'base.ck'}")
    return EXIT_OK


def _write_unlearn_artifacts(out: Path, cfg: RunConfig, state: TrainerState, metrics: list[MetricsRow]) -> None:
    header = cfg.header()
    for k, result in enumerate(state.history):
        write_trace(result.trace, out / f"trace_task{k + 1}.csv", header)
        if result.mask_tracker is not None:
            write_mask_stats(result.mask_tracker.rows, out / f"mask_stats_task{k + 1}.csv", header)
    for teacher in state.teachers:
        save_checkpoint(teacher.params, out / f"teacher_{teacher.provenance}.ck")
    for row in metrics:
        write_report(row.report, out / f"eval_task{row.task_index + 1}.csv", header)


def cmd_unlearn(args) -> int:
    cfg = load_config(args)
    reg = cfg.load_registry()
    base = require_checkpoint(args)
    check_arch(base, cfg, reg)
    sched = cfg.schedule.build()
    tasks = resolve_tasks(reg, cfg.unlearn.tasks)
    out = out_dir(cfg)
    (out / "config.json").write_text(cfg.to_json())
    try:
        state, metrics = run_unlearning(base, reg, sched, tasks, cfg.unlearn.params, cfg.seed, cfg.eval.n_eval)
    except DivergenceError as err:
        _write_unlearn_artifacts(out, cfg, err.state, err.metrics)
        save_checkpoint(err.state.params, out / "diverged.ck")
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_unlearn_artifacts(out, cfg, state, metrics)
    save_checkpoint(state.params, out / "final.ck")
    last = metrics[-1].report
    print(f"forget {last.mean_forget_rate:.3f}  others {last.others_acc:.3f}  "
          f"align {min(last.super_align.values()):.3f}  relapse {relapse(metrics):.3f}")
    return EXIT_OK


def _forgotten(args, cfg: RunConfig, reg: ConceptRegistry) -> list[int]:
    names = cfg.unlearn.tasks if args.forgotten is None else [n for n in args.forgotten.split(",") if n]
    ids = []
    for name in names:
        tok = reg.token(name)
        if not reg.is_subconcept(tok):
            raise ConfigError(f"{name!r} is not a subconcept")
        ids.append(tok)
    return ids


def cmd_eval(args) -> int:
    cfg = load_config(args)
    reg = cfg.load_registry()
    params = require_checkpoint(args)
    check_arch(params, cfg, reg)
    try:
        forgotten = _forgotten(args, cfg, reg)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    report = evaluate(params, reg, forgotten, cfg.schedule.build(), cfg.eval.n_eval, seed=cfg.seed)
    path = out_dir(cfg) / "eval.csv"
    write_report(report, path, cfg.header())
    for metric, concept, value, _, _ in report.rows():
        print(f"{metric:18s} {concept:>3s} {value:.3f}")
    return EXIT_OK


def plot_samples(x: np.ndarray, reg: ConceptRegistry, title: str, path: Path, header: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = classify(reg, x)
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    for i, c in enumerate(reg.subconcepts):
        sel = labels == c.id
        if sel.any():
            ax.scatter(x[sel, 0], x[sel, 1], s=6, color=cmap(i % 10), label=c.name)
    means = reg.means
    ax.scatter(means[:, 0], means[:, 1], marker="x", color="black", s=40, label="means")
    ax.set_title(title)
    ax.set_aspect("equal")
    ax.legend(fontsize=6, loc="best")
    fig.savefig(path, format="svg", metadata={"Description": header})
    plt.close(fig)


def cmd_sample(args) -> int:
    cfg = load_config(args)
    reg = cfg.load_registry()
    params = require_checkpoint(args)
    check_arch(params, cfg, reg)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    try:
        tok = reg.token(args.cond)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A3, tok]))
    x = sample(params, tok, cfg.schedule.build(), rng, args.n)
    out = out_dir(cfg)
    stem = f"samples_{reg.name(tok)}"
    columns = [f"x{i}" for i in range(x.shape[1])]
    write_rows(out / f"{stem}.csv", cfg.header(), columns, [[repr(float(v)) for v in row] for row in x])
    plot_samples(x, reg, f"samples under '{reg.name(tok)}'", out / f"{stem}.svg", cfg.header())
    print(f"wrote {args.n} samples to {out / stem}.csv and .svg")
    return EXIT_OK


def _parse_values(axis: str, text: str) -> list:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("--values must be non-empty")
    try:
        return [int(p) if axis == "delta_T" else float(p) for p in parts]
    except ValueError as err:
        raise ConfigError(f"bad --values: {err}") from err


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    reg = cfg.load_registry()
    values = _parse_values(args.axis, args.values)
    sched = cfg.schedule.build()
    out = out_dir(cfg)
    if args.checkpoint:
        base = read_checkpoint(args.checkpoint)
        check_arch(base, cfg, reg)
    else:
        base, _ = pretrain(cfg.arch.build(reg), reg, sched, cfg.pretrain, cfg.seed)
        save_checkpoint(base, out / "base.ck")
    tasks = resolve_tasks(reg, cfg.unlearn.tasks)
    rows = []
    for value in values:
        run_cfg = cfg.with_unlearn(**{args.axis: value})
        try:
            _, metrics = run_unlearning(base, reg, sched, tasks, run_cfg.unlearn.params, cfg.seed, cfg.eval.n_eval)
        except DivergenceError as err:
            print(f"{args.axis}={value}: divergence: {err}", file=sys.stderr)
            write_rows(out / f"ablate_{args.axis}.csv", cfg.header(), ("axis", "value", "metric", "result"), rows)
            return EXIT_DIVERGED
        last = metrics[-1].report
        summary = {
            "mean_forget_rate": last.mean_forget_rate,
            "others_acc": last.others_acc,
            "min_super_alignment": min(last.super_align.values()),
            "relapse": relapse(metrics),
        }
        for metric, result in summary.items():
            rows.append((args.axis, value, metric, repr(float(result))))
        print(f"{args.axis}={value}: " + "  ".join(f"{k} {v:.3f}" for k, v in summary.items()))
    write_rows(out / f"ablate_{args.axis}.csv", cfg.header(), ("axis", "value", "metric", "result"), rows)
    return EXIT_OK


def cmd_mask_stats(args) -> int:
    """Collect the per-task mask statistics of an unlearning run into one table."""
    cfg = load_config(args)
    run = Path(cfg.output_dir)
    files = sorted(run.glob("mask_stats_task*.csv"), key=lambda p: int(p.stem.rsplit("task", 1)[1]))
    if not files:
        raise FileNotFoundError(f"no mask_stats_task*.csv files under {run}")
    rows = []
    for path in files:
        task = int(path.stem.rsplit("task", 1)[1])
        with path.open(newline="") as fh:
            for r in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
                rows.append((task, r["step"], r["tau"], r["dropped"], r["added"], r["active_count"],
                             r["overlap_with_initial_mask"]))
    columns = ("task", "step", "tau", "dropped", "added", "active_count", "overlap_with_initial_mask")
    write_rows(run / "mask_stats.csv", cfg.header(), columns, rows)
    print(" ".join(f"{c:>8s}" for c in columns[:6]) + "  overlap")
    for r in rows:
        print(" ".join(f"{str(v):>8s}" for v in r[:2]) + f" {float(r[2]):8.4f} "
              + " ".join(f"{str(v):>8s}" for v in r[3:6]) + f"  {float(r[6]):.3f}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "unlearn": cmd_unlearn,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "mask-stats": cmd_mask_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--checkpoint", help="model checkpoint to read")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="maskforget", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the base model")
    sub.add_parser("unlearn", parents=[common], help="forget the configured tasks in sequence")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint with the Bayes oracle")
    p.add_argument("--forgotten", help="comma-separated forgotten concepts (default: config tasks; '' for none)")
    p = sub.add_parser("sample", parents=[common], help="draw samples to CSV and SVG")
    p.add_argument("--cond", required=True, help="condition token name or id")
    p.add_argument("--n", type=int, default=200)
    p = sub.add_parser("ablate", parents=[common], help="sweep one unlearning hyperparameter")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    sub.add_parser("mask-stats", parents=[common], help="summarise mask statistics of an unlearning run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # checkpoint decoding and registry validation failures surface as ValueError
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
