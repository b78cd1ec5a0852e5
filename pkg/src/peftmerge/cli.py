"""Command-line interface: pretrain, run, sweep, ablate-init.

All commands take --config (JSON, strictly parsed) and write their
outputs under --out (or the config's run.output_dir).  Primary outputs
(CSV/JSON/containers) are byte-stable: rerunning a command with the same
config reproduces them exactly, with any --jobs value.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing artifact,
5 training divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
from dataclasses import replace

from . import bench, figures
from .backbone import pretrain_backbone
from .config import ConfigError, ExperimentConfig, load_experiment_config, resolved_dict
from .runner import (
    DivergenceError,
    RunReport,
    aggregate_average,
    round1,
    run_ft_baseline,
    run_mtl_baseline,
    run_replay_baseline,
    run_sequential,
)
from .task_vector import (
    ContainerEntry,
    FormatError,
    container_bytes,
    load_container,
    save_container,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5

BACKBONE_FILE = "backbone.tvec"


class MissingArtifactError(FileNotFoundError):
    pass


def _atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(str(path))) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, str(path))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _report_json(report: RunReport) -> str:
    doc = {
        "method": report.method,
        "per_task_accuracy": report.per_task_accuracy,
        "average_accuracy": report.average_accuracy,
        "lambda_used": report.lambda_used,
        "init_strategy": report.init_strategy,
        "seeds": report.seeds,
        # measured timings live in the timings sidecar so reruns are byte-identical
        "wall_time_seconds": 0.0,
    }
    if report.order is not None:
        doc["order"] = report.order
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _load_backbone(out_dir):
    path = os.path.join(out_dir, BACKBONE_FILE)
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"no backbone container at {path}; run `peftmerge pretrain` first"
        )
    entries = load_container(path)
    for entry in entries:
        if entry.kind == "backbone":
            return entry.payload
    raise MissingArtifactError(f"{path} holds no backbone entry")


def _run_one(args_tuple):
    """Worker for one (order_label, seed) run; returns picklable results."""
    (cfg, method, init_strategy, order_label, seed, out_dir, save_vectors) = args_tuple
    backbone = _load_backbone(out_dir)
    suite = bench.generate_suite(cfg.suite.master_seed, cfg.suite.profile)
    orders = bench.standard_orders()
    train = replace(cfg.train, seed=seed)
    collected: list = []
    if method == "mtl":
        report = run_mtl_baseline(suite, cfg.peft, train, backbone=backbone)
    elif method == "ft":
        report = run_ft_baseline(suite, orders[order_label], cfg.peft, train,
                                 backbone=backbone)
    elif method == "replay":
        report = run_replay_baseline(
            suite, orders[order_label], cfg.peft, train,
            per_class_buffer=cfg.run.replay_per_class, backbone=backbone,
        )
    else:
        report = run_sequential(
            suite, orders[order_label], cfg.peft, init_strategy, train,
            merge_config=cfg.merge.merge, sweep_lambda=cfg.merge.sweep_lambda,
            sweep_grid=cfg.merge.sweep_grid, backbone=backbone,
            collect_vectors=collected if save_vectors else None,
        )
    container = None
    if collected:
        anchor, vectors, tau = collected[0]
        entries = [ContainerEntry("anchor", "peft", anchor)]
        entries += [ContainerEntry(f"tau_{v.source_task}", "taskvector", v) for v in vectors]
        entries.append(ContainerEntry("tau_merged", "taskvector", tau))
        container = container_bytes(entries)
    return order_label, seed, report, container


def _execute_runs(cfg: ExperimentConfig, method: str, init_strategy: str,
                  order_labels, seeds, out_dir, jobs: int, save_vectors: bool):
    """Run the (order, seed) grid, in parallel if asked; stable result order."""
    if method == "mtl":
        work = [(cfg, method, init_strategy, "-", s, out_dir, False) for s in seeds]
    else:
        work = [
            (cfg, method, init_strategy, o, s, out_dir, save_vectors)
            for o in order_labels
            for s in seeds
        ]
    if jobs > 1 and len(work) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    return results


def _csv_row(method, order_label, seed, report: RunReport, task_ids) -> str:
    accs = [repr(report.per_task_accuracy[t]) for t in task_ids]
    return ",".join(
        [
            method,
            order_label if order_label != "-" else "-",
            str(seed),
            report.init_strategy,
            repr(report.lambda_used),
            *accs,
            repr(report.average_accuracy),
        ]
    )


def _write_results(cfg, method, results, out_dir, with_figures: bool):
    task_ids = [s.task_id for s in bench.task_specs()]
    header = "method,order,seed,init_strategy,lambda," + ",".join(task_ids) + ",average"
    rows = []
    timing_rows = []
    fig_rows = []
    for order_label, seed, report, container in results:
        tag = f"{method}_{order_label}_s{seed}" if order_label != "-" else f"{method}_s{seed}"
        _atomic_write_text(os.path.join(out_dir, f"report_{tag}.json"), _report_json(report))
        if container is not None:
            _atomic_write_text_bytes(os.path.join(out_dir, f"vectors_{tag}.tvec"), container)
        rows.append(_csv_row(method, order_label, seed, report, task_ids))
        timing_rows.append(f"{method},{order_label},{seed},{report.wall_time_seconds:.3f}")
        fig_rows.append(
            {
                "method": method,
                "order": order_label,
                "seed": seed,
                "per_task": report.per_task_accuracy,
            }
        )
    csv_path = os.path.join(out_dir, f"results_{method}.csv")
    _atomic_write_text(csv_path, "\n".join([header] + rows) + "\n")
    _atomic_write_text(
        os.path.join(out_dir, f"timings_{method}.csv"),
        "\n".join(["method,order,seed,wall_time_seconds"] + timing_rows) + "\n",
    )
    if with_figures:
        figures.render_run_figure(fig_rows, task_ids, os.path.join(out_dir, f"results_{method}.png"))
    return csv_path


def _atomic_write_text_bytes(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(str(path))) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, str(path))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_pretrain(cfg: ExperimentConfig, out_dir: str, jobs: int, with_figures: bool) -> int:
    os.makedirs(out_dir, exist_ok=True)
    params = pretrain_backbone(cfg.backbone, cfg.pretrain_seed, cfg.pretrain_steps)
    save_container(
        os.path.join(out_dir, BACKBONE_FILE),
        [ContainerEntry("backbone", "backbone", params)],
    )
    _atomic_write_text(
        os.path.join(out_dir, "config.resolved.json"),
        json.dumps(resolved_dict(cfg), sort_keys=True, indent=2) + "\n",
    )
    print(f"pretrained backbone written to {os.path.join(out_dir, BACKBONE_FILE)}")
    print(f"fingerprint: {params.fingerprint}")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, out_dir: str, jobs: int, with_figures: bool) -> int:
    os.makedirs(out_dir, exist_ok=True)
    method = cfg.run.method
    save_vectors = method in ("ours_lora", "ours_adapter")
    results = _execute_runs(
        cfg, method, cfg.run.init_strategy, cfg.run.orders, cfg.run.seeds,
        out_dir, jobs, save_vectors,
    )
    csv_path = _write_results(cfg, method, results, out_dir, with_figures)
    avg = aggregate_average([r.average_accuracy for _, _, r, _ in results])
    print(f"{method}: {len(results)} runs, mean accuracy {100 * avg:.1f}")
    print(f"results written to {csv_path}")
    return EXIT_OK


def _sweep_values(dimension: str, raw: str):
    try:
        if dimension == "lambda":
            vals = [float(v) for v in raw.split(",") if v != ""]
        else:
            vals = [int(v) for v in raw.split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError("values", f"bad sweep value list {raw!r}") from exc
    if not vals:
        raise ConfigError("values", "empty sweep value list")
    return vals


def _config_with_dimension(cfg: ExperimentConfig, dimension: str, value):
    if dimension == "lambda":
        merge = replace(cfg.merge.merge, lam=float(value))
        return replace(cfg, merge=replace(cfg.merge, merge=merge, sweep_lambda=False))
    if dimension == "lora_rank":
        peft = replace(cfg.peft, kind="lora", lora_rank=int(value), lora_alpha=None)
        return replace(cfg, peft=peft)
    peft = replace(cfg.peft, kind="adapter", adapter_bottleneck=int(value))
    return replace(cfg, peft=peft)


def cmd_sweep(cfg: ExperimentConfig, out_dir: str, jobs: int, with_figures: bool,
              dimension: str, values_raw: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    values = _sweep_values(dimension, values_raw)
    method = cfg.run.method
    if method not in ("ours_lora", "ours_adapter"):
        raise ConfigError("run.method", "sweep applies to ours_lora / ours_adapter")
    if dimension == "lora_rank":
        method = "ours_lora"
    elif dimension == "adapter_bottleneck":
        method = "ours_adapter"
    pairs = []
    for value in values:
        sub = _config_with_dimension(cfg, dimension, value)
        results = _execute_runs(
            sub, method, sub.run.init_strategy, sub.run.orders, sub.run.seeds,
            out_dir, jobs, save_vectors=False,
        )
        avg = aggregate_average([r.average_accuracy for _, _, r, _ in results])
        pairs.append((value, round1(100 * avg)))
    csv_path = os.path.join(out_dir, f"sweep_{dimension}.csv")
    lines = [f"{dimension},average_accuracy"] + [f"{v:g},{a:.1f}" for v, a in pairs]
    _atomic_write_text(csv_path, "\n".join(lines) + "\n")
    if with_figures:
        figures.render_sweep_figure(pairs, dimension, os.path.join(out_dir, f"sweep_{dimension}.png"))
    for v, a in pairs:
        print(f"{dimension}={v:g}: {a:.1f}")
    print(f"sweep table written to {csv_path}")
    return EXIT_OK


def cmd_ablate_init(cfg: ExperimentConfig, out_dir: str, jobs: int, with_figures: bool) -> int:
    os.makedirs(out_dir, exist_ok=True)
    method = cfg.run.method
    if method not in ("ours_lora", "ours_adapter"):
        raise ConfigError("run.method", "ablate-init applies to ours_lora / ours_adapter")
    rows = []
    for strategy in ("noinit", "pre", "mean"):
        results = _execute_runs(
            cfg, method, strategy, cfg.run.orders, cfg.run.seeds,
            out_dir, jobs, save_vectors=False,
        )
        avg = aggregate_average([r.average_accuracy for _, _, r, _ in results])
        rows.append((strategy, round1(100 * avg)))
    by_name = dict(rows)
    ordered = by_name["pre"] >= by_name["mean"] >= by_name["noinit"]
    csv_path = os.path.join(out_dir, "ablate_init.csv")
    lines = ["init_strategy,average_accuracy"]
    lines += [f"{name},{val:.1f}" for name, val in rows]
    lines.append(f"# ordering pre>=mean>=noinit: {str(ordered).lower()}")
    lines.append("# large-scale reference averages: noinit 30.0, pre 77.2, mean 76.2")
    _atomic_write_text(csv_path, "\n".join(lines) + "\n")
    if with_figures:
        figures.render_ablate_figure(rows, os.path.join(out_dir, "ablate_init.png"))
    for name, val in rows:
        print(f"{name}: {val:.1f}")
    print(f"ordering pre>=mean>=noinit: {str(ordered).lower()}")
    print(f"ablation table written to {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peftmerge",
        description="Train per-task PEFT modules on a frozen backbone and merge "
        "their task vectors by scaled summation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("pretrain", "pre-train and freeze the backbone"),
        ("run", "execute the configured method over orders x seeds"),
        ("sweep", "sweep lambda, lora_rank or adapter_bottleneck"),
        ("ablate-init", "compare noinit/pre/mean module initialisation"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the experiment JSON")
        p.add_argument("--out", default=None, help="output directory (default: run.output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        if name == "sweep":
            p.add_argument("--dimension", required=True,
                           choices=("lambda", "lora_rank", "adapter_bottleneck"))
            p.add_argument("--values", required=True,
                           help="comma-separated sweep values, kept in order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_experiment_config(args.config)
        out_dir = args.out if args.out is not None else cfg.run.output_dir
        jobs = max(1, args.jobs)
        with_figures = not args.no_figures
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out_dir, jobs, with_figures)
        if args.command == "run":
            return cmd_run(cfg, out_dir, jobs, with_figures)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, jobs, with_figures, args.dimension, args.values)
        return cmd_ablate_init(cfg, out_dir, jobs, with_figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"container error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
