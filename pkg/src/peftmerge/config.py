"""Experiment configuration: strict JSON parsing with full defaulting.

A config document has up to six sections (backbone, peft, train, merge,
suite, run).  Unknown keys anywhere are rejected with their dotted path;
missing keys take documented defaults.  Parsing materialises every
default so the resolved form can be written back out verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .backbone import BackboneConfig
from .bench import REFERENCE_MASTER_SEED
from .peft import PeftConfig
from .runner import INIT_STRATEGIES, METHODS, TrainConfig
from .task_vector import DEFAULT_LAMBDA_GRID, MergeConfig

DEFAULT_PRETRAIN_SEED = 7
DEFAULT_PRETRAIN_STEPS = 600


class ConfigError(ValueError):
    """Invalid configuration; `path` is the dotted key that failed."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class RunSettings:
    method: str = "ours_adapter"
    init_strategy: str = "pre"
    orders: list[str] = None
    seeds: list[int] = None
    output_dir: str = "runs"
    replay_per_class: int = 10

    def __post_init__(self):
        if self.orders is None:
            self.orders = ["A", "B", "C"]
        if self.seeds is None:
            self.seeds = [1, 2, 3]


@dataclass
class SuiteSettings:
    master_seed: int = REFERENCE_MASTER_SEED
    profile: str = "default"


@dataclass
class MergeSettings:
    merge: MergeConfig = None
    sweep_lambda: bool = False
    sweep_grid: list[float] = None

    def __post_init__(self):
        if self.merge is None:
            self.merge = MergeConfig()
        if self.sweep_grid is None:
            self.sweep_grid = list(DEFAULT_LAMBDA_GRID)


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig
    pretrain_seed: int
    pretrain_steps: int
    peft: PeftConfig
    train: TrainConfig
    merge: MergeSettings
    suite: SuiteSettings
    run: RunSettings


def _section(doc: dict, name: str, allowed: set[str]) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "section must be a JSON object")
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown key")
    return sec


def _get(sec: dict, section: str, key: str, default, kind, pred=None, what=""):
    if key not in sec or sec[key] is None:
        return default
    val = sec[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is not None and (not isinstance(val, kind) or isinstance(val, bool) and kind is not bool):
        raise ConfigError(f"{section}.{key}", f"expected {what or kind.__name__}")
    if pred is not None and not pred(val):
        raise ConfigError(f"{section}.{key}", f"invalid value {val!r}")
    return val


def _int_list(sec, section, key, default):
    val = sec.get(key)
    if val is None:
        return list(default)
    if not isinstance(val, list) or not val or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in val
    ):
        raise ConfigError(f"{section}.{key}", "expected a non-empty list of integers")
    return list(val)


def parse_experiment_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in doc:
        if key not in ("backbone", "peft", "train", "merge", "suite", "run"):
            raise ConfigError(key, "unknown section")

    b = _section(doc, "backbone", {
        "vocab_size", "d_model", "n_heads", "d_ff", "n_layers", "max_seq_len",
        "n_total_classes", "pretrain_seed", "pretrain_steps",
    })
    pos_int = lambda v: v >= 1
    try:
        backbone = BackboneConfig(
            vocab_size=_get(b, "backbone", "vocab_size", BackboneConfig.vocab_size, int, pos_int),
            d_model=_get(b, "backbone", "d_model", BackboneConfig.d_model, int, pos_int),
            n_heads=_get(b, "backbone", "n_heads", BackboneConfig.n_heads, int, pos_int),
            d_ff=_get(b, "backbone", "d_ff", BackboneConfig.d_ff, int, pos_int),
            n_layers=_get(b, "backbone", "n_layers", BackboneConfig.n_layers, int, pos_int),
            max_seq_len=_get(b, "backbone", "max_seq_len", BackboneConfig.max_seq_len, int, pos_int),
            n_total_classes=_get(b, "backbone", "n_total_classes",
                                 BackboneConfig.n_total_classes, int, pos_int),
        )
    except ValueError as exc:
        raise ConfigError("backbone", str(exc)) from exc
    pretrain_seed = _get(b, "backbone", "pretrain_seed", DEFAULT_PRETRAIN_SEED, int, lambda v: v >= 0)
    pretrain_steps = _get(b, "backbone", "pretrain_steps", DEFAULT_PRETRAIN_STEPS, int, pos_int)

    p = _section(doc, "peft", {
        "kind", "lora_rank", "lora_alpha", "adapter_bottleneck", "target_layers",
        "head_classes",
    })
    target = p.get("target_layers")
    if target is not None and (
        not isinstance(target, list)
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in target)
    ):
        raise ConfigError("peft.target_layers", "expected a list of layer indices")
    try:
        peft = PeftConfig(
            kind=_get(p, "peft", "kind", "adapter", str, lambda v: v in ("lora", "adapter")),
            d_model=backbone.d_model,
            n_layers=backbone.n_layers,
            head_classes=_get(p, "peft", "head_classes", backbone.n_total_classes, int, pos_int),
            lora_rank=_get(p, "peft", "lora_rank", 16, int, pos_int),
            lora_alpha=_get(p, "peft", "lora_alpha", None, float, lambda v: v > 0),
            adapter_bottleneck=_get(p, "peft", "adapter_bottleneck", 32, int, pos_int),
            target_layers=tuple(target) if target is not None else None,
        )
    except ValueError as exc:
        raise ConfigError("peft", str(exc)) from exc

    t = _section(doc, "train", {"epochs", "batch_size", "learning_rate", "optimizer"})
    try:
        train = TrainConfig(
            epochs=_get(t, "train", "epochs", 8, int, pos_int),
            batch_size=_get(t, "train", "batch_size", 16, int, pos_int),
            learning_rate=_get(t, "train", "learning_rate", 1e-3, float, lambda v: v >= 0),
            optimizer=_get(t, "train", "optimizer", "adam", str),
        )
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from exc

    m = _section(doc, "merge", {"lambda", "anchor", "summation_order", "sweep_lambda", "sweep_grid"})
    grid = m.get("sweep_grid")
    if grid is not None:
        if not isinstance(grid, list) or not grid or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in grid
        ):
            raise ConfigError("merge.sweep_grid", "expected a non-empty list of reals")
        grid = [float(v) for v in grid]
    try:
        merge = MergeSettings(
            merge=MergeConfig(
                lam=_get(m, "merge", "lambda", 0.25, float, lambda v: 0.0 <= v <= 2.0),
                anchor=_get(m, "merge", "anchor", "first_module_init", str),
                summation_order=_get(m, "merge", "summation_order", "ascending", str),
            ),
            sweep_lambda=_get(m, "merge", "sweep_lambda", False, bool),
            sweep_grid=grid,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("merge", str(exc)) from exc

    s = _section(doc, "suite", {"master_seed", "profile"})
    suite = SuiteSettings(
        master_seed=_get(s, "suite", "master_seed", REFERENCE_MASTER_SEED, int, lambda v: v >= 0),
        profile=_get(s, "suite", "profile", "default", str, lambda v: v == "default"),
    )

    r = _section(doc, "run", {
        "method", "init_strategy", "orders", "seeds", "output_dir", "replay_per_class",
    })
    orders = r.get("orders")
    if orders is not None:
        if not isinstance(orders, list) or not orders or not all(
            isinstance(o, str) and o in ("A", "B", "C") for o in orders
        ):
            raise ConfigError("run.orders", 'expected a non-empty list drawn from ["A","B","C"]')
        if len(set(orders)) != len(orders):
            raise ConfigError("run.orders", "orders contains duplicates")
    run = RunSettings(
        method=_get(r, "run", "method", "ours_adapter", str, lambda v: v in METHODS),
        init_strategy=_get(r, "run", "init_strategy", "pre", str,
                           lambda v: v in INIT_STRATEGIES),
        orders=orders,
        seeds=_int_list(r, "run", "seeds", [1, 2, 3]),
        output_dir=_get(r, "run", "output_dir", "runs", str),
        replay_per_class=_get(r, "run", "replay_per_class", 10, int, pos_int),
    )

    return ExperimentConfig(
        backbone=backbone,
        pretrain_seed=pretrain_seed,
        pretrain_steps=pretrain_steps,
        peft=peft,
        train=train,
        merge=merge,
        suite=suite,
        run=run,
    )


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(str(path), "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON: {exc}") from exc
    return parse_experiment_config(doc)


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Fully materialised config document (every default written out)."""
    return {
        "backbone": {
            "vocab_size": cfg.backbone.vocab_size,
            "d_model": cfg.backbone.d_model,
            "n_heads": cfg.backbone.n_heads,
            "d_ff": cfg.backbone.d_ff,
            "n_layers": cfg.backbone.n_layers,
            "max_seq_len": cfg.backbone.max_seq_len,
            "n_total_classes": cfg.backbone.n_total_classes,
            "pretrain_seed": cfg.pretrain_seed,
            "pretrain_steps": cfg.pretrain_steps,
        },
        "peft": {
            "kind": cfg.peft.kind,
            "lora_rank": cfg.peft.lora_rank,
            "lora_alpha": cfg.peft.lora_alpha,
            "adapter_bottleneck": cfg.peft.adapter_bottleneck,
            "target_layers": list(cfg.peft.target_layers),
            "head_classes": cfg.peft.head_classes,
        },
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "learning_rate": cfg.train.learning_rate,
            "optimizer": cfg.train.optimizer,
        },
        "merge": {
            "lambda": cfg.merge.merge.lam,
            "anchor": cfg.merge.merge.anchor,
            "summation_order": cfg.merge.merge.summation_order,
            "sweep_lambda": cfg.merge.sweep_lambda,
            "sweep_grid": cfg.merge.sweep_grid,
        },
        "suite": {
            "master_seed": cfg.suite.master_seed,
            "profile": cfg.suite.profile,
        },
        "run": {
            "method": cfg.run.method,
            "init_strategy": cfg.run.init_strategy,
            "orders": cfg.run.orders,
            "seeds": cfg.run.seeds,
            "output_dir": cfg.run.output_dir,
            "replay_per_class": cfg.run.replay_per_class,
        },
    }
