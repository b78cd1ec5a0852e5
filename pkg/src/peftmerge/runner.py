"""Sequential training protocols and baselines.

One PEFT module per task on the frozen backbone (ours), plus three
baselines: naive sequential fine-tuning of a single module (ft), the
same with a small rehearsal buffer (replay), and joint training on the
shuffled union (mtl).  Training uses masked cross-entropy restricted to
the classes in play; evaluation always takes the argmax over the full
class union with no task identity.

Every run is a pure function of (suite seed, order, seed, configs):
batch order comes from seeded generators, per-task streams are derived
with a keyed mix so each task's training is reproducible in isolation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import bench
from .backbone import (
    BackboneParams,
    ClassifierModel,
    backbone_backward,
    backbone_forward,
    model_accuracy,
    verify_fingerprint,
)
from .bench import TaskDataset, TaskSplits
from .optim import Adam
from .peft import PeftConfig, PeftParamSet, init_mean, init_pre, init_random
from .task_vector import (
    DEFAULT_LAMBDA_GRID,
    MergeConfig,
    TaskVector,
    apply,
    combine,
    compute_task_vector,
    lambda_sweep,
)
from .tensor import linear_backward, linear_forward, softmax_cross_entropy

METHODS = ("ours_lora", "ours_adapter", "ft", "replay", "mtl")
INIT_STRATEGIES = ("noinit", "pre", "mean")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite loss at training step {step}{detail}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class RunReport:
    method: str
    order: list[str] | None  # None for mtl
    per_task_accuracy: dict[str, float]
    average_accuracy: float
    lambda_used: float
    init_strategy: str
    seeds: list[int]
    wall_time_seconds: float


def aggregate_average(values) -> float:
    """Arithmetic mean of accuracies (tables round it to one decimal)."""
    values = list(values)
    if not values:
        raise ValueError("nothing to average")
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def round1(x: float) -> float:
    """Round to one decimal, halves away from zero (for emitted tables)."""
    import decimal

    d = decimal.Decimal(repr(float(x))).quantize(
        decimal.Decimal("0.1"), rounding=decimal.ROUND_HALF_UP
    )
    return float(d)


def derive_task_seed(seed: int, position: int, role: str = "train") -> int:
    """Stable per-task stream seed; lets a task be retrained in isolation."""
    role_tag = {"train": 1, "init": 2, "replay": 3, "mtl": 4}[role]
    return bench.stream_seed(seed, 400 + role_tag, position)


def class_mask_for(specs, n_total_classes: int) -> np.ndarray:
    """Boolean union mask covering the class ranges of the given specs."""
    if isinstance(specs, bench.TaskSpec):
        specs = [specs]
    mask = np.zeros(n_total_classes, dtype=bool)
    for spec in specs:
        mask[spec.class_offset : spec.class_offset + spec.n_classes] = True
    return mask


def _loss_and_grads(backbone: BackboneParams, phi: PeftParamSet, seqs, labels, mask):
    pooled, cache = backbone_forward(seqs, backbone, phi)
    logits = linear_forward(pooled, phi.params["head_w"], phi.params["head_b"])
    loss, grad_logits = softmax_cross_entropy(logits, labels, mask)
    gpooled, ghw, ghb = linear_backward(pooled, phi.params["head_w"], grad_logits)
    att_grads, _ = backbone_backward(cache, gpooled)
    att_grads["head_w"] = ghw
    att_grads["head_b"] = ghb
    return loss, att_grads


def _train_minibatches(backbone, phi, batches, mask, config: TrainConfig,
                       step_offset: int = 0) -> int:
    """Adam over phi's live parameters for a prepared batch list."""
    opt = Adam(phi.params, lr=config.learning_rate)
    step = step_offset
    for seqs, labels in batches:
        loss, grads = _loss_and_grads(backbone, phi, seqs, labels, mask)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        opt.step(grads)
        step += 1
    return step


def _epoch_batches(examples, config: TrainConfig, rng) -> list:
    """Shuffled minibatches for all epochs, one permutation per epoch."""
    n = len(examples)
    batches = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            batches.append(
                (
                    [examples[j][0] for j in idx],
                    [examples[j][1] for j in idx],
                )
            )
    return batches


def train_task(backbone: BackboneParams, phi: PeftParamSet, train_set: TaskDataset,
               config: TrainConfig, class_mask: np.ndarray | None = None) -> PeftParamSet:
    """Train one module on one task with masked cross-entropy.

    Only phi's live parameters move; the snapshot and the backbone stay
    untouched (checked via the fingerprint).
    """
    if len(train_set.examples) == 0:
        raise ValueError("empty training set")
    if class_mask is None:
        class_mask = class_mask_for(train_set.spec, phi.config.head_classes)
    before = backbone.fingerprint
    rng = np.random.default_rng(config.seed)
    batches = _epoch_batches(train_set.examples, config, rng)
    _train_minibatches(backbone, phi, batches, class_mask, config)
    assert backbone.fingerprint == before and verify_fingerprint(backbone)
    return phi


def evaluate(model: ClassifierModel, test_set: TaskDataset) -> float:
    """Accuracy with argmax over all union classes (no task identity)."""
    if len(test_set.examples) == 0:
        raise ValueError("empty evaluation set")
    return model_accuracy(model, test_set.examples)


def _suite_by_id(suite: list[TaskSplits]) -> dict[str, TaskSplits]:
    return {b.spec.task_id: b for b in suite}


def _check_order(suite, order):
    ids = [b.spec.task_id for b in suite]
    if sorted(order) != sorted(ids):
        raise ValueError(f"order {order} is not a permutation of suite tasks {ids}")


def _evaluate_all(backbone, phi, suite) -> tuple[dict[str, float], float]:
    model = ClassifierModel(backbone, phi)
    per_task = {b.spec.task_id: evaluate(model, b.test) for b in suite}
    avg = aggregate_average(list(per_task.values()))
    return per_task, avg


def _make_report(method, order, per_task, avg, lam, init_strategy, seed, t0) -> RunReport:
    report = RunReport(
        method=method,
        order=list(order) if order is not None else None,
        per_task_accuracy=per_task,
        average_accuracy=avg,
        lambda_used=lam,
        init_strategy=init_strategy,
        seeds=[seed],
        wall_time_seconds=time.perf_counter() - t0,
    )
    assert abs(report.average_accuracy - np.mean(list(per_task.values()))) < 1e-9
    return report


def train_task_sequence(
    suite: list[TaskSplits],
    order: list[str],
    peft_config: PeftConfig,
    init_strategy: str,
    train_config: TrainConfig,
    on_task_trained=None,
    backbone: BackboneParams = None,
):
    """Train one fresh module per task; returns (modules, vectors, anchor).

    The anchor is the first module (its init snapshot is the merge
    anchor).  `on_task_trained(task_id, model)` fires after each task
    for callers that want just-trained diagnostics.
    """
    if init_strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {init_strategy!r}")
    _check_order(suite, order)
    by_id = _suite_by_id(suite)
    modules: list[PeftParamSet] = []
    vectors: list[TaskVector] = []
    anchor = None
    for pos, task_id in enumerate(order):
        bundle = by_id[task_id]
        if pos == 0 or init_strategy == "noinit":
            phi = init_random(peft_config, seed=derive_task_seed(train_config.seed, pos, "init"))
        elif init_strategy == "pre":
            phi = init_pre(modules[-1])
        else:
            phi = init_mean(modules)
        if pos == 0:
            anchor = phi
        cfg = replace(train_config, seed=derive_task_seed(train_config.seed, pos))
        train_task(backbone, phi, bundle.train, cfg)
        if on_task_trained is not None:
            on_task_trained(task_id, ClassifierModel(backbone, phi))
        modules.append(phi)
        vectors.append(compute_task_vector(phi, source_task=task_id))
    return modules, vectors, anchor


def run_sequential(
    suite: list[TaskSplits],
    order: list[str],
    peft_config: PeftConfig,
    init_strategy: str,
    train_config: TrainConfig,
    merge_config: MergeConfig = MergeConfig(),
    sweep_lambda: bool = False,
    sweep_grid=DEFAULT_LAMBDA_GRID,
    backbone: BackboneParams = None,
    on_task_trained=None,
    collect_vectors: list | None = None,
) -> RunReport:
    """Ours: per-task modules, merged by scaled summation, evaluated jointly."""
    t0 = time.perf_counter()
    modules, vectors, anchor = train_task_sequence(
        suite, order, peft_config, init_strategy, train_config,
        on_task_trained=on_task_trained, backbone=backbone,
    )
    if sweep_lambda:
        lam, _ = lambda_sweep(
            vectors, anchor, backbone, [b.val for b in suite], grid=sweep_grid
        )
    else:
        lam = merge_config.lam
    tau = combine(vectors, replace(merge_config, lam=lam))
    model = apply(backbone, anchor, tau)
    if collect_vectors is not None:
        collect_vectors.append((anchor, vectors, tau))
    per_task = {b.spec.task_id: evaluate(model, b.test) for b in suite}
    avg = aggregate_average(list(per_task.values()))
    method = "ours_lora" if peft_config.kind == "lora" else "ours_adapter"
    return _make_report(method, order, per_task, avg, lam, init_strategy,
                        train_config.seed, t0)


def run_ft_baseline(
    suite: list[TaskSplits],
    order: list[str],
    peft_config: PeftConfig,
    train_config: TrainConfig,
    backbone: BackboneParams = None,
    on_task_trained=None,
) -> RunReport:
    """One module fine-tuned straight through all tasks (lower bound)."""
    t0 = time.perf_counter()
    _check_order(suite, order)
    by_id = _suite_by_id(suite)
    phi = init_random(peft_config, seed=derive_task_seed(train_config.seed, 0, "init"))
    for pos, task_id in enumerate(order):
        bundle = by_id[task_id]
        cfg = replace(train_config, seed=derive_task_seed(train_config.seed, pos))
        train_task(backbone, phi, bundle.train, cfg)
        if on_task_trained is not None:
            on_task_trained(task_id, ClassifierModel(backbone, phi))
    per_task, avg = _evaluate_all(backbone, phi, suite)
    return _make_report("ft", order, per_task, avg, 0.0, "noinit",
                        train_config.seed, t0)


def run_replay_baseline(
    suite: list[TaskSplits],
    order: list[str],
    peft_config: PeftConfig,
    train_config: TrainConfig,
    per_class_buffer: int = 10,
    backbone: BackboneParams = None,
    on_task_trained=None,
) -> RunReport:
    """Sequential fine-tuning with a rehearsal buffer.

    The buffer keeps the first `per_class_buffer` training examples of
    every class seen so far; each later-task batch is mixed 1:1 with
    uniform draws from it.  As everywhere else, an example's loss is
    masked to the class range of the task it came from, so rehearsal
    refreshes old tasks in place rather than adding cross-task
    negatives the sequential protocol would never see.
    """
    if per_class_buffer < 1:
        raise ValueError("per_class_buffer must be >= 1")
    t0 = time.perf_counter()
    _check_order(suite, order)
    by_id = _suite_by_id(suite)
    phi = init_random(peft_config, seed=derive_task_seed(train_config.seed, 0, "init"))
    spec_of_label = {}
    for b in suite:
        for c in range(b.spec.class_offset, b.spec.class_offset + b.spec.n_classes):
            spec_of_label[c] = b.spec
    buffer: list = []
    for pos, task_id in enumerate(order):
        bundle = by_id[task_id]
        rng = np.random.default_rng(derive_task_seed(train_config.seed, pos))
        batches = _epoch_batches(bundle.train.examples, train_config, rng)
        replay_rng = np.random.default_rng(
            derive_task_seed(train_config.seed, pos, "replay")
        )
        opt = Adam(phi.params, lr=train_config.learning_rate)
        for step, (seqs, labels) in enumerate(batches):
            groups = {bundle.spec.task_id: (list(seqs), list(labels), bundle.spec)}
            if buffer:
                picks = replay_rng.integers(0, len(buffer), size=len(seqs))
                for j in picks:
                    seq, label = buffer[j]
                    spec = spec_of_label[label]
                    g = groups.setdefault(spec.task_id, ([], [], spec))
                    g[0].append(seq)
                    g[1].append(label)
            total = sum(len(g[1]) for g in groups.values())
            summed = None
            for gseqs, glabels, gspec in groups.values():
                mask = class_mask_for(gspec, phi.config.head_classes)
                loss, grads = _loss_and_grads(backbone, phi, gseqs, glabels, mask)
                if not np.isfinite(loss):
                    raise DivergenceError(step)
                w = len(glabels) / total
                if summed is None:
                    summed = {k: w * g for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        summed[k] += w * g
            opt.step(summed)
        if on_task_trained is not None:
            on_task_trained(task_id, ClassifierModel(backbone, phi))
        # retain the first k training examples of each class of this task
        kept: dict[int, int] = {}
        for seq, label in bundle.train.examples:
            if kept.get(label, 0) < per_class_buffer:
                buffer.append((seq, label))
                kept[label] = kept.get(label, 0) + 1
    per_task, avg = _evaluate_all(backbone, phi, suite)
    return _make_report("replay", order, per_task, avg, 0.0, "noinit",
                        train_config.seed, t0)


def run_mtl_baseline(
    suite: list[TaskSplits],
    peft_config: PeftConfig,
    train_config: TrainConfig,
    backbone: BackboneParams = None,
) -> RunReport:
    """Joint training on the shuffled union of all tasks (upper bound)."""
    t0 = time.perf_counter()
    phi = init_random(peft_config, seed=derive_task_seed(train_config.seed, 0, "init"))
    union = [ex for b in suite for ex in b.train.examples]
    mask = class_mask_for([b.spec for b in suite], phi.config.head_classes)
    rng = np.random.default_rng(derive_task_seed(train_config.seed, 0, "mtl"))
    batches = _epoch_batches(union, train_config, rng)
    _train_minibatches(backbone, phi, batches, mask, train_config)
    per_task, avg = _evaluate_all(backbone, phi, suite)
    return _make_report("mtl", None, per_task, avg, 0.0, "noinit",
                        train_config.seed, t0)
