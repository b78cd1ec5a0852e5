"""Deterministic synthetic text-classification benchmark.

Five disjoint tasks, stand-ins for a news/QA/encyclopedia "topic" family
and a two-task "sentiment" family with shared family vocabulary.  Each
class is a token-frequency profile: class-indicative tokens appear with
probability 0.35, family-shared tokens with 0.25, background tokens
otherwise.  Family and background slots
walk their pools cyclically from a seeded start, so two same-class
examples differ mainly in where the indicative tokens landed, not in
which filler they happened to draw.  All sampling
is integer-only through keyed splitmix64 streams, so a suite is a pure
function of the master seed regardless of platform.

Token layout (default profile):
    [0, 20)     class-indicative tokens, 1 per union class
    [20, 36)    four family pools of 4 tokens (t2 and t3 share one pool,
                the sentiment-style overlap; t1, t4, t5 get private pools)
    [36, 44)    background pool
Ids at and above 44 are never emitted; the backbone's default 200-token
vocabulary leaves headroom for other profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Master seed of the reference suite used by the acceptance experiments.
REFERENCE_MASTER_SEED = 77

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

CLASS_COUNTS = (4, 3, 3, 5, 5)
N_UNION_CLASSES = sum(CLASS_COUNTS)  # 20
TOKENS_PER_CLASS = 1
FAMILY_POOL = 4
# task index -> family index; tasks 2 and 3 (0-based 1 and 2) share a family,
# every other task has a private pool so family tokens are task-evidence
TASK_FAMILY = (0, 1, 1, 2, 3)
N_FAMILIES = max(TASK_FAMILY) + 1
BACKGROUND_POOL = 8
VOCAB_SIZE = N_UNION_CLASSES * TOKENS_PER_CLASS + N_FAMILIES * FAMILY_POOL + BACKGROUND_POOL
SPLIT_SIZES = {"train": 400, "val": 100, "test": 200}
MIN_LEN, MAX_LEN = 8, 24

_P_CLASS = int(0.35 * 2.0**64)
_P_FAMILY = _P_CLASS + int(0.25 * 2.0**64)


def _scramble(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_seed(*parts: int) -> int:
    """Fold integer key parts into one 64-bit stream seed."""
    s = 0
    for p in parts:
        s = _scramble(((s << 1) ^ (int(p) & _MASK64)) + _GOLDEN)
    return s


class SplitMix64:
    """Tiny keyed PRNG; the entire benchmark is defined in terms of it."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _scramble(self._state)

    def below(self, n: int) -> int:
        return self.next_u64() % n


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    n_classes: int
    class_offset: int  # first union-space label of this task
    vocab_slice: tuple[int, int]  # indicative-token id range [lo, hi)
    n_train: int = SPLIT_SIZES["train"]
    n_val: int = SPLIT_SIZES["val"]
    n_test: int = SPLIT_SIZES["test"]


@dataclass
class TaskDataset:
    spec: TaskSpec
    split: str
    examples: list[tuple[np.ndarray, int]]  # (token ids, union-space label)

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class TaskSplits:
    spec: TaskSpec
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset


def task_specs() -> list[TaskSpec]:
    specs = []
    offset = 0
    for i, n in enumerate(CLASS_COUNTS):
        specs.append(
            TaskSpec(
                task_id=f"t{i + 1}",
                n_classes=n,
                class_offset=offset,
                vocab_slice=(
                    offset * TOKENS_PER_CLASS,
                    (offset + n) * TOKENS_PER_CLASS,
                ),
            )
        )
        offset += n
    return specs


def _family_tokens(family: int) -> range:
    lo = N_UNION_CLASSES * TOKENS_PER_CLASS + family * FAMILY_POOL
    return range(lo, lo + FAMILY_POOL)


def _background_tokens() -> range:
    lo = N_UNION_CLASSES * TOKENS_PER_CLASS + N_FAMILIES * FAMILY_POOL
    return range(lo, lo + BACKGROUND_POOL)


def _draw_example(rng: SplitMix64, union_class: int, family: int) -> tuple[int, ...]:
    length = MIN_LEN + rng.below(MAX_LEN - MIN_LEN + 1)
    indicative = union_class * TOKENS_PER_CLASS + rng.below(TOKENS_PER_CLASS)
    fam = _family_tokens(family)
    bg = _background_tokens()
    # filler slots cycle through their pool from a seeded start; only the
    # slot pattern varies between same-class examples, which keeps
    # within-class composition noise near the binomial floor
    fam_at = rng.below(FAMILY_POOL)
    bg_at = rng.below(BACKGROUND_POOL)
    tokens = []
    for _ in range(length):
        u = rng.next_u64()
        if u < _P_CLASS:
            tokens.append(indicative)
        elif u < _P_FAMILY:
            tokens.append(fam[fam_at % FAMILY_POOL])
            fam_at += 1
        else:
            tokens.append(bg[bg_at % BACKGROUND_POOL])
            bg_at += 1
    return tuple(tokens)


def generate_suite(master_seed: int, profile: str = "default") -> list[TaskSplits]:
    """Generate the five-task suite for a master seed.

    Labels are balanced (class = example index mod n_classes), duplicate
    sequences are rejected by continuing the same stream, and the three
    splits of a task never share a sequence.
    """
    if profile != "default":
        raise ValueError(f"unknown suite profile {profile!r}")
    suite = []
    for t_idx, spec in enumerate(task_specs()):
        seen: set[tuple[int, ...]] = set()
        family = TASK_FAMILY[t_idx]
        datasets = {}
        for s_idx, split in enumerate(("train", "val", "test")):
            n = SPLIT_SIZES[split]
            examples = []
            for ex_idx in range(n):
                rng = SplitMix64(stream_seed(master_seed, 101, t_idx, s_idx, ex_idx))
                label = spec.class_offset + ex_idx % spec.n_classes
                seq = _draw_example(rng, label, family)
                while seq in seen:
                    seq = _draw_example(rng, label, family)
                seen.add(seq)
                examples.append((np.asarray(seq, dtype=np.int64), label))
            datasets[split] = TaskDataset(spec, split, examples)
        suite.append(TaskSplits(spec, datasets["train"], datasets["val"], datasets["test"]))
    return suite


def standard_orders() -> dict[str, list[str]]:
    """The three evaluation orders: forward, reverse, and interleaved."""
    ids = [s.task_id for s in task_specs()]
    return {
        "A": list(ids),
        "B": list(reversed(ids)),
        "C": [ids[2], ids[4], ids[0], ids[3], ids[1]],
    }


# -- pre-training mixture ---------------------------------------------------

PRETRAIN_CLASSES = 8
PRETRAIN_EXAMPLES = 768
_PREFERRED_PER_CLASS = 2


def generate_pretrain_mixture(
    seed: int,
    n_classes: int = PRETRAIN_CLASSES,
    n_examples: int = PRETRAIN_EXAMPLES,
) -> TaskDataset:
    """Generic classification mixture over the background token pool.

    Each mixture class prefers two background tokens (probability 0.35
    per slot), drawing uniformly from the rest of the pool otherwise.
    The preferred pairs tile a seeded permutation of the pool, so every
    background token is preferred by the same number of classes and
    pre-training amplifies none of them over the others.  The label
    space is private to the pre-training phase.
    """
    if n_classes < 2 or n_examples < n_classes:
        raise ValueError("mixture needs >= 2 classes and >= 1 example per class")
    bg = _background_tokens()
    perm = list(bg)
    rng = SplitMix64(stream_seed(seed, 202))
    for i in range(len(perm) - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    preferred = [
        [perm[k % BACKGROUND_POOL], perm[(k + 1) % BACKGROUND_POOL]]
        for k in range(n_classes)
    ]
    examples = []
    for ex_idx in range(n_examples):
        rng = SplitMix64(stream_seed(seed, 203, ex_idx))
        label = ex_idx % n_classes
        length = MIN_LEN + rng.below(MAX_LEN - MIN_LEN + 1)
        tokens = []
        for _ in range(length):
            if rng.next_u64() < _P_CLASS:
                tokens.append(preferred[label][rng.below(_PREFERRED_PER_CLASS)])
            else:
                tokens.append(bg[rng.below(BACKGROUND_POOL)])
        examples.append((np.asarray(tokens, dtype=np.int64), label))
    spec = TaskSpec(
        task_id="pretrain",
        n_classes=n_classes,
        class_offset=0,
        vocab_slice=(bg[0], bg[0] + BACKGROUND_POOL),
        n_train=n_examples,
        n_val=0,
        n_test=0,
    )
    return TaskDataset(spec, "train", examples)


# -- line-format export / import -------------------------------------------


def export_suite(suite: list[TaskSplits], directory) -> dict[str, str]:
    """Write one TSV file per split: task_id<TAB>label<TAB>token ids."""
    import os

    os.makedirs(directory, exist_ok=True)
    paths = {}
    for split in ("train", "val", "test"):
        path = os.path.join(str(directory), f"suite_{split}.tsv")
        lines = []
        for bundle in suite:
            ds = getattr(bundle, split)
            for seq, label in ds.examples:
                lines.append(
                    f"{ds.spec.task_id}\t{label}\t{' '.join(str(t) for t in seq)}"
                )
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
        paths[split] = path
    return paths


def import_split(path, split: str = "train") -> list[TaskDataset]:
    """Read a TSV written by export_suite back into per-task datasets."""
    grouped: dict[str, list[tuple[np.ndarray, int]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
            task_id, label, ids = parts
            seq = np.asarray([int(t) for t in ids.split(" ")], dtype=np.int64)
            grouped.setdefault(task_id, []).append((seq, int(label)))
    out = []
    for task_id, examples in grouped.items():
        labels = [lab for _, lab in examples]
        offset = min(labels)
        n_classes = max(labels) - offset + 1
        spec = TaskSpec(
            task_id=task_id,
            n_classes=n_classes,
            class_offset=offset,
            vocab_slice=(offset * TOKENS_PER_CLASS, (offset + n_classes) * TOKENS_PER_CLASS),
            n_train=len(examples) if split == "train" else 0,
            n_val=len(examples) if split == "val" else 0,
            n_test=len(examples) if split == "test" else 0,
        )
        out.append(TaskDataset(spec, split, examples))
    return out
