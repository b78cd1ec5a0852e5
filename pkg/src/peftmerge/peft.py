"""Parameter-efficient modules: LoRA and bottleneck adapters.

One module holds everything task-specific: low-rank (or bottleneck)
deltas for the targeted transformer layers plus the classification head
over the full class union.  The frozen backbone never changes; modules
are initialised so their attachment is a no-op (zero delta), and every
module keeps a snapshot of its initialisation so the task vector
(live - snapshot) is always well defined.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

INIT_STD = 0.02


class IncompatibleModuleError(ValueError):
    """Modules with differing configurations were combined."""


@dataclass(frozen=True)
class PeftConfig:
    kind: str  # "lora" or "adapter"
    d_model: int
    n_layers: int
    head_classes: int
    lora_rank: int = 16
    lora_alpha: float | None = None  # resolved to 2 * rank
    adapter_bottleneck: int = 32
    target_layers: tuple[int, ...] | None = None  # resolved to all layers

    def __post_init__(self):
        if self.kind not in ("lora", "adapter"):
            raise ValueError(f"unknown peft kind {self.kind!r}")
        if self.d_model < 1 or self.n_layers < 1 or self.head_classes < 1:
            raise ValueError("d_model, n_layers and head_classes must be positive")
        if not 1 <= self.lora_rank <= self.d_model:
            raise ValueError(
                f"lora_rank {self.lora_rank} must lie in [1, d_model={self.d_model}]"
            )
        if not 1 <= self.adapter_bottleneck <= 4 * self.d_model:
            raise ValueError(
                f"adapter_bottleneck {self.adapter_bottleneck} must lie in "
                f"[1, 4*d_model={4 * self.d_model}]"
            )
        if self.lora_alpha is None:
            object.__setattr__(self, "lora_alpha", 2.0 * self.lora_rank)
        elif self.lora_alpha <= 0:
            raise ValueError("lora_alpha must be positive")
        if self.target_layers is None:
            object.__setattr__(self, "target_layers", tuple(range(self.n_layers)))
        else:
            layers = tuple(sorted(int(i) for i in self.target_layers))
            if len(set(layers)) != len(layers):
                raise ValueError("target_layers contains duplicates")
            if layers and (layers[0] < 0 or layers[-1] >= self.n_layers):
                raise ValueError(f"target_layers {layers} out of range")
            object.__setattr__(self, "target_layers", layers)

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank


def param_shapes(config: PeftConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; its order defines the flatten order."""
    d, r, b = config.d_model, config.lora_rank, config.adapter_bottleneck
    shapes: dict[str, tuple[int, ...]] = {}
    for i in config.target_layers:
        if config.kind == "lora":
            shapes[f"L{i}.a_q"] = (d, r)
            shapes[f"L{i}.b_q"] = (r, d)
            shapes[f"L{i}.a_v"] = (d, r)
            shapes[f"L{i}.b_v"] = (r, d)
        else:
            shapes[f"L{i}.w_down"] = (d, b)
            shapes[f"L{i}.b_down"] = (b,)
            shapes[f"L{i}.w_up"] = (b, d)
            shapes[f"L{i}.b_up"] = (d,)
    shapes["head_w"] = (d, config.head_classes)
    shapes["head_b"] = (config.head_classes,)
    return shapes


def param_count(config: PeftConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class PeftParamSet:
    config: PeftConfig
    params: dict[str, np.ndarray]
    init_snapshot: dict[str, np.ndarray]
    lineage: str = "random:0"

    def copy(self) -> "PeftParamSet":
        return PeftParamSet(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            init_snapshot={k: v.copy() for k, v in self.init_snapshot.items()},
            lineage=self.lineage,
        )


def init_random(config: PeftConfig, seed: int, dtype=np.float32) -> PeftParamSet:
    """Fresh module: down/A/head weights ~ N(0, 0.02), up/B and biases zero.

    The zero up-projections make the attachment an exact no-op at init.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        base = name.split(".")[-1]
        if base in ("a_q", "a_v", "w_down", "head_w"):
            arr = rng.normal(0.0, INIT_STD, size=shape)
        else:  # b_q, b_v, w_up, biases: zero so the delta starts at nothing
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    snapshot = {k: v.copy() for k, v in params.items()}
    return PeftParamSet(config, params, snapshot, lineage=f"random:{seed}")


def init_pre(previous: PeftParamSet) -> PeftParamSet:
    """Warm start: copy the previous module's live parameters."""
    params = {k: v.copy() for k, v in previous.params.items()}
    snapshot = {k: v.copy() for k, v in previous.params.items()}
    return PeftParamSet(previous.config, params, snapshot, lineage="pre")


def init_mean(modules: list[PeftParamSet]) -> PeftParamSet:
    """Warm start from the element-wise mean of previous live parameters.

    Accumulates in float64, then casts back to the working precision.
    """
    if not modules:
        raise ValueError("init_mean needs at least one module")
    config = modules[0].config
    for m in modules[1:]:
        if m.config != config:
            raise IncompatibleModuleError(
                "init_mean over modules with differing configs"
            )
    if len(modules) == 1:
        out = init_pre(modules[0])
        out.lineage = "mean"
        return out
    params: dict[str, np.ndarray] = {}
    for name in param_shapes(config):
        acc = np.zeros(modules[0].params[name].shape, dtype=np.float64)
        for m in modules:
            acc += m.params[name].astype(np.float64)
        params[name] = (acc / len(modules)).astype(modules[0].params[name].dtype)
    snapshot = {k: v.copy() for k, v in params.items()}
    return PeftParamSet(config, params, snapshot, lineage="mean")


def flatten_dict(params: dict[str, np.ndarray], config: PeftConfig) -> np.ndarray:
    """Concatenate a parameter dict into one flat vector, canonical order."""
    parts = []
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise IncompatibleModuleError(f"missing parameter {name}")
        arr = params[name]
        if arr.shape != shape:
            raise DimensionError(
                f"parameter {name} has shape {arr.shape}, expected {shape}"
            )
        parts.append(arr.ravel())
    return np.concatenate(parts)


def flatten(phi: PeftParamSet) -> np.ndarray:
    return flatten_dict(phi.params, phi.config)


def unflatten(flat: np.ndarray, config: PeftConfig) -> dict[str, np.ndarray]:
    """Inverse of flatten: split a flat vector back into named parameters."""
    flat = np.asarray(flat)
    if flat.ndim != 1:
        raise DimensionError(f"expected a flat vector, got shape {flat.shape}")
    expected = param_count(config)
    if flat.size != expected:
        raise DimensionError(
            f"flat vector has {flat.size} elements, config expects {expected}"
        )
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in param_shapes(config).items():
        size = int(np.prod(shape))
        out[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    return out


def lora_forward(x, w_frozen, a, b, alpha: float, r: int) -> np.ndarray:
    """x @ w_frozen + (alpha / r) * (x @ a) @ b  (no bias)."""
    x = np.asarray(x)
    if x.shape[1] != w_frozen.shape[0] or a.shape != (w_frozen.shape[0], r) or b.shape != (r, w_frozen.shape[1]):
        raise DimensionError(
            f"lora shapes x{x.shape} w{w_frozen.shape} a{a.shape} b{b.shape} disagree"
        )
    return x @ w_frozen + (alpha / r) * ((x @ a) @ b)


def adapter_forward(h, w_down, b_down, w_up, b_up) -> np.ndarray:
    """h + relu(h @ w_down + b_down) @ w_up + b_up."""
    h = np.asarray(h)
    if h.shape[1] != w_down.shape[0] or w_up.shape != (w_down.shape[1], h.shape[1]):
        raise DimensionError(
            f"adapter shapes h{h.shape} down{w_down.shape} up{w_up.shape} disagree"
        )
    hidden = np.maximum(h @ w_down + b_down, 0)
    return h + hidden @ w_up + b_up
