"""Task vectors: extraction, scaled merging, application, LoRA folding.

A task vector is the flat difference between a module's tuned parameters
and its own initialisation snapshot.  Merging sums the vectors of all
tasks in ascending task order (float64 accumulation), scales by lambda,
and re-anchors at the first module's initialisation; the backbone is
never touched.

The bottom half implements the TVEC1 binary container used for all
persisted artifacts:

    bytes 0-4   magic "TVEC1"
    byte  5     format version (0x01)
    bytes 6-13  manifest byte length, unsigned 64-bit little-endian
    ...         manifest: canonical UTF-8 JSON describing the entries
    ...         payload: concatenated raw little-endian float32 tensors

Writers emit via a temp file and atomic rename; readers reject unknown
versions and any structural damage without returning partial data.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .backbone import (
    BackboneConfig,
    BackboneParams,
    ClassifierModel,
    backbone_param_shapes,
    compute_fingerprint,
    freeze,
    model_accuracy,
)
from .peft import (
    IncompatibleModuleError,
    PeftConfig,
    PeftParamSet,
    flatten,
    flatten_dict,
    param_shapes,
    unflatten,
)

MAGIC = b"TVEC1"
VERSION = 1

DEFAULT_LAMBDA_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)


class IntegrityError(ValueError):
    """A module is missing the state needed for vector extraction."""


class UnsupportedKindError(ValueError):
    """Operation does not apply to this module kind."""


class FormatError(ValueError):
    """A TVEC1 container is damaged or not a TVEC1 container."""


@dataclass
class TaskVector:
    config: PeftConfig
    values: np.ndarray  # flat, canonical parameter order
    source_task: str
    anchor_note: str = "per-module-init"


@dataclass(frozen=True)
class MergeConfig:
    lam: float = 0.25  # serialized under the key "lambda"
    anchor: str = "first_module_init"
    summation_order: str = "ascending"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 2.0:
            raise ValueError(f"lambda {self.lam} outside [0, 2]")
        if self.anchor != "first_module_init":
            raise ValueError(f"unknown anchor policy {self.anchor!r}")
        if self.summation_order != "ascending":
            raise ValueError(f"unknown summation order {self.summation_order!r}")


def compute_task_vector(phi: PeftParamSet, source_task: str = "") -> TaskVector:
    """tau = flatten(live) - flatten(init snapshot)."""
    if not phi.init_snapshot:
        raise IntegrityError("module has no init snapshot")
    live = flatten(phi)
    init = flatten_dict(phi.init_snapshot, phi.config)
    return TaskVector(phi.config, live - init, source_task)


def combine(vectors: list[TaskVector], merge: MergeConfig) -> TaskVector:
    """Scaled sum of task vectors: lambda * sum(tau_i), float64 accumulated."""
    if not vectors:
        raise ValueError("combine needs at least one task vector")
    config = vectors[0].config
    for v in vectors[1:]:
        if v.config != config:
            raise IncompatibleModuleError("task vectors with differing configs")
    ordered = sorted(vectors, key=lambda v: v.source_task)
    acc = np.zeros(ordered[0].values.shape, dtype=np.float64)
    for v in ordered:
        acc += v.values.astype(np.float64)
    out = (merge.lam * acc).astype(vectors[0].values.dtype)
    return TaskVector(config, out, source_task="merged")


def apply(backbone: BackboneParams, anchor: PeftParamSet, tau: TaskVector) -> ClassifierModel:
    """Anchor-init plus tau, bound to the untouched backbone."""
    if anchor.config != tau.config:
        raise IncompatibleModuleError("anchor and task vector configs differ")
    base = flatten_dict(anchor.init_snapshot, anchor.config)
    merged = unflatten(base + tau.values, anchor.config)
    phi = PeftParamSet(
        config=anchor.config,
        params=merged,
        init_snapshot={k: v.copy() for k, v in anchor.init_snapshot.items()},
        lineage=anchor.lineage,
    )
    return ClassifierModel(backbone, phi)


def lambda_sweep(
    vectors: list[TaskVector],
    anchor: PeftParamSet,
    backbone: BackboneParams,
    validation_sets,
    grid=DEFAULT_LAMBDA_GRID,
):
    """Mean validation accuracy per lambda; returns (best, table).

    Ties break toward the smallest lambda.  The table preserves grid
    order as (lambda, mean accuracy) pairs.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty lambda grid")
    if not validation_sets:
        raise ValueError("no validation sets")
    table = []
    for lam in grid:
        model = apply(backbone, anchor, combine(vectors, MergeConfig(lam=lam)))
        accs = [model_accuracy(model, ds.examples) for ds in validation_sets]
        table.append((lam, float(np.mean(accs))))
    best = max(table, key=lambda row: (row[1], -row[0]))[0]
    return best, table


def fold_lora(backbone: BackboneParams, phi: PeftParamSet) -> BackboneParams:
    """Fold LoRA deltas into fresh backbone weights: W += (alpha/r) A @ B.

    Returns a new frozen BackboneParams with a recomputed fingerprint;
    the input backbone is untouched.  The head is not folded (it has no
    frozen counterpart).
    """
    if phi.config.kind != "lora":
        raise UnsupportedKindError(f"cannot fold module of kind {phi.config.kind!r}")
    scale = phi.config.scaling
    weights = {k: v.copy() for k, v in backbone.weights.items()}
    for i in phi.config.target_layers:
        weights[f"L{i}.wq"] = weights[f"L{i}.wq"] + scale * (
            phi.params[f"L{i}.a_q"] @ phi.params[f"L{i}.b_q"]
        )
        weights[f"L{i}.wv"] = weights[f"L{i}.wv"] + scale * (
            phi.params[f"L{i}.a_v"] @ phi.params[f"L{i}.b_v"]
        )
    return freeze(backbone.config, weights)


# -- TVEC1 container --------------------------------------------------------


@dataclass
class ContainerEntry:
    name: str
    kind: str  # "backbone" | "peft" | "taskvector"
    payload: object  # BackboneParams | PeftParamSet | TaskVector


def _require_f32(entry_name: str, tensor_name: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype != np.float32:
        raise FormatError(
            f"entry {entry_name!r} tensor {tensor_name!r} is {arr.dtype}, "
            "containers store float32 only"
        )
    return arr


def _entry_tensors(entry: ContainerEntry) -> list[tuple[str, np.ndarray]]:
    p = entry.payload
    if entry.kind == "backbone":
        return [(n, p.weights[n]) for n in backbone_param_shapes(p.config)]
    if entry.kind == "peft":
        names = list(param_shapes(p.config))
        return [(f"live.{n}", p.params[n]) for n in names] + [
            (f"init.{n}", p.init_snapshot[n]) for n in names
        ]
    if entry.kind == "taskvector":
        return [("values", p.values)]
    raise FormatError(f"unknown entry kind {entry.kind!r}")


def _peft_config_dict(config: PeftConfig) -> dict:
    d = dataclasses.asdict(config)
    d["target_layers"] = list(config.target_layers)
    return d


def container_bytes(entries: list[ContainerEntry]) -> bytes:
    """Serialize entries to TVEC1 bytes (canonical, byte-stable)."""
    manifest_entries = []
    payload_parts: list[bytes] = []
    offset = 0
    for entry in entries:
        tensors = []
        for tname, arr in _entry_tensors(entry):
            _require_f32(entry.name, tname, arr)
            raw = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
            tensors.append(
                {
                    "name": tname,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "length": len(raw),
                }
            )
            payload_parts.append(raw)
            offset += len(raw)
        m: dict = {
            "name": entry.name,
            "kind": entry.kind,
            "dtype": "f32le",
            "tensors": tensors,
        }
        p = entry.payload
        if entry.kind == "backbone":
            m["config"] = dataclasses.asdict(p.config)
            m["fingerprint"] = p.fingerprint
        elif entry.kind == "peft":
            m["config"] = _peft_config_dict(p.config)
            m["lineage"] = p.lineage
        else:
            m["config"] = _peft_config_dict(p.config)
            m["source_task"] = p.source_task
            m["anchor_note"] = p.anchor_note
        manifest_entries.append(m)
    manifest = json.dumps(
        {"entries": manifest_entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return (
        MAGIC
        + bytes([VERSION])
        + struct.pack("<Q", len(manifest))
        + manifest
        + b"".join(payload_parts)
    )


def save_container(path, entries: list[ContainerEntry]) -> None:
    """Atomic write: serialize fully, then temp file + rename."""
    data = container_bytes(entries)
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


def load_container_bytes(data: bytes) -> list[ContainerEntry]:
    if len(data) < 14 or data[:5] != MAGIC:
        raise FormatError("not a TVEC1 container (bad magic)")
    if data[5] != VERSION:
        raise FormatError(f"unsupported TVEC1 version {data[5]}")
    (manifest_len,) = struct.unpack("<Q", data[6:14])
    if 14 + manifest_len > len(data):
        raise FormatError("manifest length exceeds container size")
    try:
        manifest = json.loads(data[14 : 14 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "entries" not in manifest:
        raise FormatError("manifest missing entries list")
    payload = data[14 + manifest_len :]

    out = []
    for m in manifest["entries"]:
        name = m.get("name", "<unnamed>")
        if m.get("dtype") != "f32le":
            raise FormatError(f"entry {name!r} has unsupported dtype {m.get('dtype')!r}")
        tensors: dict[str, np.ndarray] = {}
        for t in m.get("tensors", []):
            shape = tuple(int(s) for s in t["shape"])
            n_bytes = int(t["length"])
            offset = int(t["offset"])
            if n_bytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(
                    f"entry {name!r} tensor {t['name']!r}: length {n_bytes} "
                    f"does not match shape {shape}"
                )
            if offset < 0 or offset + n_bytes > len(payload):
                raise FormatError(
                    f"entry {name!r} tensor {t['name']!r}: payload truncated"
                )
            arr = np.frombuffer(payload, dtype="<f4", count=n_bytes // 4, offset=offset)
            tensors[t["name"]] = arr.reshape(shape).astype(np.float32, copy=True)

        kind = m.get("kind")
        try:
            if kind == "backbone":
                config = BackboneConfig(**m["config"])
            elif kind in ("peft", "taskvector"):
                cd = dict(m["config"])
                cd["target_layers"] = tuple(cd["target_layers"])
                config = PeftConfig(**cd)
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"entry {name!r}: bad config: {exc}") from exc
        if kind == "backbone":
            expected = backbone_param_shapes(config)
            if set(tensors) != set(expected):
                raise FormatError(f"entry {name!r}: backbone tensors incomplete")
            weights = {n: tensors[n] for n in expected}
            if compute_fingerprint(config, weights) != m.get("fingerprint"):
                raise FormatError(f"entry {name!r}: fingerprint mismatch")
            payload_obj: object = freeze(config, weights)
        elif kind == "peft":
            names = list(param_shapes(config))
            try:
                params = {n: tensors[f"live.{n}"] for n in names}
                snapshot = {n: tensors[f"init.{n}"] for n in names}
            except KeyError as exc:
                raise FormatError(f"entry {name!r}: peft tensors incomplete") from exc
            payload_obj = PeftParamSet(config, params, snapshot, lineage=m.get("lineage", ""))
        elif kind == "taskvector":
            if "values" not in tensors:
                raise FormatError(f"entry {name!r}: missing values tensor")
            payload_obj = TaskVector(
                config,
                tensors["values"],
                source_task=m.get("source_task", ""),
                anchor_note=m.get("anchor_note", "per-module-init"),
            )
        else:
            raise FormatError(f"entry {name!r} has unknown kind {kind!r}")
        out.append(ContainerEntry(name=name, kind=kind, payload=payload_obj))
    return out


def load_container(path) -> list[ContainerEntry]:
    with open(str(path), "rb") as fh:
        return load_container_bytes(fh.read())
