"""Checkpoint serialization: little-endian flat arrays plus a JSON manifest,
and standalone export of a single pruned structure."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError
from .graph import ArchSpec, BNStats, ChannelMask, LayerSpec, SharedWeightStore
from .ops import DTYPES

CHECKPOINT_FORMAT_VERSION = 1


def _precision_name(dtype) -> str:
    for name, dt in DTYPES.items():
        if np.dtype(dtype) == np.dtype(dt):
            return name
    raise FormatError(f"unsupported dtype {dtype!r}")


def _stats_tensors(prefix: str, stats: BNStats):
    for i in sorted(stats.means):
        yield f"{prefix}layer{i:02d}.running_mean", stats.means[i]
        yield f"{prefix}layer{i:02d}.running_var", stats.variances[i]


def _store_tensors(store: SharedWeightStore):
    """Deterministic (name, array) order: params, base stats, branches, calibrated."""
    for name in sorted(store.params):
        yield name, store.params[name]
    yield from _stats_tensors("stats.", store.stats)
    for sid in sorted(store.branch_stats):
        yield from _stats_tensors(f"stats[{sid}].", store.branch_stats[sid])
    for sid, res in sorted(store.calibrated):
        yield from _stats_tensors(f"calib[{sid}@{res}].", store.calibrated[(sid, res)])


def _counts_payload(store: SharedWeightStore):
    as_str = lambda c: {str(i): int(n) for i, n in c.items()}
    return {
        "base": as_str(store.stats.counts),
        "branches": {sid: as_str(s.counts) for sid, s in sorted(store.branch_stats.items())},
        "calibrated": {f"{sid}@{res}": as_str(s.counts)
                       for (sid, res), s in sorted(store.calibrated.items())},
    }


def save_store(store: SharedWeightStore, prefix: str, extra: dict | None = None) -> dict:
    """Write prefix.bin (concatenated little-endian arrays) and prefix.json.

    The manifest records each tensor's name, shape, and byte offset in file
    order, plus the architecture and precision, so the pair is self
    describing. Tensor order is deterministic and reruns are byte-identical.
    """
    precision = _precision_name(store.dtype)
    le_dtype = np.dtype(store.dtype).newbyteorder("<")
    tensors = []
    offset = 0
    chunks = []
    for name, arr in _store_tensors(store):
        a = np.ascontiguousarray(arr, dtype=le_dtype)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "store",
        "arch": store.spec.to_json_dict(),
        "arch_hash": store.spec.arch_hash(),
        "precision": precision,
        "tensors": tensors,
        "counts": _counts_payload(store),
    }
    if extra:
        manifest.update(extra)
    with open(prefix + ".bin", "wb") as f:
        for c in chunks:
            f.write(c)
    with open(prefix + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_store(prefix: str) -> SharedWeightStore:
    """Rebuild a store (params, stats, branches, calibrated entries) from disk."""
    with open(prefix + ".json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    spec = ArchSpec.from_json_dict(manifest["arch"])
    if manifest.get("arch_hash") and manifest["arch_hash"] != spec.arch_hash():
        raise FormatError("manifest arch_hash does not match embedded architecture")
    precision = manifest["precision"]
    if precision not in DTYPES:
        raise FormatError(f"unknown precision {precision!r}")
    dtype = DTYPES[precision]
    le_dtype = np.dtype(dtype).newbyteorder("<")
    with open(prefix + ".bin", "rb") as f:
        raw = f.read()

    arrays: dict[str, np.ndarray] = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = t["offset"]
        end = start + n * le_dtype.itemsize
        if end > len(raw):
            raise FormatError(f"tensor {t['name']} overruns the data file")
        arrays[t["name"]] = (
            np.frombuffer(raw, dtype=le_dtype, count=n, offset=start)
            .astype(dtype).reshape(shape)
        )

    def pull_stats(prefix_str: str, counts: dict) -> BNStats:
        means, variances = {}, {}
        for name in list(arrays):
            if name.startswith(prefix_str):
                field = name[len(prefix_str):]
                idx = int(field[len("layer"):len("layer") + 2])
                if field.endswith(".running_mean"):
                    means[idx] = arrays.pop(name)
                elif field.endswith(".running_var"):
                    variances[idx] = arrays.pop(name)
        if set(means) != set(variances):
            raise FormatError(f"incomplete statistics under {prefix_str!r}")
        return BNStats(means, variances, {int(k): v for k, v in counts.items()})

    counts = manifest.get("counts", {"base": {}, "branches": {}, "calibrated": {}})
    calibrated = {}
    for key, c in counts.get("calibrated", {}).items():
        sid, res = key.rsplit("@", 1)
        calibrated[(sid, int(res))] = pull_stats(f"calib[{key}].", c)
    branches = {sid: pull_stats(f"stats[{sid}].", c)
                for sid, c in counts.get("branches", {}).items()}
    base = pull_stats("stats.", counts.get("base", {}))

    store = SharedWeightStore(spec, arrays, base, dtype)
    store.branch_stats = branches
    store.calibrated = calibrated
    return store


def export_structure(store: SharedWeightStore, mask: ChannelMask,
                     prefix: str | None = None, resolution: int | None = None,
                     stats: BNStats | None = None):
    """Materialize one structure as a standalone dense network.

    Weight gathering replicates the masked view's index walk exactly, so the
    exported network's logits are bit-identical to the masked shared-weight
    forward. Statistics preference matches evaluation: explicit argument,
    then calibrated (structure, resolution), then BN branch, then base.
    Returns (compact_spec, compact_store); also saved when prefix is given.
    """
    spec = store.spec
    mask.validate(spec)
    sid = mask.structure_id
    stats_source = "explicit"
    if stats is None:
        if resolution is not None and (sid, resolution) in store.calibrated:
            stats, stats_source = store.calibrated[(sid, resolution)], "calibrated"
        elif store.has_bn_branch(sid):
            stats, stats_source = store.branch_stats[sid], "branch"
        else:
            stats, stats_source = store.stats, "base"
    bn_prefix = f"bn[{sid}]." if store.has_bn_branch(sid) else ""

    layers = []
    params: dict[str, np.ndarray] = {}
    means: dict[int, np.ndarray] = {}
    variances: dict[int, np.ndarray] = {}
    cur = np.arange(spec.in_channels)
    for i, layer in enumerate(spec.layers):
        key = f"layer{i:02d}"
        if layer.kind == "conv2d":
            keep = mask.kept_indices(i) if layer.prunable else np.arange(layer.out_channels)
            params[f"{key}.weight"] = np.ascontiguousarray(
                store.params[f"{key}.weight"][np.ix_(keep, cur)])
            params[f"{key}.bias"] = store.params[f"{key}.bias"][keep].copy()
            layers.append(LayerSpec(
                kind="conv2d", out_channels=int(len(keep)), kernel=layer.kernel,
                stride=layer.stride, padding=layer.padding, prunable=layer.prunable,
                residual_group=layer.residual_group))
            cur = keep
        elif layer.kind == "batchnorm":
            params[f"{key}.gamma"] = store.params[bn_prefix + f"{key}.gamma"][cur].copy()
            params[f"{key}.beta"] = store.params[bn_prefix + f"{key}.beta"][cur].copy()
            means[i] = stats.means[i][cur].copy()
            variances[i] = stats.variances[i][cur].copy()
            layers.append(LayerSpec(kind="batchnorm"))
        elif layer.kind == "linear":
            params[f"{key}.weight"] = np.ascontiguousarray(store.params[f"{key}.weight"][:, cur])
            params[f"{key}.bias"] = store.params[f"{key}.bias"].copy()
            layers.append(LayerSpec(kind="linear"))
        else:
            layers.append(LayerSpec(kind=layer.kind))

    compact_spec = ArchSpec(name=f"{spec.name}:{sid}", num_classes=spec.num_classes,
                            in_channels=spec.in_channels, layers=layers)
    compact_store = SharedWeightStore(
        compact_spec, params,
        BNStats(means, variances, {i: 0 for i in means}), store.dtype)
    if prefix is not None:
        save_store(compact_store, prefix, extra={
            "kind": "export",
            "structure_id": sid,
            "pruning_rate": mask.pruning_rate,
            "source_arch_hash": spec.arch_hash(),
            "stats_source": stats_source,
            "resolution": resolution,
        })
    return compact_spec, compact_store


def checkpoint_exists(prefix: str) -> bool:
    return os.path.exists(prefix + ".json") and os.path.exists(prefix + ".bin")
