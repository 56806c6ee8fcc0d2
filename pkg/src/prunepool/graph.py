"""Declarative architecture specs, the shared full-width weight store, and
masked sub-network views.

Every sub-network is a view over one SharedWeightStore: channels are selected
by absolute index, forward passes compute on the gathered compact tensors,
and backward passes scatter gradients into full-width accumulators keyed by
parameter name. Pruned channels therefore contribute nothing and receive
exactly zero gradient.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeMismatch, SpecError
from .ops import assert_finite

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "globalavgpool", "linear")


@dataclass
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    prunable: bool = False
    residual_group: int | None = None

    def to_json_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(
                out_channels=self.out_channels,
                kernel=self.kernel,
                stride=self.stride,
                padding=self.padding,
                prunable=self.prunable,
            )
            if self.residual_group is not None:
                d["residual_group"] = self.residual_group
        return d


@dataclass
class ArchSpec:
    """Ordered layer list ending in a resolution-agnostic GAP + linear head."""

    name: str
    num_classes: int
    in_channels: int
    layers: list[LayerSpec]

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise SpecError("need at least 2 classes")
        if len(self.layers) < 2:
            raise SpecError("architecture too short")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise SpecError(f"unknown layer kind {layer.kind!r}")
        if self.layers[-2].kind != "globalavgpool" or self.layers[-1].kind != "linear":
            raise SpecError("last two layers must be globalavgpool then linear")
        if sum(1 for l in self.layers if l.kind == "linear") != 1:
            raise SpecError("exactly one linear head is supported")
        group_widths: dict[int, int] = {}
        channels = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                if layer.kernel < 1:
                    raise SpecError(f"layer {i}: kernel must be >= 1")
                if layer.out_channels < 1:
                    raise SpecError(f"layer {i}: out_channels must be >= 1")
                if layer.prunable and not (
                    i + 1 < len(self.layers) and self.layers[i + 1].kind == "batchnorm"
                ):
                    raise SpecError(
                        f"layer {i}: prunable conv must be followed by batchnorm "
                        "(its scale factors rank the channels)"
                    )
                if layer.residual_group is not None:
                    prev = group_widths.setdefault(layer.residual_group, layer.out_channels)
                    if prev != layer.out_channels:
                        raise SpecError(
                            f"residual group {layer.residual_group}: unequal widths "
                            f"{prev} vs {layer.out_channels}"
                        )
                channels = layer.out_channels
            elif layer.kind in ("batchnorm", "relu", "globalavgpool"):
                if channels < 1:
                    raise SpecError(f"layer {i}: no channels defined yet")
            elif layer.kind == "linear":
                if i != len(self.layers) - 1:
                    raise SpecError("linear must be the final layer")

    # -- channel bookkeeping -------------------------------------------------

    def channels_into(self, index: int) -> int:
        """Channel count flowing into layer `index` (full width, no mask)."""
        channels = self.in_channels
        for layer in self.layers[:index]:
            if layer.kind == "conv2d":
                channels = layer.out_channels
        return channels

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    def prunable_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d" and l.prunable]

    def bn_for_conv(self, conv_index: int) -> int:
        nxt = conv_index + 1
        if nxt >= len(self.layers) or self.layers[nxt].kind != "batchnorm":
            raise SpecError(f"conv layer {conv_index} has no trailing batchnorm")
        return nxt

    def mask_groups(self):
        """Maskable units: one per standalone prunable conv, one per residual group.

        Returns [(group_key, [layer indices], width)] ordered by first member;
        group_key is the first member's layer index.
        """
        by_group: dict[int, list[int]] = {}
        solo = []
        for i in self.prunable_indices():
            g = self.layers[i].residual_group
            if g is None:
                solo.append((i, [i]))
            else:
                by_group.setdefault(g, []).append(i)
        units = solo + [(members[0], members) for members in by_group.values()]
        units.sort(key=lambda u: u[0])
        return [(key, members, self.layers[key].out_channels) for key, members in units]

    def total_prunable_channels(self) -> int:
        return sum(width for _, _, width in self.mask_groups())

    # -- serialization --------------------------------------------------------

    def to_json_dict(self):
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "layers": [l.to_json_dict() for l in self.layers],
        }

    @classmethod
    def from_json_dict(cls, d) -> "ArchSpec":
        layers = []
        for ld in d["layers"]:
            layers.append(
                LayerSpec(
                    kind=ld["kind"],
                    out_channels=ld.get("out_channels", 0),
                    kernel=ld.get("kernel", 3),
                    stride=ld.get("stride", 1),
                    padding=ld.get("padding", 0),
                    prunable=ld.get("prunable", False),
                    residual_group=ld.get("residual_group"),
                )
            )
        return cls(
            name=d["name"],
            num_classes=d["num_classes"],
            in_channels=d["in_channels"],
            layers=layers,
        )

    def arch_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# masks


def bits_to_hex(bits) -> str:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes().hex()


def hex_to_bits(hexstr: str, width: int):
    raw = np.frombuffer(bytes.fromhex(hexstr), dtype=np.uint8)
    bits = np.unpackbits(raw)
    if bits.size < width:
        raise SpecError(f"hex mask too short for width {width}")
    return bits[:width].astype(bool)


@dataclass
class ChannelMask:
    """Per-prunable-layer keep vectors (True = keep) defining one structure.

    Layers in the same residual group carry identical vectors. `protections`
    records channels the extraction walk skipped to keep every layer at
    >= 1 channel, as (layer_index, channel_index) pairs.
    """

    keep: dict[int, np.ndarray]
    pruning_rate: float
    structure_id: str
    protections: list = field(default_factory=list)

    @classmethod
    def full(cls, spec: ArchSpec, structure_id: str = "full") -> "ChannelMask":
        keep = {}
        for _, members, width in spec.mask_groups():
            bits = np.ones(width, dtype=bool)
            for m in members:
                keep[m] = bits
        return cls(keep=keep, pruning_rate=0.0, structure_id=structure_id)

    @classmethod
    def uniform(cls, spec: ArchSpec, rho: float, structure_id: str = "uniform") -> "ChannelMask":
        """Keep the first ceil((1-rho)*C) channels of every maskable unit."""
        keep = {}
        for _, members, width in spec.mask_groups():
            kept = max(1, int(np.ceil((1.0 - rho) * width)))
            bits = np.zeros(width, dtype=bool)
            bits[:kept] = True
            for m in members:
                keep[m] = bits
        return cls(keep=keep, pruning_rate=rho, structure_id=structure_id)

    def validate(self, spec: ArchSpec):
        for key, members, width in spec.mask_groups():
            ref = None
            for m in members:
                if m not in self.keep:
                    raise SpecError(f"mask missing prunable layer {m}")
                bits = self.keep[m]
                if bits.size != width:
                    raise SpecError(f"mask width {bits.size} != layer {m} width {width}")
                if not bits.any():
                    raise SpecError(f"layer {m} left with zero channels")
                if ref is None:
                    ref = bits
                elif not np.array_equal(ref, bits):
                    raise SpecError(f"residual group of layer {key} has diverging masks")

    def realized_rate(self, spec: ArchSpec) -> float:
        total = pruned = 0
        for key, _, width in spec.mask_groups():
            total += width
            pruned += width - int(self.keep[key].sum())
        return pruned / total if total else 0.0

    def kept_indices(self, layer_index: int):
        return np.flatnonzero(self.keep[layer_index])

    def to_json_dict(self):
        seen = {}
        for i in sorted(self.keep):
            seen[str(i)] = {"width": int(self.keep[i].size), "hex": bits_to_hex(self.keep[i])}
        return {
            "structure_id": self.structure_id,
            "pruning_rate": self.pruning_rate,
            "masks": seen,
            "protections": [list(map(int, p)) for p in self.protections],
        }

    @classmethod
    def from_json_dict(cls, d) -> "ChannelMask":
        keep = {
            int(i): hex_to_bits(m["hex"], m["width"]) for i, m in d["masks"].items()
        }
        return cls(
            keep=keep,
            pruning_rate=float(d["pruning_rate"]),
            structure_id=d["structure_id"],
            protections=[tuple(p) for p in d.get("protections", [])],
        )


# ---------------------------------------------------------------------------
# shared weights


class BNStats:
    """Full-width running statistics for every batchnorm layer."""

    def __init__(self, means, variances, counts=None):
        self.means: dict[int, np.ndarray] = means
        self.variances: dict[int, np.ndarray] = variances
        self.counts: dict[int, int] = counts if counts is not None else {i: 0 for i in means}

    @classmethod
    def fresh(cls, spec: ArchSpec, dtype) -> "BNStats":
        means, variances = {}, {}
        for i, layer in enumerate(spec.layers):
            if layer.kind == "batchnorm":
                c = spec.channels_into(i)
                means[i] = np.zeros(c, dtype=dtype)
                variances[i] = np.ones(c, dtype=dtype)
        return cls(means, variances)

    def clone(self) -> "BNStats":
        return BNStats(
            {i: m.copy() for i, m in self.means.items()},
            {i: v.copy() for i, v in self.variances.items()},
            dict(self.counts),
        )


class SharedWeightStore:
    """The single full-width parameter set every sub-network reads and writes.

    params holds trainable arrays keyed "layerNN.field"; per-structure
    batchnorm branches add keys "bn[<structure_id>].layerNN.field". Running
    stats live in BNStats objects (base, per-branch, and frozen calibration
    entries keyed by (structure_id, resolution)).
    """

    def __init__(self, spec: ArchSpec, params, stats: BNStats, dtype):
        self.spec = spec
        self.params: dict[str, np.ndarray] = params
        self.stats = stats
        self.dtype = dtype
        self.branch_stats: dict[str, BNStats] = {}
        self.calibrated: dict[tuple[str, int], BNStats] = {}

    @classmethod
    def build(cls, spec: ArchSpec, seed: int, precision: str = "f32",
              gamma_init: float = 0.5) -> "SharedWeightStore":
        """He-uniform conv/linear init, gamma_init/0 batchnorm affine; deterministic per seed."""
        dtype = ops.DTYPES[precision]
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        channels = spec.in_channels
        for i, layer in enumerate(spec.layers):
            key = f"layer{i:02d}"
            if layer.kind == "conv2d":
                fan_in = channels * layer.kernel * layer.kernel
                bound = np.sqrt(6.0 / fan_in)
                shape = (layer.out_channels, channels, layer.kernel, layer.kernel)
                params[f"{key}.weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
                params[f"{key}.bias"] = np.zeros(layer.out_channels, dtype=dtype)
                channels = layer.out_channels
            elif layer.kind == "batchnorm":
                params[f"{key}.gamma"] = np.full(channels, gamma_init, dtype=dtype)
                params[f"{key}.beta"] = np.zeros(channels, dtype=dtype)
            elif layer.kind == "linear":
                bound = np.sqrt(6.0 / channels)
                params[f"{key}.weight"] = rng.uniform(
                    -bound, bound, (spec.num_classes, channels)
                ).astype(dtype)
                params[f"{key}.bias"] = np.zeros(spec.num_classes, dtype=dtype)
        return cls(spec, params, BNStats.fresh(spec, dtype), dtype)

    def param_count(self) -> int:
        """Trainable parameters in the base model (branches excluded)."""
        return sum(a.size for name, a in self.params.items() if not name.startswith("bn["))

    def create_bn_branch(self, structure_id: str):
        """Clone base batchnorm affine + stats for one structure (switchable-BN style)."""
        prefix = f"bn[{structure_id}]."
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "batchnorm":
                for fld in ("gamma", "beta"):
                    src = f"layer{i:02d}.{fld}"
                    self.params[prefix + src] = self.params[src].copy()
        self.branch_stats[structure_id] = self.stats.clone()

    def has_bn_branch(self, structure_id: str) -> bool:
        return structure_id in self.branch_stats

    def gamma_vectors(self):
        """|gamma| per maskable unit, averaged over residual-group members."""
        scores = {}
        for key, members, _ in self.spec.mask_groups():
            gammas = [
                np.abs(self.params[f"layer{self.spec.bn_for_conv(m):02d}.gamma"])
                for m in members
            ]
            scores[key] = np.mean(gammas, axis=0)
        return scores


def build_network(spec: ArchSpec, seed: int, precision: str = "f32",
                  gamma_init: float = 0.5) -> SharedWeightStore:
    return SharedWeightStore.build(spec, seed, precision, gamma_init)


# ---------------------------------------------------------------------------
# sub-network views


class SubnetView:
    """Forward/backward over the kept channels of one structure.

    Weights are gathered from the store by absolute channel index (never
    copied back), so two views sharing channels read identical parameters.
    Gradients scatter-accumulate into full-width arrays keyed by store
    parameter name.
    """

    def __init__(self, store: SharedWeightStore, mask: ChannelMask,
                 bn_branch: str | None = None):
        mask.validate(store.spec)
        self.store = store
        self.mask = mask
        self.bn_prefix = f"bn[{bn_branch}]." if bn_branch is not None else ""
        if bn_branch is not None and not store.has_bn_branch(bn_branch):
            raise SpecError(f"batchnorm branch {bn_branch!r} was never created")
        self._bn_branch = bn_branch

    def kept_out(self, conv_index: int):
        layer = self.store.spec.layers[conv_index]
        if layer.prunable:
            return self.mask.kept_indices(conv_index)
        return np.arange(layer.out_channels)

    def default_stats(self) -> BNStats:
        if self._bn_branch is not None:
            return self.store.branch_stats[self._bn_branch]
        return self.store.stats

    def forward(self, x, mode: str = "eval", stats: BNStats | None = None,
                need_cache: bool = False):
        """Run the masked network; returns logits or (logits, cache).

        mode/stats follow ops.batchnorm_forward: train and accumulate modes
        update `stats` in place (at kept channel indices only).
        """
        spec = self.store.spec
        params = self.store.params
        if x.shape[1] != spec.in_channels:
            raise ShapeMismatch(f"batch has {x.shape[1]} channels, spec wants {spec.in_channels}")
        if stats is None:
            stats = self.default_stats()
        assert_finite(x, "input batch")
        cur = np.arange(spec.in_channels)
        snapshots: dict[int, np.ndarray] = {}
        steps = []
        h = x
        for i, layer in enumerate(spec.layers):
            key = f"layer{i:02d}"
            if layer.kind == "conv2d":
                keep = self.kept_out(i)
                w = params[f"{key}.weight"]
                w_sub = np.ascontiguousarray(w[np.ix_(keep, cur)])
                b_sub = params[f"{key}.bias"][keep]
                h, cache = ops.conv2d_forward(h, w_sub, b_sub, layer.stride, layer.padding)
                added = False
                g = layer.residual_group
                if g is not None:
                    prev = snapshots.get(g)
                    if prev is not None:
                        if prev.shape != h.shape:
                            raise ShapeMismatch(
                                f"residual group {g}: spatial mismatch {prev.shape} vs {h.shape}"
                            )
                        h = h + prev
                        added = True
                    snapshots[g] = h
                steps.append(("conv2d", i, cache, (keep, cur, added, g)))
                cur = keep
            elif layer.kind == "batchnorm":
                gamma = params[self.bn_prefix + f"{key}.gamma"][cur]
                beta = params[self.bn_prefix + f"{key}.beta"][cur]
                h, cache, new = ops.batchnorm_forward(
                    h, gamma, beta, mode,
                    running_mean=stats.means[i][cur],
                    running_var=stats.variances[i][cur],
                    accum_count=stats.counts.get(i, 0),
                )
                if new is not None:
                    stats.means[i][cur] = new[0]
                    stats.variances[i][cur] = new[1]
                    stats.counts[i] = new[2]
                steps.append(("batchnorm", i, cache, cur))
            elif layer.kind == "relu":
                h, cache = ops.relu_forward(h)
                steps.append(("relu", i, cache, None))
            elif layer.kind == "globalavgpool":
                h, cache = ops.global_avg_pool_forward(h)
                steps.append(("globalavgpool", i, cache, None))
            elif layer.kind == "linear":
                w_sub = np.ascontiguousarray(params[f"{key}.weight"][:, cur])
                h, cache = ops.linear_forward(h, w_sub, params[f"{key}.bias"])
                steps.append(("linear", i, cache, cur))
            assert_finite(h, f"layer {i} ({layer.kind}) output")
        if need_cache:
            return h, steps
        return h

    def backward(self, dlogits, steps, grads: dict[str, np.ndarray]):
        """Backpropagate and scatter-accumulate parameter gradients into `grads`."""
        params = self.store.params
        d = dlogits
        pending: dict[int, np.ndarray] = {}
        for kind, i, cache, extra in reversed(steps):
            key = f"layer{i:02d}"
            if kind == "linear":
                cur = extra
                d, dw_sub, db = ops.linear_backward(d, cache)
                self._acc(grads, f"{key}.weight", (slice(None), cur), dw_sub)
                self._acc(grads, f"{key}.bias", slice(None), db)
            elif kind == "globalavgpool":
                d = ops.global_avg_pool_backward(d, cache)
            elif kind == "relu":
                d = ops.relu_backward(d, cache)
            elif kind == "batchnorm":
                cur = extra
                d, dgamma, dbeta = ops.batchnorm_backward(d, cache)
                self._acc(grads, self.bn_prefix + f"{key}.gamma", cur, dgamma)
                self._acc(grads, self.bn_prefix + f"{key}.beta", cur, dbeta)
            elif kind == "conv2d":
                keep, cur, added, g = extra
                if g is not None and g in pending:
                    d = d + pending.pop(g)
                if added:
                    pending[g] = d
                d, dw_sub, db_sub = ops.conv2d_backward(d, cache)
                self._acc(grads, f"{key}.weight", np.ix_(keep, cur), dw_sub)
                self._acc(grads, f"{key}.bias", keep, db_sub)
            assert_finite(d, f"gradient into layer {i}")
        return d

    def _acc(self, grads, name, index, value):
        if name not in grads:
            grads[name] = np.zeros_like(self.store.params[name])
        grads[name][index] += value


def subnetwork_view(store: SharedWeightStore, mask: ChannelMask,
                    bn_branch: str | None = None) -> SubnetView:
    return SubnetView(store, mask, bn_branch)
