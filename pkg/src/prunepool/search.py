"""Structure search: L1-pushed scale factors, global-rank channel masks,
epoch-to-epoch mask similarity, and the frozen pruned-network pool."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import iterate_batches, resize_batch
from .errors import FormatError, NonFiniteError, SpecError
from .flops import network_flops
from .graph import ArchSpec, BNStats, ChannelMask, SharedWeightStore, subnetwork_view
from .ops import cross_entropy_loss
from .optim import SGD

PNP_FORMAT_VERSION = 1
SIMILARITY_METRICS = ("cosine", "eq3_literal", "dice")


@dataclass
class SearchConfig:
    pruning_rates: tuple = (0.3, 0.5, 0.7, 0.8)
    n_epochs: int = 15
    tau: float = 0.9
    s_consec: int = 2
    metric: str = "cosine"
    lam: float = 1e-4  # L1 pressure on BN scale factors
    lr: float = 0.1  # constant through the search stage
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    resolution: int = 32
    seed: int = 0
    gamma_init: float = 0.5

    def __post_init__(self):
        rates = tuple(float(r) for r in self.pruning_rates)
        if len(rates) == 0:
            raise SpecError("need at least one pruning rate")
        if any(not (0.0 <= r < 1.0) for r in rates):
            raise SpecError(f"pruning rates must lie in [0, 1): {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise SpecError(f"pruning rates must be strictly increasing: {rates}")
        self.pruning_rates = rates
        if not (0.0 < self.tau <= 1.0) and self.tau != 0.0:
            raise SpecError(f"tau must be in [0, 1], got {self.tau}")
        if self.s_consec < 1:
            raise SpecError("s_consec must be >= 1")
        if self.metric not in SIMILARITY_METRICS:
            raise SpecError(f"metric must be one of {SIMILARITY_METRICS}")
        if self.lam < 0:
            raise SpecError("lam must be >= 0")


def sparsity_penalty(store: SharedWeightStore, spec: ArchSpec, lam: float):
    """L1 penalty over prunable BN scale factors.

    Returns (value, grads) where grads maps gamma parameter names to
    lam * sign(gamma). Exact zeros get subgradient 0.
    """
    value = 0.0
    grads = {}
    for conv_i in spec.prunable_indices():
        bn_i = spec.bn_for_conv(conv_i)
        name = f"layer{bn_i:02d}.gamma"
        g = store.params[name]
        value += float(np.abs(g).sum())
        grads[name] = lam * np.sign(g)
    return lam * value, grads


def extract_mask(spec: ArchSpec, store: SharedWeightStore, pruning_rate: float,
                 structure_id: str = "") -> ChannelMask:
    """Build a channel mask by pruning the globally lowest-|gamma| channels.

    Scores are ranked ascending across every prunable group with
    (score, group, channel) tie-breaking; the walk prunes until
    floor(rate * total) channels are gone, skipping any group already down
    to one channel (those skips are recorded as protections). Because the
    walk order never depends on the rate, masks at increasing rates nest.
    """
    groups = spec.mask_groups()
    scores = store.gamma_vectors()
    order = []
    for key, _, width in groups:
        s = scores[key]
        for c in range(width):
            order.append((float(s[c]), key, c))
    order.sort()
    total = sum(width for _, _, width in groups)
    target = int(np.floor(pruning_rate * total))

    keep_counts = {key: width for key, _, width in groups}
    drop = {key: np.zeros(width, dtype=bool) for key, _, width in groups}
    protections = []
    pruned = 0
    for _, key, c in order:
        if pruned >= target:
            break
        if keep_counts[key] <= 1:
            protections.append((key, c))
            continue
        drop[key][c] = True
        keep_counts[key] -= 1
        pruned += 1

    keep = {}
    for key, members, _ in groups:
        kept = ~drop[key]
        for m in members:
            keep[m] = kept.copy()
    mask = ChannelMask(keep=keep, pruning_rate=float(pruning_rate),
                       structure_id=structure_id or f"rho{pruning_rate:.2f}",
                       protections=protections)
    mask.validate(spec)
    return mask


def _flatten_mask(spec: ArchSpec, mask: ChannelMask):
    parts = [mask.keep[i].astype(np.float64) for i in spec.prunable_indices()]
    return np.concatenate(parts)


def mask_similarity(spec: ArchSpec, a: ChannelMask, b: ChannelMask,
                    metric: str = "cosine") -> float:
    """Similarity of two masks over the flattened prunable-channel bits.

    cosine      : sum(ab) / sqrt(sum(a) * sum(b))
    eq3_literal : sum(ab) / (sum(a^2) + sum(b^2))   (0.5 for identical masks)
    dice        : 2 sum(ab) / (sum(a^2) + sum(b^2))
    """
    va, vb = _flatten_mask(spec, a), _flatten_mask(spec, b)
    if va.shape != vb.shape:
        raise SpecError("masks cover different channel sets")
    if va.sum() == 0 or vb.sum() == 0:
        warnings.warn("mask similarity against an all-zero mask is defined as 0")
        return 0.0
    dot = float(va @ vb)
    if metric == "cosine":
        return dot / float(np.sqrt(va.sum() * vb.sum()))
    if metric in ("eq3_literal", "dice"):
        denom = float((va ** 2).sum() + (vb ** 2).sum())
        return (2.0 * dot if metric == "dice" else dot) / denom
    raise SpecError(f"unknown similarity metric {metric!r}")


@dataclass
class PNPEntry:
    structure_id: str
    mask: ChannelMask
    freeze_epoch: int
    similarity_history: list = field(default_factory=list)
    verified_flops: dict = field(default_factory=dict)  # str(resolution) -> flops


@dataclass
class PrunedNetworkPool:
    arch: ArchSpec
    entries: list  # sorted by pruning rate ascending
    metric: str
    tau: float
    s_consec: int
    search_epochs: int = 0

    def __post_init__(self):
        rates = [e.mask.pruning_rate for e in self.entries]
        if rates != sorted(rates):
            raise SpecError("pool entries must be sorted by pruning rate")

    def __len__(self):
        return len(self.entries)

    def structure_ids(self):
        return [e.structure_id for e in self.entries]

    def entry(self, structure_id: str) -> PNPEntry:
        for e in self.entries:
            if e.structure_id == structure_id:
                return e
        raise KeyError(structure_id)

    @property
    def min_rate_entry(self) -> PNPEntry:
        return self.entries[0]

    @property
    def max_rate_entry(self) -> PNPEntry:
        return self.entries[-1]

    def to_json_dict(self):
        return {
            "format_version": PNP_FORMAT_VERSION,
            "arch": self.arch.to_json_dict(),
            "arch_hash": self.arch.arch_hash(),
            "metric": self.metric,
            "tau": self.tau,
            "s_consec": self.s_consec,
            "search_epochs": self.search_epochs,
            "entries": [
                {
                    "structure_id": e.structure_id,
                    "mask": e.mask.to_json_dict(),
                    "freeze_epoch": e.freeze_epoch,
                    "similarity_history": [round(float(s), 10) for s in e.similarity_history],
                    "verified_flops": e.verified_flops,
                }
                for e in self.entries
            ],
        }

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def from_json_dict(cls, d: dict) -> "PrunedNetworkPool":
        if d.get("format_version") != PNP_FORMAT_VERSION:
            raise FormatError(f"unsupported pool format {d.get('format_version')!r}")
        arch = ArchSpec.from_json_dict(d["arch"])
        if d.get("arch_hash") and d["arch_hash"] != arch.arch_hash():
            raise FormatError("pool arch_hash does not match embedded architecture")
        entries = [
            PNPEntry(
                structure_id=e["structure_id"],
                mask=ChannelMask.from_json_dict(e["mask"]),
                freeze_epoch=int(e["freeze_epoch"]),
                similarity_history=[float(s) for s in e.get("similarity_history", [])],
                verified_flops={k: int(v) for k, v in e.get("verified_flops", {}).items()},
            )
            for e in d["entries"]
        ]
        for e in entries:
            e.mask.validate(arch)
        return cls(arch=arch, entries=entries, metric=d["metric"], tau=float(d["tau"]),
                   s_consec=int(d["s_consec"]), search_epochs=int(d.get("search_epochs", 0)))

    @classmethod
    def load(cls, path: str) -> "PrunedNetworkPool":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class SearchTrace:
    epoch_losses: list
    similarity: dict      # structure_id -> [sim(e, e-1), ...] starting at epoch 2
    freeze_epochs: dict   # structure_id -> epoch or None
    mask_history: dict    # structure_id -> [ChannelMask per epoch]

    def similarity_csv(self) -> str:
        sids = sorted(self.similarity)
        lines = ["epoch," + ",".join(sids)]
        n = max((len(v) for v in self.similarity.values()), default=0)
        for row in range(n):
            cells = [str(row + 2)]
            for sid in sids:
                h = self.similarity[sid]
                cells.append(f"{h[row]:.10f}" if row < len(h) else "")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def run_search(spec: ArchSpec, config: SearchConfig, train_data,
               store: SharedWeightStore | None = None, verify_resolutions=()):
    """Train with L1-pushed scale factors and freeze masks as they stabilize.

    After every epoch a candidate mask is extracted per pruning rate; once a
    rate's similarity to its previous epoch's mask exceeds tau for s_consec
    consecutive comparisons, that structure freezes with the mask from the
    detecting epoch. Search stops when every rate is frozen or the epoch budget
    runs out (remaining rates freeze at the final epoch with a warning).

    Returns (pool, store, trace).
    """
    if store is None:
        store = SharedWeightStore.build(spec, seed=config.seed, gamma_init=config.gamma_init)
    opt = SGD(lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    full_view = subnetwork_view(store, ChannelMask.full(spec))

    rate_ids = {r: f"rho{r:.2f}" for r in config.pruning_rates}
    prev_mask = {}
    streak = {r: 0 for r in config.pruning_rates}
    frozen: dict = {}
    sim_hist = {rate_ids[r]: [] for r in config.pruning_rates}
    mask_hist = {rate_ids[r]: [] for r in config.pruning_rates}
    epoch_losses = []
    epochs_ran = 0

    for epoch in range(1, config.n_epochs + 1):
        total_loss, n_batches = 0.0, 0
        for x, y in iterate_batches(train_data, config.batch_size,
                                    seed=config.seed, epoch=epoch):
            try:
                x = resize_batch(x, config.resolution).astype(store.dtype, copy=False)
                logits, steps = full_view.forward(x, mode="train", need_cache=True)
                loss, dlogits = cross_entropy_loss(logits, y)
                grads: dict = {}
                full_view.backward(dlogits, steps, grads)
                pen, pen_grads = sparsity_penalty(store, spec, config.lam)
                for name, g in pen_grads.items():
                    grads[name] = grads.get(name, 0.0) + g
                opt.step(store.params, grads)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"search diverged at epoch {epoch} batch {n_batches}: {e}; "
                    f"lr={config.lr} lam={config.lam}"
                ) from e
            total_loss += loss + pen
            n_batches += 1
        epoch_losses.append(total_loss / max(n_batches, 1))
        epochs_ran = epoch

        all_frozen = True
        for rate in config.pruning_rates:
            sid = rate_ids[rate]
            if rate in frozen:
                continue
            mask = extract_mask(spec, store, rate, structure_id=sid)
            mask_hist[sid].append(mask)
            if rate in prev_mask:
                sim = mask_similarity(spec, prev_mask[rate], mask, config.metric)
                sim_hist[sid].append(sim)
                if sim > config.tau:
                    streak[rate] += 1
                else:
                    streak[rate] = 0
                if streak[rate] >= config.s_consec:
                    frozen[rate] = (epoch, mask)
            prev_mask[rate] = mask
            if rate not in frozen:
                all_frozen = False
        if all_frozen:
            break

    for rate in config.pruning_rates:
        if rate not in frozen:
            warnings.warn(
                f"rate {rate}: mask did not stabilize within {config.n_epochs} epochs; "
                "freezing the final-epoch mask"
            )
            frozen[rate] = (epochs_ran, prev_mask[rate])

    entries = []
    for rate in config.pruning_rates:
        sid = rate_ids[rate]
        freeze_epoch, mask = frozen[rate]
        verified = {
            str(res): network_flops(spec, mask, res).total for res in verify_resolutions
        }
        entries.append(PNPEntry(structure_id=sid, mask=mask, freeze_epoch=freeze_epoch,
                                similarity_history=sim_hist[sid], verified_flops=verified))
    pool = PrunedNetworkPool(arch=spec, entries=entries, metric=config.metric,
                             tau=config.tau, s_consec=config.s_consec,
                             search_epochs=epochs_ran)
    trace = SearchTrace(
        epoch_losses=epoch_losses,
        similarity=sim_hist,
        freeze_epochs={rate_ids[r]: frozen[r][0] for r in config.pruning_rates},
        mask_history=mask_hist,
    )
    return pool, store, trace
