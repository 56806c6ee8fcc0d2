"""Joint training of the frozen pool: sandwich-rule structure/resolution
sampling, teacher-to-student distillation chains, shared-weight gradient
accumulation, BN calibration, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, augment_batch, iterate_batches, resize_batch
from .errors import CalibrationMissing, SpecError
from .flops import network_flops
from .graph import ArchSpec, BNStats, ChannelMask, SharedWeightStore, subnetwork_view
from .ops import cross_entropy_loss, kl_distill_loss, softmax
from .optim import SGD, cosine_lr, decay_weights_and_affine
from .search import PrunedNetworkPool

DISTILL_MODES = ("ta_chain", "plain_teacher", "none")
BN_MODES = ("per_structure", "shared", "auto")
PER_STRUCTURE_MAX_POOL = 8


@dataclass
class TrainConfig:
    n_epochs: int = 30
    batch_size: int = 64
    lr: float = 0.5
    lr_schedule: str = "cosine"  # cosine to zero over n_epochs, or "constant"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    distill_mode: str = "ta_chain"
    n_middle: int = 2
    resolutions: tuple = (32, 28, 24, 20)
    bn_mode: str = "auto"
    calibration_batches: int = 8
    seed: int = 0
    # seeded augmentation; keeps the teacher from memorizing small train
    # sets, which would push its probabilities onto the clamp floor and
    # stall the distillation chain
    augment_flip: bool = False
    augment_crop_pad: int = 0

    def __post_init__(self):
        if self.distill_mode not in DISTILL_MODES:
            raise SpecError(f"distill_mode must be one of {DISTILL_MODES}")
        if self.bn_mode not in BN_MODES:
            raise SpecError(f"bn_mode must be one of {BN_MODES}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise SpecError("lr_schedule must be 'cosine' or 'constant'")
        res = tuple(int(r) for r in self.resolutions)
        if len(res) == 0 or len(set(res)) != len(res):
            raise SpecError("resolutions must be non-empty and distinct")
        self.resolutions = tuple(sorted(res, reverse=True))
        if self.n_middle < 0:
            raise SpecError("n_middle must be >= 0")
        if self.augment_crop_pad < 0:
            raise SpecError("augment_crop_pad must be >= 0")


@dataclass
class IterationPlan:
    """Ordered (structure_id, resolution) picks; index 0 is the teacher."""
    picks: list

    def structures(self):
        return [sid for sid, _ in self.picks]

    def resolutions(self):
        return [res for _, res in self.picks]


def sample_iteration_plan(pool: PrunedNetworkPool, config: TrainConfig,
                          rng: np.random.Generator) -> IterationPlan:
    """Sandwich-rule picks for one iteration.

    The teacher is always the lowest-rate structure at the highest
    resolution. With four or more structures, n_middle interior structures
    are drawn uniformly without replacement and sorted by rate; the
    highest-rate structure closes the chain. Non-teacher resolutions are
    drawn uniformly from the resolution set, in chain order, after the
    middle indices (draw order is part of the determinism contract).
    """
    entries = pool.entries
    res_set = config.resolutions
    picks = [(entries[0].structure_id, res_set[0])]
    k = len(entries)
    if k >= 3:
        n_mid = min(config.n_middle, k - 2)
        mids = rng.choice(np.arange(1, k - 1), size=n_mid, replace=False)
        for i in np.sort(mids):
            picks.append((entries[int(i)].structure_id, 0))
    if k >= 2:
        picks.append((entries[-1].structure_id, 0))
    for j in range(1, len(picks)):
        r = res_set[int(rng.integers(0, len(res_set)))]
        picks[j] = (picks[j][0], r)
    return IterationPlan(picks=picks)


@dataclass
class LossTerms:
    structure_id: str
    resolution: int
    ce: float
    kl: float

    @property
    def total(self) -> float:
        return self.ce + self.kl


def training_step(store: SharedWeightStore, pool: PrunedNetworkPool,
                  plan: IterationPlan, x_full, y, opt: SGD,
                  distill_mode: str = "ta_chain", lr: float | None = None):
    """One optimizer step over the plan's picks with accumulated gradients.

    The first pick (teacher) trains on cross-entropy against the labels.
    Under ta_chain each later pick trains on KL (in bits) against the
    previous pick's class distribution; under plain_teacher the reference is
    always the teacher's distribution; under none every pick trains on
    cross-entropy. References are plain arrays, so no gradient ever reaches
    the network that produced them.
    """
    rates = [pool.entry(sid).mask.pruning_rate for sid, _ in plan.picks]
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise SpecError(f"chain must be ordered by pruning rate, got {rates}")
    grads: dict = {}
    terms = []
    teacher_probs = None
    chain_probs = None
    for j, (sid, res) in enumerate(plan.picks):
        mask = pool.entry(sid).mask
        branch = sid if store.has_bn_branch(sid) else None
        view = subnetwork_view(store, mask, bn_branch=branch)
        x = resize_batch(x_full, res).astype(store.dtype, copy=False)
        logits, steps = view.forward(x, mode="train", need_cache=True)
        ce, kl = 0.0, 0.0
        if j == 0 or distill_mode == "none":
            ce, dlogits = cross_entropy_loss(logits, y)
        else:
            ref = teacher_probs if distill_mode == "plain_teacher" else chain_probs
            kl, dlogits = kl_distill_loss(softmax(logits), ref)
        view.backward(dlogits, steps, grads)
        probs = softmax(logits)
        if j == 0:
            teacher_probs = probs
        chain_probs = probs
        terms.append(LossTerms(structure_id=sid, resolution=res, ce=ce, kl=kl))
    opt.step(store.params, grads, lr=lr)
    return terms


def calibrate_bn(store: SharedWeightStore, spec: ArchSpec, mask: ChannelMask,
                 resolution: int, data: Dataset, batch_size: int = 64,
                 n_batches: int = 8, seed: int = 0) -> BNStats:
    """Recompute BN statistics for one (structure, resolution) pair.

    Runs forward passes in accumulate mode over a seeded slice of the data,
    producing equal-weight averages of per-batch moments in fresh stat
    buffers. The result is stored under store.calibrated[(structure_id,
    resolution)] and wins over branch or base stats at evaluation time.
    """
    if n_batches < 1:
        raise SpecError("calibration needs at least one batch")
    stats = BNStats.fresh(spec, store.dtype)
    branch = mask.structure_id if store.has_bn_branch(mask.structure_id) else None
    view = subnetwork_view(store, mask, bn_branch=branch)
    done = 0
    for x, _ in iterate_batches(data, batch_size, seed=seed, epoch=0):
        x = resize_batch(x, resolution).astype(store.dtype, copy=False)
        view.forward(x, mode="accumulate", stats=stats)
        done += 1
        if done >= n_batches:
            break
    store.calibrated[(mask.structure_id, resolution)] = stats
    return stats


@dataclass
class EvalResult:
    structure_id: str
    resolution: int
    accuracy: float
    loss: float
    n: int
    flops: int
    stats_source: str  # calibrated | branch | base


def evaluate(store: SharedWeightStore, spec: ArchSpec, mask: ChannelMask,
             resolution: int, data: Dataset, batch_size: int = 256,
             stats: BNStats | None = None,
             require_calibrated: bool = False) -> EvalResult:
    """Accuracy and mean cross-entropy at a fixed structure and resolution.

    Statistics preference: an explicit stats argument, then calibrated
    stats for (structure, resolution), then the structure's BN branch, then
    the store's base stats. With require_calibrated (the shared-BN
    contract), missing calibration raises CalibrationMissing instead of
    silently using polluted shared stats.
    """
    sid = mask.structure_id
    source = "explicit"
    if stats is None:
        if (sid, resolution) in store.calibrated:
            stats, source = store.calibrated[(sid, resolution)], "calibrated"
        elif store.has_bn_branch(sid):
            stats, source = store.branch_stats[sid], "branch"
        elif require_calibrated:
            raise CalibrationMissing(
                f"no calibrated BN statistics for structure {sid!r} at "
                f"resolution {resolution}; run calibration first"
            )
        else:
            stats, source = store.stats, "base"
    branch = sid if store.has_bn_branch(sid) else None
    view = subnetwork_view(store, mask, bn_branch=branch)
    correct, total, loss_sum = 0, 0, 0.0
    for x, labels in iterate_batches(data, batch_size):
        x = resize_batch(x, resolution).astype(store.dtype, copy=False)
        logits = view.forward(x, mode="eval", stats=stats)
        loss, _ = cross_entropy_loss(logits, labels)
        loss_sum += loss * labels.size
        correct += int((logits.argmax(axis=1) == labels).sum())
        total += labels.size
    return EvalResult(structure_id=sid, resolution=resolution,
                      accuracy=correct / total, loss=loss_sum / total, n=total,
                      flops=network_flops(spec, mask, resolution).total,
                      stats_source=source)


TRAIN_CSV_HEADER = ("epoch,iteration,structure_id,resolution,"
                    "loss_T,loss_TA1,loss_TA2,loss_S,lr")


def _loss_columns(terms) -> list:
    """Map chain terms to the T/TA1/TA2/S columns; absent picks stay empty."""
    cols = ["", "", "", ""]
    if len(terms) == 1:
        slots = [0]
    elif len(terms) == 2:
        slots = [0, 3]
    elif len(terms) == 3:
        slots = [0, 1, 3]
    else:
        slots = [0, 1, 2, 3]
    for slot, t in zip(slots, terms[:4]):
        cols[slot] = f"{t.total:.8f}"
    return cols


@dataclass
class TrainResult:
    csv_rows: list                      # formatted strings incl. header
    epoch_loss: list                    # mean total loss per epoch
    bn_mode: str
    iterations: int = 0
    final_lr: float = 0.0
    history: list = field(default_factory=list)  # per-epoch dicts

    def csv_text(self) -> str:
        return "\n".join(self.csv_rows) + "\n"


def resolve_bn_mode(config_mode: str, pool_size: int) -> str:
    if config_mode != "auto":
        return config_mode
    return "per_structure" if pool_size <= PER_STRUCTURE_MAX_POOL else "shared"


def train_joint(spec: ArchSpec, pool: PrunedNetworkPool, store: SharedWeightStore,
                config: TrainConfig, train_data: Dataset,
                csv_path: str | None = None) -> TrainResult:
    """Once-for-all joint training of every structure in the pool.

    Per iteration: sample a sandwich plan, run the distillation chain, take
    one SGD step on the accumulated gradients. Under per-structure BN each
    structure gets its own affine parameters and running statistics
    (branches are created here on first use); under shared BN everything
    reuses the base buffers and evaluation requires calibration. Each
    iteration appends one CSV row, so reruns with the same config and data
    are byte-identical.
    """
    if any(res > train_data.resolution for res in config.resolutions):
        raise SpecError("resolution set exceeds the dataset's base resolution")
    for e in pool.entries:
        for res_key, want in e.verified_flops.items():
            got = network_flops(spec, e.mask, int(res_key)).total
            if got != want:
                raise SpecError(
                    f"stored flops for {e.structure_id} at {res_key} ({want}) "
                    f"do not match the architecture ({got})"
                )
    bn_mode = resolve_bn_mode(config.bn_mode, len(pool))
    if bn_mode == "per_structure":
        for e in pool.entries:
            if not store.has_bn_branch(e.structure_id):
                store.create_bn_branch(e.structure_id)
    opt = SGD(lr=config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay,
              decay_filter=decay_weights_and_affine)

    rows = [TRAIN_CSV_HEADER]
    epoch_loss = []
    history = []
    it_global = 0
    lr = config.lr
    for epoch in range(1, config.n_epochs + 1):
        lr = (cosine_lr(config.lr, epoch, config.n_epochs)
              if config.lr_schedule == "cosine" else config.lr)
        rng = np.random.default_rng([config.seed, 0x7EA2, epoch])
        total, count = 0.0, 0
        for it, (x, y) in enumerate(
                iterate_batches(train_data, config.batch_size,
                                seed=config.seed, epoch=epoch)):
            if config.augment_flip or config.augment_crop_pad:
                x = augment_batch(x, rng, flip=config.augment_flip,
                                  crop_pad=config.augment_crop_pad)
            plan = sample_iteration_plan(pool, config, rng)
            terms = training_step(store, pool, plan, x, y, opt,
                                  distill_mode=config.distill_mode, lr=lr)
            loss_total = sum(t.total for t in terms)
            rows.append(
                f"{epoch},{it},"
                f"{'|'.join(plan.structures())},"
                f"{'|'.join(str(r) for r in plan.resolutions())},"
                f"{','.join(_loss_columns(terms))},{lr:.8f}"
            )
            total += loss_total
            count += 1
            it_global += 1
        epoch_loss.append(total / max(count, 1))
        history.append({"epoch": epoch, "lr": lr, "mean_total": epoch_loss[-1]})
    result = TrainResult(csv_rows=rows, epoch_loss=epoch_loss, bn_mode=bn_mode,
                         iterations=it_global, final_lr=lr, history=history)
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(result.csv_text())
    return result


def calibrate_pool(store: SharedWeightStore, spec: ArchSpec,
                   pool: PrunedNetworkPool, data: Dataset, resolutions,
                   batch_size: int = 64, n_batches: int = 8, seed: int = 0):
    """Calibrate every (structure, resolution) pair in one sweep."""
    for e in pool.entries:
        for res in resolutions:
            calibrate_bn(store, spec, e.mask, res, data, batch_size=batch_size,
                         n_batches=n_batches, seed=seed)


def evaluate_pool(store: SharedWeightStore, spec: ArchSpec,
                  pool: PrunedNetworkPool, data: Dataset, resolutions,
                  batch_size: int = 256, require_calibrated: bool = False):
    """EvalResult for every (structure, resolution) pair."""
    out = []
    for e in pool.entries:
        for res in resolutions:
            out.append(evaluate(store, spec, e.mask, res, data,
                                batch_size=batch_size,
                                require_calibrated=require_calibrated))
    return out
