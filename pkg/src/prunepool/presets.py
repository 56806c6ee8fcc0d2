"""Canned architectures, device budgets, and run configurations."""

from __future__ import annotations

from .errors import SpecError
from .flops import DeviceBudget
from .graph import ArchSpec, LayerSpec
from .search import SearchConfig
from .train import TrainConfig


def desk_arch(num_classes: int = 8) -> ArchSpec:
    """Four conv blocks (24/32/48/64, strides 1/2/2/2), GAP, linear head.

    The first three blocks are prunable (104 channels); the final conv is
    exempt because it feeds the head directly, so its scale factors absorb
    the logit magnitude and dominate any global ranking. The exempt layer is
    also the cheapest: the three prunable blocks carry about 87% of the
    FLOPs at full resolution. Small enough that a full budget, search,
    train, calibrate, evaluate cycle runs on a CPU in minutes.
    """
    def block(out, stride, prunable=True):
        return [
            LayerSpec(kind="conv2d", out_channels=out, kernel=3, stride=stride,
                      padding=1, prunable=prunable),
            LayerSpec(kind="batchnorm"),
            LayerSpec(kind="relu"),
        ]

    layers = (block(24, 1) + block(32, 2) + block(48, 2)
              + block(64, 2, prunable=False)
              + [LayerSpec(kind="globalavgpool"), LayerSpec(kind="linear")])
    return ArchSpec(name="desk4", num_classes=num_classes, in_channels=3,
                    layers=layers)


def desk_budgets():
    """Two synthetic deployment targets bracketing the desk network's cost."""
    return [
        DeviceBudget(device="edge-large", cap_mflops=5.5, resolutions=(32, 28)),
        DeviceBudget(device="edge-small", cap_mflops=3.0, resolutions=(24, 20)),
    ]


# Reference search/train rates are scaled by 0.2 for the desk benchmark
# (batch 128 on 4k images vs the large-batch ImageNet-100 recipe): lr_s
# 0.5 -> 0.1 and the small-lr ablation arm 0.1 -> 0.02.
DESK_LR_FACTOR = 0.2


def desk_search_config(seed: int = 0, **overrides) -> SearchConfig:
    base = dict(
        pruning_rates=(0.3, 0.5, 0.7, 0.8),
        n_epochs=15,
        tau=0.9,
        s_consec=2,
        metric="cosine",
        lam=2e-3,
        lr=0.5 * DESK_LR_FACTOR,
        momentum=0.9,
        weight_decay=0.0,
        batch_size=128,
        resolution=32,
        seed=seed,
        gamma_init=0.5,
    )
    base.update(overrides)
    return SearchConfig(**base)


def desk_train_config(seed: int = 0, **overrides) -> TrainConfig:
    # momentum 0.5: the distillation chain self-amplifies under heavier
    # momentum until every student saturates; see train.training_step
    base = dict(
        n_epochs=20,
        batch_size=64,
        lr=0.1,
        lr_schedule="cosine",
        momentum=0.5,
        weight_decay=5e-3,
        distill_mode="ta_chain",
        n_middle=2,
        resolutions=(32, 28, 24, 20),
        bn_mode="auto",
        calibration_batches=8,
        seed=seed,
        augment_flip=False,
        augment_crop_pad=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


def single_network_rates(rho: float, band: float = 0.05):
    """Rate band for deploying one target rate: {rho - band, rho, rho + band}."""
    if not (0.0 < rho < 1.0):
        raise SpecError(f"target rate must be in (0, 1), got {rho}")
    rates = sorted({max(0.0, round(rho - band, 2)), round(rho, 2),
                    min(0.99, round(rho + band, 2))})
    return tuple(rates)


PRESET_NAMES = ("paper-desk", "single-network")


def preset_run_config(name: str, seed: int = 0, target_rate: float = 0.5) -> dict:
    """JSON-ready run configuration for a named preset."""
    if name == "paper-desk":
        rates = (0.3, 0.5, 0.7, 0.8)
    elif name == "single-network":
        rates = single_network_rates(target_rate)
    else:
        raise SpecError(f"unknown preset {name!r}; options: {PRESET_NAMES}")
    search = desk_search_config(seed=seed, pruning_rates=rates)
    train = desk_train_config(seed=seed)
    return {
        "name": name,
        "seed": seed,
        "precision": "f32",
        "arch": desk_arch().to_json_dict(),
        "dataset": {"kind": "synthetic", "n_per_class": 500, "classes": 8,
                    "base_resolution": 32, "sigma": 0.6, "max_shift": 10,
                    "contrast": 0.30},
        "budgets": [
            {"device": b.device, "cap_mflops": b.cap_mflops,
             "resolutions": list(b.resolutions)}
            for b in desk_budgets()
        ],
        "search": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(search).items()},
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in vars(train).items()},
        "calibration": {"batches": 8, "batch_size": 64},
        "eval_batch_size": 256,
    }
