"""Per-layer FLOPs accounting under channel masks and input resolution, and
solving the pruning rate that satisfies a per-device MFLOPs cap.

Conv cost follows 2*K^2*W*H*C_in*C_out (one multiply-accumulate = 2 FLOPs);
linear costs 2*C_in*C_out; batchnorm/relu/pool are counted as zero. Reports
and the CLI expose both this convention ("flops") and its half ("flops/2")
since published budgets are often multiply-accumulate counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ShapeMismatch
from .graph import ArchSpec, ChannelMask, LayerSpec
from .ops import conv_output_hw

RATE_GRID_STEP = 0.01


@dataclass
class FlopsEntry:
    layer_index: int
    kind: str
    kernel: int
    h_out: int
    w_out: int
    c_in_kept: int
    c_out_kept: int
    flops: int


@dataclass
class FlopsReport:
    entries: list[FlopsEntry] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(e.flops for e in self.entries)


@dataclass
class DeviceBudget:
    device: str
    cap_mflops: float
    resolutions: list[int]


@dataclass
class BudgetSolution:
    device: str
    resolution: int
    cap_mflops: float
    rho: float
    achieved_flops: int
    feasible: bool


def layer_flops(layer: LayerSpec, c_in_kept: int, c_out_kept: int, input_hw):
    """FLOPs of one layer plus its output spatial size.

    Conv/linear require kept counts >= 1; the spatial arithmetic raises when
    the output would collapse to a non-positive size.
    """
    h, w = input_hw
    if layer.kind == "conv2d":
        if c_in_kept < 1 or c_out_kept < 1:
            raise ShapeMismatch("conv needs at least one kept channel on both sides")
        ho, wo = conv_output_hw(h, w, layer.kernel, layer.stride, layer.padding)
        return 2 * layer.kernel ** 2 * ho * wo * c_in_kept * c_out_kept, (ho, wo)
    if layer.kind == "linear":
        if c_in_kept < 1 or c_out_kept < 1:
            raise ShapeMismatch("linear needs at least one kept feature on both sides")
        return 2 * c_in_kept * c_out_kept, (1, 1)
    if layer.kind == "globalavgpool":
        return 0, (1, 1)
    return 0, (h, w)  # batchnorm / relu


def network_flops(spec: ArchSpec, mask: ChannelMask, resolution: int) -> FlopsReport:
    """Sum layer_flops over the network, propagating spatial size and kept counts."""
    mask.validate(spec)
    report = FlopsReport()
    hw = (resolution, resolution)
    c_in = spec.in_channels
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            c_out = int(mask.keep[i].sum()) if layer.prunable else layer.out_channels
        elif layer.kind == "linear":
            c_out = spec.num_classes
        else:
            c_out = c_in
        flops, hw = layer_flops(layer, c_in, c_out, hw)
        report.entries.append(
            FlopsEntry(
                layer_index=i,
                kind=layer.kind,
                kernel=layer.kernel if layer.kind == "conv2d" else 0,
                h_out=hw[0],
                w_out=hw[1],
                c_in_kept=c_in,
                c_out_kept=c_out,
                flops=flops,
            )
        )
        c_in = c_out
    return report


def solve_pruning_rate(spec: ArchSpec, budget: DeviceBudget, resolution: int) -> BudgetSolution:
    """Smallest rate on the 0.01 grid whose uniform pruning meets the cap.

    Uniform pruning keeps ceil((1-rho)*C) channels per maskable unit; the
    result is a rough rate (the searched mask may deviate, so trained
    structures get their FLOPs re-verified against the cap later). Infeasible
    caps return feasible=False carrying the minimum achievable FLOPs.
    """
    cap_flops = budget.cap_mflops * 1e6
    total = None
    for i in range(100):
        rho = i * RATE_GRID_STEP
        total = network_flops(spec, ChannelMask.uniform(spec, rho), resolution).total
        if total <= cap_flops:
            return BudgetSolution(
                device=budget.device,
                resolution=resolution,
                cap_mflops=budget.cap_mflops,
                rho=round(rho, 2),
                achieved_flops=total,
                feasible=True,
            )
    return BudgetSolution(
        device=budget.device,
        resolution=resolution,
        cap_mflops=budget.cap_mflops,
        rho=0.99,
        achieved_flops=total,
        feasible=False,
    )


def solve_budgets(spec: ArchSpec, budgets: list[DeviceBudget]) -> list[BudgetSolution]:
    """One solution per (device, resolution), devices ordered by cap descending."""
    solutions = []
    for budget in sorted(budgets, key=lambda b: -b.cap_mflops):
        for res in budget.resolutions:
            solutions.append(solve_pruning_rate(spec, budget, res))
    return solutions
