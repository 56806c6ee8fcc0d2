"""Per-layer FLOPs accounting and per-device budget solving.

Walks the stock four-block architecture at two input resolutions, prints
the per-layer cost table, demonstrates the resolution-quartering property
for stride-1 convolutions, and solves the smallest pruning rate meeting
each device cap on the 0.01 grid.
"""
import numpy as np

from prunepool.flops import network_flops, solve_budgets, solve_pruning_rate
from prunepool.graph import ChannelMask
from prunepool.presets import desk_arch, desk_budgets


def main():
    spec = desk_arch()
    full = ChannelMask.full(spec)

    print("=== per-layer FLOPs, full width ===")
    for res in (32, 20):
        report = network_flops(spec, full, res)
        print(f"\ninput {res}x{res}: total {report.total:,} FLOPs "
              f"({report.total // 2:,} MACs)")
        for entry in report.entries:
            print(f"  layer {entry.layer_index:2d} {entry.kind:<13s} "
                  f"{entry.flops:>12,}")

    # Stride-1 same-pad convs scale with H*W, so halving the input
    # resolution divides their cost by exactly 4. The stock network
    # downsamples with strided convs, so only the first block shows it.
    r32 = network_flops(spec, full, 32).entries[0].flops
    r16 = network_flops(spec, full, 16).entries[0].flops
    print(f"\nfirst conv at 32px: {r32:,}; at 16px: {r16:,}; "
          f"ratio {r32 // r16}")

    print("\n=== budget solving ===")
    print("device       res  cap_mflops  rho   achieved_mflops  feasible")
    for sol in solve_budgets(spec, desk_budgets()):
        print(f"{sol.device:<12s} {sol.resolution:>3d}  {sol.cap_mflops:>10.2f}"
              f"  {sol.rho:.2f}  {sol.achieved_flops / 1e6:>15.3f}  "
              f"{sol.feasible}")

    # The solver is tight: one grid step less pruning breaks the cap.
    budget = desk_budgets()[1]
    sol = solve_pruning_rate(spec, budget, 24)
    looser = ChannelMask.uniform(spec, sol.rho - 0.01)
    print(f"\n{budget.device}@24 solved rho={sol.rho:.2f}; "
          f"rho={sol.rho - 0.01:.2f} would cost "
          f"{network_flops(spec, looser, 24).total / 1e6:.3f} MFLOPs "
          f"(cap {budget.cap_mflops})")


if __name__ == "__main__":
    main()
