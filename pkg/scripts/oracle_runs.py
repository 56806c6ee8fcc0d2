"""Oracle runs that pin the desk-benchmark regression fixtures.

Produces /tmp/oracle_results.json with, per seed:
  - search similarity histories, first-crossing epochs, freeze epochs
  - ta_chain / plain_teacher / small-lr-search accuracy tables
Run once, inspect, then freeze the numbers into the acceptance tests.
"""
import json
import time

import numpy as np

from prunepool.checkpoint import load_store, save_store
from prunepool.data import synthetic_dataset
from prunepool.presets import desk_arch, desk_search_config, desk_train_config
from prunepool.search import run_search
from prunepool.train import calibrate_pool, evaluate_pool, train_joint


def crossing_epochs(trace, tau=0.9):
    out = {}
    for sid, hist in trace.similarity.items():
        cross = None
        for i, v in enumerate(hist):
            if v > tau:
                cross = i + 2  # history index 0 compares epochs 1 and 2
                break
        out[sid] = cross
    return out


def acc_table(spec, pool, store, tcfg, train, test):
    calibrate_pool(store, spec, pool, train, tcfg.resolutions,
                   n_batches=tcfg.calibration_batches, seed=tcfg.seed)
    table = {}
    for r in evaluate_pool(store, spec, pool, test, tcfg.resolutions):
        table[f"{r.structure_id}@{r.resolution}"] = round(r.accuracy, 4)
    return table


def main():
    spec = desk_arch()
    results = {}
    for seed in (0, 1, 2):
        t_seed = time.time()
        train, test = synthetic_dataset(seed=seed, n_per_class=500)
        entry = {}

        scfg = desk_search_config(seed=seed)
        t0 = time.time()
        pool, store, trace = run_search(spec, scfg, train,
                                        verify_resolutions=(32, 28, 24, 20))
        entry["search_seconds"] = round(time.time() - t0, 1)
        entry["similarity"] = {k: [round(v, 6) for v in h]
                               for k, h in trace.similarity.items()}
        entry["crossing_epochs"] = crossing_epochs(trace)
        entry["freeze_epochs"] = trace.freeze_epochs
        entry["keep_counts"] = {
            e.structure_id: {str(li): int(e.mask.keep[li].sum())
                             for li in sorted(e.mask.keep)}
            for e in pool.entries
        }
        save_store(store, f"/tmp/oracle_search_{seed}")

        tcfg = desk_train_config(seed=seed)
        t0 = time.time()
        train_joint(spec, pool, store, tcfg, train)
        entry["train_seconds"] = round(time.time() - t0, 1)
        entry["acc_ta_chain"] = acc_table(spec, pool, store, tcfg, train, test)

        store_p = load_store(f"/tmp/oracle_search_{seed}")
        if isinstance(store_p, tuple):
            store_p = store_p[0]
        pcfg = desk_train_config(seed=seed, distill_mode="plain_teacher")
        train_joint(spec, pool, store_p, pcfg, train)
        entry["acc_plain_teacher"] = acc_table(spec, pool, store_p, pcfg, train, test)

        s_small = desk_search_config(seed=seed, lr=0.1 * 0.2)
        pool_s, store_s, trace_s = run_search(
            spec, s_small, train, verify_resolutions=(32, 28, 24, 20))
        entry["freeze_epochs_small_lr"] = trace_s.freeze_epochs
        tcfg_s = desk_train_config(seed=seed)
        train_joint(spec, pool_s, store_s, tcfg_s, train)
        entry["acc_small_lr"] = acc_table(spec, pool_s, store_s, tcfg_s, train, test)

        entry["seed_seconds"] = round(time.time() - t_seed, 1)
        results[str(seed)] = entry
        print(f"seed {seed} done in {entry['seed_seconds']}s", flush=True)

    with open("/tmp/oracle_results.json", "w", encoding="utf-8") as f:
        json.dump(results, f, indent=1, sort_keys=True)
    print("wrote /tmp/oracle_results.json")


if __name__ == "__main__":
    main()
