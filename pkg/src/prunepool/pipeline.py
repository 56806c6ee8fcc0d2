"""Staged orchestration: budget -> search -> train -> calibrate -> eval ->
export -> report, with JSON run configs and resumable, deterministic
artifacts under one output directory."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .checkpoint import checkpoint_exists, export_structure, load_store, save_store
from .data import Dataset, load_cifar10, synthetic_dataset
from .errors import FormatError, SpecError
from .flops import DeviceBudget, network_flops, solve_budgets
from .graph import ArchSpec, ChannelMask, SharedWeightStore
from .presets import preset_run_config
from .search import PrunedNetworkPool, SearchConfig, run_search
from .train import TrainConfig, calibrate_pool, evaluate, evaluate_pool, train_joint

STAGES = ("budget", "search", "train", "calibrate", "eval", "export", "report")

ARTIFACTS = {
    "config": "config.json",
    "budget": "budgets.json",
    "budget_csv": "budget.csv",
    "pool": "pool.json",
    "similarity": "search_similarity.csv",
    "search_store": "search_store",
    "trained_store": "trained_store",
    "final_store": "final_store",
    "train_log": "train_log.csv",
    "eval": "eval.csv",
    "export_dir": "export",
    "report": "report.csv",
    "summary": "summary.json",
}


@dataclass
class RunConfig:
    name: str
    seed: int
    arch: ArchSpec
    dataset: dict
    budgets: list
    search: SearchConfig
    train: TrainConfig
    precision: str = "f32"
    calibration_batches: int = 8
    calibration_batch_size: int = 64
    eval_batch_size: int = 256

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunConfig":
        try:
            search_d = dict(d["search"])
            train_d = dict(d["train"])
            search_d["pruning_rates"] = tuple(search_d.get("pruning_rates", ()))
            train_d["resolutions"] = tuple(train_d.get("resolutions", ()))
            calib = d.get("calibration", {})
            return cls(
                name=d["name"],
                seed=int(d["seed"]),
                arch=ArchSpec.from_json_dict(d["arch"]),
                dataset=dict(d["dataset"]),
                budgets=[DeviceBudget(device=b["device"],
                                      cap_mflops=float(b["cap_mflops"]),
                                      resolutions=[int(r) for r in b["resolutions"]])
                         for b in d.get("budgets", [])],
                search=SearchConfig(**search_d),
                train=TrainConfig(**train_d),
                precision=d.get("precision", "f32"),
                calibration_batches=int(calib.get("batches", 8)),
                calibration_batch_size=int(calib.get("batch_size", 64)),
                eval_batch_size=int(d.get("eval_batch_size", 256)),
            )
        except KeyError as e:
            raise FormatError(f"run config missing field {e}") from None

    def to_json_dict(self) -> dict:
        to_plain = lambda cfg: {k: (list(v) if isinstance(v, tuple) else v)
                                for k, v in vars(cfg).items()}
        return {
            "name": self.name,
            "seed": self.seed,
            "precision": self.precision,
            "arch": self.arch.to_json_dict(),
            "dataset": self.dataset,
            "budgets": [{"device": b.device, "cap_mflops": b.cap_mflops,
                         "resolutions": list(b.resolutions)} for b in self.budgets],
            "search": to_plain(self.search),
            "train": to_plain(self.train),
            "calibration": {"batches": self.calibration_batches,
                            "batch_size": self.calibration_batch_size},
            "eval_batch_size": self.eval_batch_size,
        }

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))

    @classmethod
    def from_preset(cls, preset: str, seed: int = 0, **kwargs) -> "RunConfig":
        return cls.from_json_dict(preset_run_config(preset, seed=seed, **kwargs))


def load_datasets(config: RunConfig):
    """(train, test) datasets per the config's dataset block."""
    ds = dict(config.dataset)
    kind = ds.pop("kind", "synthetic")
    if kind == "synthetic":
        ds.setdefault("seed", config.seed)
        return synthetic_dataset(**ds)
    if kind == "cifar10":
        return load_cifar10(ds["directory"])
    raise SpecError(f"unknown dataset kind {kind!r}")


@dataclass
class Pipeline:
    """Filesystem-backed run state; every stage is idempotent for a fixed
    config, so interrupted runs resume by rerunning missing stages."""

    config: RunConfig
    outdir: str
    _data: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        os.makedirs(self.outdir, exist_ok=True)
        os.makedirs(self.path("export_dir"), exist_ok=True)
        with open(self.path("config"), "w", encoding="utf-8") as f:
            json.dump(self.config.to_json_dict(), f, indent=1, sort_keys=True)

    def path(self, key: str) -> str:
        return os.path.join(self.outdir, ARTIFACTS[key])

    def datasets(self):
        if self._data is None:
            self._data = load_datasets(self.config)
        return self._data

    def pool(self) -> PrunedNetworkPool:
        return PrunedNetworkPool.load(self.path("pool"))

    # -- stages ---------------------------------------------------------

    def stage_budget(self):
        """Solve per-device pruning rates; writes budgets.json and budget.csv.

        Cost is reported in both conventions: `flops` per the 2-per-MAC
        formula and `flops_half` (MACs).
        """
        solutions = solve_budgets(self.config.arch, self.config.budgets)
        payload = {
            "arch_hash": self.config.arch.arch_hash(),
            "full_flops": {
                str(res): network_flops(self.config.arch,
                                        ChannelMask.full(self.config.arch), res).total
                for b in self.config.budgets for res in b.resolutions
            },
            "solutions": [vars(s) for s in solutions],
        }
        with open(self.path("budget"), "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
        lines = ["device,resolution,cap_mflops,rho,achieved_flops,"
                 "achieved_flops_half,feasible"]
        for s in solutions:
            lines.append(f"{s.device},{s.resolution},{s.cap_mflops},{s.rho:.2f},"
                         f"{s.achieved_flops},{s.achieved_flops // 2},"
                         f"{str(s.feasible).lower()}")
        with open(self.path("budget_csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return solutions

    def stage_search(self):
        """Sparsity training + mask freezing; writes pool.json and the
        similarity trace, and checkpoints the searched weights."""
        train_data, _ = self.datasets()
        store = SharedWeightStore.build(
            self.config.arch, seed=self.config.search.seed,
            precision=self.config.precision,
            gamma_init=self.config.search.gamma_init)
        pool, store, trace = run_search(
            self.config.arch, self.config.search, train_data, store=store,
            verify_resolutions=self.config.train.resolutions)
        pool.save(self.path("pool"))
        save_store(store, self.path("search_store"))
        with open(self.path("similarity"), "w", encoding="utf-8", newline="\n") as f:
            f.write(trace.similarity_csv())
        return pool

    def stage_train(self):
        """Joint sandwich training starting from the searched weights."""
        train_data, _ = self.datasets()
        pool = self.pool()
        store = load_store(self.path("search_store"))
        result = train_joint(self.config.arch, pool, store, self.config.train,
                             train_data, csv_path=self.path("train_log"))
        save_store(store, self.path("trained_store"))
        return result

    def stage_calibrate(self):
        """Recompute BN statistics per (structure, resolution) pair."""
        train_data, _ = self.datasets()
        pool = self.pool()
        store = load_store(self.path("trained_store"))
        calibrate_pool(store, self.config.arch, pool, train_data,
                       self.config.train.resolutions,
                       batch_size=self.config.calibration_batch_size,
                       n_batches=self.config.calibration_batches,
                       seed=self.config.seed)
        save_store(store, self.path("final_store"))

    def stage_eval(self):
        """Accuracy/loss/FLOPs for every structure at every resolution."""
        _, test_data = self.datasets()
        pool = self.pool()
        prefix = ("final_store" if checkpoint_exists(self.path("final_store"))
                  else "trained_store")
        store = load_store(self.path(prefix))
        results = evaluate_pool(store, self.config.arch, pool, test_data,
                                self.config.train.resolutions,
                                batch_size=self.config.eval_batch_size)
        lines = ["structure_id,resolution,flops,flops_half,top1,loss,stats_source"]
        for r in results:
            lines.append(f"{r.structure_id},{r.resolution},{r.flops},{r.flops // 2},"
                         f"{r.accuracy:.6f},{r.loss:.8f},{r.stats_source}")
        with open(self.path("eval"), "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return results

    def stage_export(self, structure_id: str | None = None,
                     resolution: int | None = None):
        """Standalone dense checkpoints, one per pool structure."""
        pool = self.pool()
        prefix = ("final_store" if checkpoint_exists(self.path("final_store"))
                  else "trained_store")
        store = load_store(self.path(prefix))
        exported = []
        for e in pool.entries:
            if structure_id is not None and e.structure_id != structure_id:
                continue
            res = resolution if resolution is not None else self.config.train.resolutions[0]
            out = os.path.join(self.path("export_dir"), e.structure_id)
            export_structure(store, e.mask, prefix=out, resolution=res)
            exported.append(out)
        if not exported:
            raise SpecError(f"no pool structure named {structure_id!r}")
        return exported

    def stage_report(self):
        """Merge budgets, pool metadata, and evaluation into report.csv."""
        with open(self.path("budget"), "r", encoding="utf-8") as f:
            budget = json.load(f)
        pool = self.pool()
        if not os.path.exists(self.path("eval")):
            raise SpecError("eval stage must run before report")
        with open(self.path("eval"), "r", encoding="utf-8") as f:
            eval_lines = f.read().strip().split("\n")[1:]
        eval_rows = [line.split(",") for line in eval_lines]

        caps = {}
        for s in budget["solutions"]:
            caps[(s["device"], s["resolution"])] = s["cap_mflops"]
        freeze = {e.structure_id: e.freeze_epoch for e in pool.entries}
        rates = {e.structure_id: e.mask.pruning_rate for e in pool.entries}

        lines = ["structure_id,pruning_rate,freeze_epoch,resolution,flops,"
                 "flops_half,top1,loss,devices_within_cap"]
        for sid, res, flops, flops_half, top1, loss, _src in eval_rows:
            res_i, flops_i = int(res), int(flops)
            fits = sorted(dev for (dev, r), cap in caps.items()
                          if r == res_i and flops_i <= cap * 1e6)
            lines.append(f"{sid},{rates[sid]:.2f},{freeze[sid]},{res},{flops},"
                         f"{flops_half},{top1},{loss},{'|'.join(fits)}")
        with open(self.path("report"), "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")

        summary = {
            "name": self.config.name,
            "seed": self.config.seed,
            "arch_hash": self.config.arch.arch_hash(),
            "pool": {e.structure_id: {"pruning_rate": e.mask.pruning_rate,
                                      "freeze_epoch": e.freeze_epoch}
                     for e in pool.entries},
            "search_epochs": pool.search_epochs,
        }
        with open(self.path("summary"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=1, sort_keys=True)
        return summary

    # -- driver -----------------------------------------------------------

    def stage_done(self, stage: str) -> bool:
        probes = {
            "budget": [self.path("budget"), self.path("budget_csv")],
            "search": [self.path("pool"), self.path("search_store") + ".json"],
            "train": [self.path("trained_store") + ".json", self.path("train_log")],
            "calibrate": [self.path("final_store") + ".json"],
            "eval": [self.path("eval")],
            "export": [os.path.join(self.path("export_dir"), sid + ".json")
                       for sid in self._pool_ids()] or [self.path("pool")],
            "report": [self.path("report"), self.path("summary")],
        }
        return all(os.path.exists(p) for p in probes[stage])

    def _pool_ids(self):
        if not os.path.exists(self.path("pool")):
            return []
        return self.pool().structure_ids()

    def run(self, stages=STAGES, resume: bool = False):
        """Run stages in order; with resume, skip ones whose outputs exist."""
        order = {s: i for i, s in enumerate(STAGES)}
        for s in stages:
            if s not in order:
                raise SpecError(f"unknown stage {s!r}; stages: {STAGES}")
        ran = []
        for stage in sorted(stages, key=order.get):
            if resume and self.stage_done(stage):
                continue
            getattr(self, f"stage_{stage}")()
            ran.append(stage)
        return ran


def run_pipeline(config: RunConfig, outdir: str, stages=STAGES, resume: bool = False):
    pipe = Pipeline(config=config, outdir=outdir)
    ran = pipe.run(stages=stages, resume=resume)
    return pipe, ran
