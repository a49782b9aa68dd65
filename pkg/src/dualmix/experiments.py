"""Paired framework / vanilla-self-training / source-only runs for one seed."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

from .config import RunConfig
from .selftrain import (ModelScore, RoundReport, prepare_data, run_framework,
                        run_vanilla_self_training, train_source_only)


@dataclass
class SeedResult:
    seed: int
    source_only: ModelScore
    framework: list[RoundReport]
    vanilla: list[RoundReport]
    seconds: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "source_only": dataclasses.asdict(self.source_only),
            "framework": [r.to_dict() for r in self.framework],
            "vanilla": [r.to_dict() for r in self.vanilla],
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SeedResult":
        return cls(d["seed"], ModelScore(**d["source_only"]),
                   [RoundReport.from_dict(r) for r in d["framework"]],
                   [RoundReport.from_dict(r) for r in d["vanilla"]], d["seconds"])


def run_seed(config: RunConfig, seed: int) -> SeedResult:
    """Framework for ``config.rounds`` rounds, vanilla self-training sharing its round one,
    and a source-only model, all on the data drawn for ``seed``."""
    cfg = dataclasses.replace(config, seed=seed)
    start = time.perf_counter()
    data = prepare_data(cfg)
    _, source_only = train_source_only(cfg, data)
    fw = run_framework(cfg, data)
    vanilla = run_vanilla_self_training(cfg, data, first_round=fw.outcomes[0])
    return SeedResult(seed, source_only, fw.reports, vanilla.reports, time.perf_counter() - start)


def run_seeds_parallel(config: RunConfig, seeds, workers: int | None = None) -> list[SeedResult]:
    """Seeds are independent runs; use a process pool when more than one core is available."""
    import os
    from concurrent.futures import ProcessPoolExecutor

    seeds = list(seeds)
    workers = min(len(seeds), workers or os.cpu_count() or 1)
    if workers <= 1:
        return [run_seed(config, s) for s in seeds]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(run_seed, [config] * len(seeds), seeds))
