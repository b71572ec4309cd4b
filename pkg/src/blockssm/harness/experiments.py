"""Ablation studies, hyperparameter grids and spectrum export."""
from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..linmaps import write_eigen_csv
from ..ssm import BlockSSM
from ..systems import TrajectoryDataset
from .config import ABLATIONS, ExperimentConfig, ablate, apply_overrides
from .training import RunResult, load_system_data, train, transition_spectra

__all__ = ["AblationPlan", "AblationResult", "run_ablation", "grid_search", "export_eigenvalues",
           "run_many", "MAX_GRID_CELLS", "worker_count"]

MAX_GRID_CELLS = 24
WORKERS_ENV = "BLOCKSSM_WORKERS"


def worker_count() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _train_summary(args):
    config, dataset = args
    r = train(config, dataset, keep_model=False)
    return r


def run_many(configs: list[ExperimentConfig], dataset: TrajectoryDataset | None = None,
             workers: int | None = None) -> list[RunResult]:
    """Train every config, in worker processes when ``workers`` > 1.

    Configs with identical hashes are trained once and share the result.
    """
    workers = workers or worker_count()
    unique: dict[str, ExperimentConfig] = {}
    for c in configs:
        unique.setdefault(c.config_hash(), c)
    jobs = [(c, dataset if dataset is not None else load_system_data(c)) for c in unique.values()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_summary, jobs))
    else:
        results = [_train_summary(j) for j in jobs]
    by_hash = dict(zip(unique, results))
    return [by_hash[c.config_hash()] for c in configs]


@dataclass
class AblationPlan:
    base: ExperimentConfig
    cells: list[str] = field(default_factory=lambda: list(ABLATIONS))
    seeds: list[int] = field(default_factory=lambda: list(range(10)))

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = ExperimentConfig.from_dict(self.base)
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        if not self.seeds:
            raise ValueError("ablation needs at least one seed per cell")
        unknown = [c for c in self.cells if c not in ABLATIONS]
        if unknown:
            raise ValueError(f"unknown ablation cells {unknown}")

    def configs(self) -> dict[str, list[ExperimentConfig]]:
        return {cell: [ablate(self.base, cell).replace(seed=s) for s in self.seeds]
                for cell in self.cells}

    @classmethod
    def load(cls, path) -> "AblationPlan":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"base": self.base.to_dict(), "cells": list(self.cells), "seeds": list(self.seeds)}


@dataclass
class AblationResult:
    plan: AblationPlan
    runs: dict[str, list[RunResult]]
    metric: str = "test_open_loop"

    def values(self, cell: str) -> np.ndarray:
        return np.array([r.metrics[self.metric] for r in self.runs[cell]])

    def median(self, cell: str) -> float:
        return float(np.median(self.values(cell)))

    def table(self) -> list[dict]:
        rows = []
        for cell in self.plan.cells:
            v = self.values(cell)
            finite = v[np.isfinite(v)]
            q1, q3 = np.percentile(finite, [25, 75]) if finite.size else (math.inf, math.inf)
            rows.append({
                "cell": cell,
                "config_hash": self.runs[cell][0].config_hash,
                "base_hash": self.plan.base.config_hash(),
                "median": float(np.median(v)),
                "q1": float(q1), "q3": float(q3),
                "min": float(v.min()), "max": float(v.max()),
                "values": v.tolist(),
            })
        return rows

    def worst_cell(self) -> str:
        return max(self.plan.cells, key=self.median)


def run_ablation(plan: AblationPlan, dataset: TrajectoryDataset | None = None,
                 workers: int | None = None) -> AblationResult:
    """Train every (cell, seed) pair and collect test open-loop MSE distributions."""
    per_cell = plan.configs()
    flat = [c for cfgs in per_cell.values() for c in cfgs]
    results = iter(run_many(flat, dataset, workers))
    runs = {cell: [next(results) for _ in cfgs] for cell, cfgs in per_cell.items()}
    return AblationResult(plan, runs)


def grid_search(template: ExperimentConfig, grid: dict[str, list], dataset: TrajectoryDataset | None = None,
                out_path=None, workers: int | None = None, max_cells: int = MAX_GRID_CELLS) -> list[RunResult]:
    """Train the cartesian product of ``grid`` overrides; rank by dev open-loop MSE.

    Keys are dotted config paths (``"lr"``, ``"weights.Q_dx"``,
    ``"nonlinear.nodes"``).  Writes a leaderboard JSON to ``out_path``.
    """
    keys = list(grid)
    cells = list(itertools.product(*(grid[k] for k in keys)))
    if len(cells) > max_cells:
        raise ValueError(f"grid has {len(cells)} cells, limit is {max_cells}")
    configs = []
    for i, values in enumerate(cells):
        overrides = dict(zip(keys, values))
        cfg = apply_overrides(template, overrides)
        cfg.name = f"{template.name or 'grid'}/{i}"
        configs.append(cfg)
    results = run_many(configs, dataset, workers)
    order = sorted(range(len(results)), key=lambda i: results[i].metrics["dev_open_loop"])
    ranked = [results[i] for i in order]
    if out_path is not None:
        board = [{"rank": rank, "overrides": dict(zip(keys, cells[i])), **results[i].summary()}
                 for rank, i in enumerate(order)]
        Path(out_path).write_text(json.dumps(board, indent=2, default=float))
    return ranked


def export_eigenvalues(model: BlockSSM, path=None) -> dict[str, np.ndarray]:
    """Spectra of the square linear maps of f_x (or f_xu), keyed ``component.layer``."""
    spectra = transition_spectra(model)
    if path is not None:
        write_eigen_csv(path, spectra)
    return spectra
