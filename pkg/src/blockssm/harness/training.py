"""Training loop, evaluation and run bookkeeping."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from .. import systems
from ..objective import AdamW, Bounds, con_fu, con_y, loss_dx, loss_y, total_loss, write_loss_log
from ..linmaps import write_eigen_csv
from ..ssm import BlockSSM, build_model, save_checkpoint
from ..systems import TrajectoryDataset, WindowBatch
from .config import ExperimentConfig

__all__ = ["TrainingDiverged", "RunResult", "OpenLoopResult", "load_system_data", "prepare_data",
           "open_loop_eval", "nstep_mse", "compute_terms", "train", "transition_spectra",
           "write_trace_csv"]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OpenLoopResult:
    mse: float
    per_output: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray | None


@dataclass
class RunResult:
    config: ExperimentConfig
    config_hash: str
    metrics: dict
    loss_curve: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)
    eigenvalues: dict = field(default_factory=dict)
    best_step: int = 0
    wall_time: float = 0.0
    model: BlockSSM | None = None

    def summary(self) -> dict:
        return {
            "name": self.config.name,
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "best_step": self.best_step,
            "wall_time": self.wall_time,
            "metrics": self.metrics,
            "eigenvalues": {k: [[float(z.real), float(z.imag)] for z in v]
                            for k, v in self.eigenvalues.items()},
        }


def load_system_data(config: ExperimentConfig) -> TrajectoryDataset:
    """Generate (or read) the dataset named by ``config.system``/``config.data``."""
    opts = dict(config.data)
    if config.system == "cstr":
        return systems.make_cstr_dataset(**opts)
    if config.system == "twotank":
        return systems.make_twotank_dataset(**opts)
    if config.system == "linear":
        return systems.make_linear_dataset(**opts)[0]
    path = opts.get("path")
    if not path:
        raise ValueError(f"system {config.system!r} needs data.path")
    return systems.load_aero(path) if config.system == "aero" else systems.load_dataset(path)


def prepare_data(config: ExperimentConfig, dataset: TrajectoryDataset):
    splits = systems.split_dataset(dataset, normalize=config.normalize)
    windows = [systems.make_windows(s, config.horizon, config.n_p, config.window_stride)
               for s in splits]
    return splits, windows


def open_loop_eval(model: BlockSSM, split: TrajectoryDataset) -> OpenLoopResult:
    """Simulate the whole split from its first ``n_p`` outputs; MSE per output.

    A simulation that leaves the floating point range scores ``inf``.
    """
    if len(split) <= model.n_p:
        raise ValueError(f"split of length {len(split)} too short for n_p={model.n_p}")
    y_true = split.Y[model.n_p:]
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            y_pred = model.open_loop(split.Y, split.U)
    except dc.NonFiniteError:
        return OpenLoopResult(math.inf, np.full(split.ny, math.inf), y_true, None)
    per = ((y_pred - y_true) ** 2).mean(axis=0)
    return OpenLoopResult(float(per.mean()), per, y_true, y_pred)


def nstep_mse(model: BlockSSM, windows: WindowBatch, chunk: int = 4096) -> float:
    total, count = 0.0, 0
    try:
        with dc.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            for s in range(0, len(windows), chunk):
                w = windows.subset(slice(s, s + chunk))
                r = model.rollout(w.y_histories, w.u_futures)
                err = r.predictions_array() - w.y_futures
                total += float((err ** 2).sum())
                count += err.size
    except dc.NonFiniteError:
        return math.inf
    return total / count


def compute_terms(model: BlockSSM, batch: WindowBatch, bounds: Bounds | None, config: ExperimentConfig):
    """Rollout on ``batch`` and every loss term the configuration uses."""
    r = model.rollout(batch.y_histories, batch.u_futures)
    w = config.weights
    terms = {"L_y": loss_y(r.predictions, batch.y_futures)}
    if w.Q_reg > 0 and model.has_regularized_maps():
        pens = model.reg_penalties()
        reg = pens[0]
        for p in pens[1:]:
            reg = dc.add(reg, p)
        terms["L_reg"] = reg
    if w.Q_dx > 0 and r.horizon >= 2:
        terms["L_dx"] = loss_dx(r.states, r.batch)
    if w.Q_con_y > 0 and bounds is not None:
        terms["L_con_y"] = con_y(r.predictions, bounds)
    if w.Q_con_fu > 0 and bounds is not None and r.fu_contributions is not None:
        terms["L_con_fu"] = con_fu(r.fu_contributions, bounds)
    return total_loss(terms, w)


def transition_spectra(model: BlockSSM) -> dict[str, np.ndarray]:
    """Eigenvalues of each square linear map in the state transition."""
    out = {}
    for name, m in model.transition_maps():
        if m.in_features == m.out_features:
            out[name] = m.eigenvalues()
    return out


def write_trace_csv(path, result: OpenLoopResult) -> None:
    ny = result.y_true.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y_true{j}" for j in range(ny)] + [f"y_pred{j}" for j in range(ny)])
        for t in range(len(result.y_true)):
            pred = result.y_pred[t] if result.y_pred is not None else [math.nan] * ny
            w.writerow([t] + [repr(float(v)) for v in result.y_true[t]] + [repr(float(v)) for v in pred])


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, values):
    for p, v in zip(params, values):
        p.value = v.copy()


def train(config: ExperimentConfig, dataset: TrajectoryDataset | None = None,
          out_dir=None, keep_model: bool = True) -> RunResult:
    """Train per ``config``; select the checkpoint with the best dev open-loop MSE.

    Test metrics are computed once, on the selected checkpoint.  With
    ``out_dir`` the loss log, checkpoint, traces and spectra are written there.
    """
    t0 = time.perf_counter()
    if dataset is None:
        dataset = load_system_data(config)
    (train_split, dev_split, test_split), (train_w, dev_w, test_w) = prepare_data(config, dataset)
    bounds = Bounds.from_data(train_split.Y, config.nx or dataset.ny, config.bounds_margin, config.fu_limit)

    model = build_model(config.ssm_config(dataset.ny, dataset.nu), np.random.default_rng(config.seed))
    params = model.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    batch_rng = np.random.default_rng([config.seed, 1])

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss.jsonl", "w")

    loss_curve, eval_curve = [], []
    best = (open_loop_eval(model, dev_split).mse, 0, _snapshot(params))
    eval_curve.append({"step": 0, "dev_open_loop": best[0]})
    try:
        for step in range(1, config.max_steps + 1):
            if config.batch_size is None or config.batch_size >= len(train_w):
                batch = train_w
            else:
                batch = train_w.subset(batch_rng.choice(len(train_w), config.batch_size, replace=False))
            with dc.Tape() as tape:
                try:
                    report = compute_terms(model, batch, bounds, config)
                except dc.NonFiniteError as err:
                    raise TrainingDiverged(f"step {step}: {err}") from err
            total = report.total.item()
            if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"step {step}: total loss {total:.3g}")
            tape.backward(report.total)
            try:
                opt.step()
            except dc.NonFiniteError as err:
                raise TrainingDiverged(f"step {step}: {err}") from err
            opt.zero_grad()
            model.project()
            values = report.values()
            loss_curve.append({"step": step, **values})
            if log_fh is not None:
                write_loss_log(log_fh, step, values)
            if step % config.eval_every == 0 or step == config.max_steps:
                dev = open_loop_eval(model, dev_split).mse
                eval_curve.append({"step": step, "dev_open_loop": dev})
                if dev < best[0]:
                    best = (dev, step, _snapshot(params))
                log.debug("%s step %d loss %.4g dev open-loop %.4g", config.name, step, total, dev)
    finally:
        if log_fh is not None:
            log_fh.close()

    _restore(params, best[2])
    dev_ol = open_loop_eval(model, dev_split)
    test_ol = open_loop_eval(model, test_split)
    metrics = {
        "dev_nstep": nstep_mse(model, dev_w),
        "test_nstep": nstep_mse(model, test_w),
        "dev_open_loop": dev_ol.mse,
        "test_open_loop": test_ol.mse,
        "test_open_loop_per_output": test_ol.per_output.tolist(),
    }
    result = RunResult(config=config, config_hash=config.config_hash(), metrics=metrics,
                       loss_curve=loss_curve, eval_curve=eval_curve,
                       eigenvalues=transition_spectra(model), best_step=best[1],
                       wall_time=time.perf_counter() - t0, model=model if keep_model else None)
    if out_dir is not None:
        extra = {"normalizer": train_split.normalizer.to_dict() if train_split.normalizer else None,
                 "experiment": config.to_dict()}
        save_checkpoint(model, out_dir / "model", extra=extra)
        (out_dir / "result.json").write_text(json.dumps(result.summary(), indent=2))
        write_trace_csv(out_dir / "trace_dev.csv", dev_ol)
        write_trace_csv(out_dir / "trace_test.csv", test_ol)
        write_eigen_csv(out_dir / "eigenvalues.csv", result.eigenvalues)
    return result
