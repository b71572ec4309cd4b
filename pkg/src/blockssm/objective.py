"""Loss terms, constraint penalties and the AdamW optimizer."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor

__all__ = [
    "Bounds", "LossWeights", "LossReport", "loss_y", "con_y", "con_fu", "slack_penalty",
    "loss_dx", "total_loss", "AdamW", "write_loss_log",
]

TERMS = ("L_y", "L_reg", "L_dx", "L_con_y", "L_con_fu")


@dataclass
class Bounds:
    """Box constraints on predicted outputs and on input contributions f_u(u)."""

    y_lower: np.ndarray
    y_upper: np.ndarray
    fu_lower: np.ndarray
    fu_upper: np.ndarray

    def __post_init__(self):
        for name in ("y_lower", "y_upper", "fu_lower", "fu_upper"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.y_lower >= self.y_upper) or np.any(self.fu_lower >= self.fu_upper):
            raise ValueError("lower bounds must be strictly below upper bounds")

    @classmethod
    def from_data(cls, Y: np.ndarray, nx: int, margin: float = 0.05, fu_limit: float = 1.0) -> "Bounds":
        """Per-channel range of ``Y`` widened by ``margin`` of its span; f_u in +-fu_limit."""
        lo, hi = Y.min(axis=0), Y.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return cls(lo - margin * span, hi + margin * span,
                   -fu_limit * np.ones(nx), fu_limit * np.ones(nx))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("y_lower", "y_upper", "fu_lower", "fu_upper")}


@dataclass
class LossWeights:
    Q_y: float = 1.0
    Q_reg: float = 0.0
    Q_dx: float = 0.0
    Q_con_y: float = 0.0
    Q_con_fu: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative, got {v}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    """Per-term losses (tensors, so they stay differentiable) and their weighted sum."""

    terms: dict[str, Tensor]
    total: Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def values(self) -> dict[str, float]:
        out = {k: (self.terms[k].item() if k in self.terms else 0.0) for k in TERMS}
        out["total"] = self.total.item()
        return out


def _check_pair(pred: Tensor, target) -> np.ndarray:
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=float)
    if target.ndim == 3:
        n, N, k = target.shape
        target = target.transpose(1, 0, 2).reshape(N * n, k)
    if target.shape != pred.shape:
        raise dc.ShapeError(f"predictions {pred.shape} vs targets {target.shape}")
    return target


def loss_y(predictions, targets) -> Tensor:
    """Mean squared error over batch, horizon and output channels.

    ``targets`` may be a time-major matrix matching ``predictions`` or an
    (n, N, ny) array.
    """
    pred = dc.as_tensor(predictions)
    target = _check_pair(pred, targets)
    return dc.mean_all(dc.square(dc.sub(pred, target)))


def slack_penalty(values, lower, upper) -> Tensor:
    """Mean of max(0, lower - v) + max(0, v - upper) over all entries."""
    v = dc.as_tensor(values)
    lower = np.asarray(lower, dtype=float).reshape(1, -1)
    upper = np.asarray(upper, dtype=float).reshape(1, -1)
    if lower.shape[1] != v.cols or upper.shape[1] != v.cols:
        raise dc.ShapeError(f"bounds width {lower.shape[1]} vs values width {v.cols}")
    s_lo = dc.relu(dc.sub(lower, v))
    s_hi = dc.relu(dc.sub(v, upper))
    return dc.mean_all(dc.add(s_lo, s_hi))


def con_y(predictions, bounds: Bounds) -> Tensor:
    return slack_penalty(predictions, bounds.y_lower, bounds.y_upper)


def con_fu(fu_contributions, bounds: Bounds) -> Tensor:
    if fu_contributions is None:
        raise ValueError("input influence constraint needs a structured model (no f_u in unstructured models)")
    return slack_penalty(fu_contributions, bounds.fu_lower, bounds.fu_upper)


def loss_dx(states, batch: int = 1) -> Tensor:
    """Mean squared difference between successive states.

    ``states`` is time-major: (N*batch x nx) with step t in rows
    ``t*batch:(t+1)*batch``; an (n, N, nx) array is also accepted.
    """
    if isinstance(states, np.ndarray) and states.ndim == 3:
        n, N, k = states.shape
        states = states.transpose(1, 0, 2).reshape(N * n, k)
        batch = n
    s = dc.as_tensor(states)
    N = s.rows // batch
    if N * batch != s.rows:
        raise dc.ShapeError(f"{s.rows} state rows not divisible by batch {batch}")
    if N < 2:
        raise ValueError("state smoothing needs a horizon of at least 2")
    head = dc.slice_rows(s, 0, (N - 1) * batch)
    tail = dc.slice_rows(s, batch, N * batch)
    return dc.mean_all(dc.square(dc.sub(head, tail)))


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> LossReport:
    """Weighted sum of the available terms; terms with weight 0 are skipped."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    w = weights.as_dict()
    total = None
    for name, t in terms.items():
        q = w["Q" + name[1:]]
        if q == 0.0:
            continue
        piece = dc.scale(t, q)
        total = piece if total is None else dc.add(total, piece)
    if total is None:
        total = dc.scale(next(iter(terms.values())), 0.0) if terms else dc.as_tensor(0.0)
    return LossReport(terms=dict(terms), total=total, weights=weights)


class AdamW:
    """Adam with decoupled weight decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """

    def __init__(self, params: list[Param], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.isfinite(g).all():
                raise dc.NonFiniteError(f"non-finite gradient for {p.name or 'param'}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.value = p.value - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
                "weight_decay": self.weight_decay}


def write_loss_log(fh, step: int, report: LossReport | dict) -> None:
    """Append one JSON line ``{step, L_y, L_reg, L_dx, L_con_y, L_con_fu, total}``."""
    values = report.values() if isinstance(report, LossReport) else dict(report)
    fh.write(json.dumps({"step": step, **values}) + "\n")
