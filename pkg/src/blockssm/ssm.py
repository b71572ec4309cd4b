"""Block-structured neural state space models.

Structured classes evolve ``x[t+1] = f_x(x[t]) + f_u(u[t])``; the
unstructured class uses ``x[t+1] = f_xu([x[t]; u[t]])``.  Every class
predicts ``y[t+1] = f_y(x[t+1])`` and estimates ``x[0]`` from the last
``n_p`` measured outputs with an observer network.

Batches are stored time-major: a rollout over ``n`` windows and horizon
``N`` stacks its states into an (N*n x n_x) matrix where rows
``t*n:(t+1)*n`` hold step ``t+1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .blocks import Block, BlockConfig
from .diffcore import Param, Tensor
from .linmaps import DenseMap, LinearMap, SpectralBounds, make_map

__all__ = [
    "ModelClass", "LINEARITY", "SSMConfig", "BlockSSM", "Rollout", "build_model",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class ModelClass(str, Enum):
    UNSTRUCTURED = "unstructured"
    BLOCK_NONLINEAR = "blocknonlinear"
    HAMMERSTEIN = "hammerstein"
    HAMMERSTEIN_WIENER = "hammersteinwiener"
    WIENER = "wiener"
    LINEAR = "linear"

    @classmethod
    def parse(cls, value) -> "ModelClass":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "").replace(" ", "")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown model class {value!r}")


# which of (f_x, f_u, f_y) are linear maps
LINEARITY = {
    ModelClass.BLOCK_NONLINEAR: (False, False, True),
    ModelClass.HAMMERSTEIN_WIENER: (True, False, False),
    ModelClass.HAMMERSTEIN: (True, False, True),
    ModelClass.WIENER: (True, True, False),
    ModelClass.LINEAR: (True, True, True),
    ModelClass.UNSTRUCTURED: (False, None, True),
}


@dataclass
class SSMConfig:
    """Architecture of a :class:`BlockSSM`.

    ``linmap``/``bounds`` select the parametrization of a linear state map
    f_x; other standalone linear components are dense.  ``nonlinear``
    configures every nonlinear component and ``observer`` the state observer.
    """

    model_class: ModelClass
    ny: int
    nu: int
    nx: int | None = None
    n_p: int = 1
    nonlinear: BlockConfig = field(default_factory=lambda: BlockConfig(kind="rmlp", layers=3, nodes=40))
    observer: BlockConfig = field(default_factory=lambda: BlockConfig(kind="rmlp", layers=2, nodes=40))
    linmap: str = "linear"
    bounds: SpectralBounds | None = None

    def __post_init__(self):
        self.model_class = ModelClass.parse(self.model_class)
        if self.nx is None:
            self.nx = self.ny
        if isinstance(self.nonlinear, dict):
            self.nonlinear = BlockConfig(**self.nonlinear)
        if isinstance(self.observer, dict):
            self.observer = BlockConfig(**self.observer)
        if isinstance(self.bounds, dict):
            self.bounds = SpectralBounds(**self.bounds)
        elif isinstance(self.bounds, (list, tuple)):
            self.bounds = SpectralBounds(*self.bounds)
        if min(self.ny, self.nu, self.nx, self.n_p) < 1:
            raise ValueError("dimensions and n_p must be >= 1")

    def to_dict(self) -> dict:
        return {
            "model_class": self.model_class.value,
            "ny": self.ny, "nu": self.nu, "nx": self.nx, "n_p": self.n_p,
            "nonlinear": self.nonlinear.to_dict(),
            "observer": self.observer.to_dict(),
            "linmap": self.linmap,
            "bounds": None if self.bounds is None else [self.bounds.lambda_min, self.bounds.lambda_max],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SSMConfig":
        return cls(**d)


@dataclass
class Rollout:
    """States, predictions and input contributions of one batched rollout.

    ``states``, ``predictions`` and ``fu_contributions`` are time-major
    (N*n x k) tensors; ``fu_contributions`` is None for unstructured models.
    """

    x0: Tensor
    states: Tensor
    predictions: Tensor
    fu_contributions: Tensor | None
    batch: int
    horizon: int

    def _unstack(self, t: Tensor) -> np.ndarray:
        return t.value.reshape(self.horizon, self.batch, -1).transpose(1, 0, 2)

    def states_array(self) -> np.ndarray:
        """States as an (n, N, n_x) array."""
        return self._unstack(self.states)

    def predictions_array(self) -> np.ndarray:
        return self._unstack(self.predictions)

    def fu_array(self) -> np.ndarray | None:
        return None if self.fu_contributions is None else self._unstack(self.fu_contributions)


def _time_major(a: np.ndarray) -> np.ndarray:
    # (n, N, k) -> (N*n, k) with rows grouped by time step
    n, N, k = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2)).reshape(N * n, k)


def _as_batch(a, ndim_single: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == ndim_single:
        a = a[None]
    return a


class BlockSSM:
    """A neural state space model assembled from blocks and linear maps.

    Components may be any object exposing ``prepare()`` and ``parameters()``
    (a :class:`~blockssm.linmaps.LinearMap` or :class:`~blockssm.blocks.Block`).
    """

    def __init__(self, model_class, nx: int, nu: int, ny: int, n_p: int,
                 observer: Block, f_y, f_x=None, f_u=None, f_xu=None,
                 config: SSMConfig | None = None):
        self.model_class = ModelClass.parse(model_class)
        self.nx, self.nu, self.ny, self.n_p = nx, nu, ny, n_p
        self.observer = observer
        self.f_x, self.f_u, self.f_xu, self.f_y = f_x, f_u, f_xu, f_y
        self.config = config
        if self.structured:
            if f_x is None or f_u is None:
                raise ValueError(f"{self.model_class.value} needs f_x and f_u")
        elif f_xu is None:
            raise ValueError("unstructured model needs f_xu")
        expected_obs = ny if observer.recurrent else n_p * ny
        if observer.in_features != expected_obs or observer.out_features != nx:
            raise dc.ShapeError(
                f"observer maps {observer.in_features}->{observer.out_features}, expected {expected_obs}->{nx}")
        if f_y.in_features != nx or f_y.out_features != ny:
            raise dc.ShapeError(f"f_y maps {f_y.in_features}->{f_y.out_features}, expected {nx}->{ny}")

    @property
    def structured(self) -> bool:
        return self.model_class is not ModelClass.UNSTRUCTURED

    def components(self) -> dict:
        comps = {"observer": self.observer}
        if self.structured:
            comps.update(f_x=self.f_x, f_u=self.f_u)
        else:
            comps["f_xu"] = self.f_xu
        comps["f_y"] = self.f_y
        return comps

    def parameters(self) -> list[Param]:
        params = []
        for comp in self.components().values():
            params.extend(comp.parameters())
        return params

    def named_parameters(self) -> list[tuple[str, Param]]:
        out = []
        for cname, comp in self.components().items():
            for i, p in enumerate(comp.parameters()):
                out.append((f"{cname}/{i}:{p.name}", p))
        return out

    def reg_penalties(self) -> list[Tensor]:
        terms = []
        for comp in self.components().values():
            if isinstance(comp, Block):
                terms.extend(comp.reg_penalties())
            else:
                p = comp.reg_penalty()
                if p is not None:
                    terms.append(p)
        return terms

    def has_regularized_maps(self) -> bool:
        for comp in self.components().values():
            maps = comp.linear_maps() if isinstance(comp, Block) else [("", comp)]
            if any(m.kind == "softsvd" for _, m in maps):
                return True
        return False

    def project(self) -> None:
        for comp in self.components().values():
            if isinstance(comp, Block):
                comp.project()

    def transition_maps(self) -> list[tuple[str, LinearMap]]:
        """Linear maps inside the state transition (f_x or f_xu)."""
        comp = self.f_x if self.structured else self.f_xu
        label = "f_x" if self.structured else "f_xu"
        if isinstance(comp, Block):
            return [(f"{label}.{name.split('.', 1)[1]}", m) for name, m in comp.linear_maps()]
        return [(label, comp)]

    # -- forward -----------------------------------------------------------

    def observe_initial_state(self, y_history) -> Tensor:
        """Estimate x0 from outputs ordered oldest first: (n_p, ny) or (n, n_p, ny)."""
        yh = _as_batch(y_history, 2)
        if yh.ndim != 3 or yh.shape[1] != self.n_p or yh.shape[2] != self.ny:
            raise dc.ShapeError(f"y history shape {yh.shape}, expected (n, {self.n_p}, {self.ny})")
        if self.observer.recurrent:
            return self.observer.forward_sequence([yh[:, k, :] for k in range(self.n_p)])[-1]
        return self.observer(yh.reshape(yh.shape[0], self.n_p * self.ny))

    def step(self, x, u) -> tuple[Tensor, Tensor]:
        """One transition from batch rows ``x`` (n x nx) under inputs ``u`` (n x nu)."""
        x, u = dc.as_tensor(x), dc.as_tensor(u)
        if x.cols != self.nx or u.cols != self.nu or x.rows != u.rows:
            raise dc.ShapeError(f"step: x {x.shape}, u {u.shape} for nx={self.nx}, nu={self.nu}")
        if self.structured:
            x_next = dc.add(self.f_x.prepare()(x), self.f_u.prepare()(u))
        else:
            x_next = self.f_xu.prepare()(dc.concat([x, u], axis=1))
        return x_next, self.f_y.prepare()(x_next)

    def rollout(self, y_history, u_future) -> Rollout:
        """Open-loop rollout over ``N`` steps from an observed initial state.

        ``y_history`` is (n, n_p, ny) and ``u_future`` is (n, N, nu); single
        trajectories without the batch axis are accepted as well.
        """
        yh = _as_batch(y_history, 2)
        uf = _as_batch(u_future, 2)
        if uf.ndim != 3 or uf.shape[2] != self.nu:
            raise dc.ShapeError(f"u shape {uf.shape}, expected (n, N, {self.nu})")
        n, N = uf.shape[0], uf.shape[1]
        if N < 1:
            raise ValueError("rollout horizon must be >= 1")
        if yh.shape[0] != n:
            raise dc.ShapeError(f"batch sizes differ: y history {yh.shape[0]}, u {n}")
        u_flat = _time_major(uf)
        x = self.observe_initial_state(yh)
        x0 = x
        xs = []
        fu_all = None
        if self.structured:
            fx = self.f_x.prepare()
            fu_all = self.f_u.prepare()(u_flat)
            for t in range(N):
                x = dc.add(fx(x), dc.slice_rows(fu_all, t * n, (t + 1) * n))
                xs.append(x)
        else:
            fxu = self.f_xu.prepare()
            for t in range(N):
                x = fxu(dc.concat([x, u_flat[t * n:(t + 1) * n]], axis=1))
                xs.append(x)
        states = xs[0] if N == 1 else dc.concat(xs, axis=0)
        preds = self.f_y.prepare()(states)
        return Rollout(x0=x0, states=states, predictions=preds, fu_contributions=fu_all,
                       batch=n, horizon=N)

    def open_loop(self, Y: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Simulate a whole (T x ny) series from its first ``n_p`` outputs.

        Returns the (T - n_p) x ny predictions of ``Y[n_p:]``.  Raises
        :class:`~blockssm.diffcore.NonFiniteError` if the simulation diverges.
        """
        T = Y.shape[0]
        if T <= self.n_p:
            raise ValueError(f"series of length {T} too short for lookback {self.n_p}")
        with dc.no_grad():
            r = self.rollout(Y[None, :self.n_p], U[None, self.n_p - 1:T - 1])
        return r.predictions.value

    def __repr__(self):
        return f"BlockSSM({self.model_class.value}, nx={self.nx}, nu={self.nu}, ny={self.ny}, n_p={self.n_p})"


def build_model(config: SSMConfig, rng: np.random.Generator | int | None = None) -> BlockSSM:
    """Instantiate the model class described by ``config``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c = config
    obs_in = c.ny if c.observer.kind == "rnn" else c.n_p * c.ny
    observer = Block(obs_in, c.nx, c.observer, rng=rng, name="observer")
    lin_x, lin_u, lin_y = LINEARITY[c.model_class]
    kwargs = {}
    if c.model_class is ModelClass.UNSTRUCTURED:
        kwargs["f_xu"] = Block(c.nx + c.nu, c.nx, c.nonlinear, rng=rng, name="f_xu")
    else:
        kwargs["f_x"] = (make_map(c.linmap, c.nx, c.nx, rng=rng, name="f_x", bounds=c.bounds)
                         if lin_x else Block(c.nx, c.nx, c.nonlinear, rng=rng, name="f_x"))
        kwargs["f_u"] = (DenseMap(c.nu, c.nx, rng=rng, name="f_u")
                         if lin_u else Block(c.nu, c.nx, c.nonlinear, rng=rng, name="f_u"))
    kwargs["f_y"] = (DenseMap(c.nx, c.ny, rng=rng, name="f_y")
                     if lin_y else Block(c.nx, c.ny, c.nonlinear, rng=rng, name="f_y"))
    return BlockSSM(c.model_class, c.nx, c.nu, c.ny, c.n_p, observer, config=c, **kwargs)


def save_checkpoint(model: BlockSSM, path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float64 LE parameters)."""
    if model.config is None:
        raise ValueError("only models built from an SSMConfig can be checkpointed")
    path = Path(path)
    named = model.named_parameters()
    manifest = {
        "format": "blockssm-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dims": {"nx": model.nx, "nu": model.nu, "ny": model.ny, "n_p": model.n_p},
        "params": [{"name": name, "shape": list(p.shape)} for name, p in named],
        "dtype": "<f8",
    }
    if extra:
        manifest["extra"] = extra
    flat = np.concatenate([p.value.ravel() for _, p in named]) if named else np.zeros(0)
    json_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2))
    flat.astype("<f8").tofile(bin_path)
    return json_path, bin_path


def load_checkpoint(path) -> BlockSSM:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "blockssm-checkpoint":
        raise ValueError(f"{path}: not a blockssm checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    model = build_model(SSMConfig.from_dict(manifest["config"]))
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    named = model.named_parameters()
    if [e["name"] for e in manifest["params"]] != [n for n, _ in named]:
        raise ValueError(f"{path}: parameter layout does not match the configured model")
    offset = 0
    for _, p in named:
        size = p.value.size
        if offset + size > flat.size:
            raise ValueError(f"{path}: parameter file truncated")
        p.value = flat[offset:offset + size].reshape(p.shape).copy()
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: {flat.size - offset} trailing values in parameter file")
    return model
