"""MLP, residual MLP and RNN blocks built from structured linear maps."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .linmaps import SpectralBounds, make_map

__all__ = ["ACTIVATIONS", "BLOCK_KINDS", "BlockConfig", "Block", "gelu", "blu", "activate"]

ACTIVATIONS = ("gelu", "blu", "identity", "relu")
BLOCK_KINDS = ("mlp", "rmlp", "rnn")


def gelu(x):
    """x * Phi(x) for a scalar or array."""
    out = dc.gelu(np.atleast_2d(np.asarray(x, dtype=float))).value
    return float(out[0, 0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))


def blu(x, beta: float):
    """beta * (sqrt(x^2 + 1) - 1) + x for a scalar or array, beta clamped to [-1, 1]."""
    out = dc.blu(np.atleast_2d(np.asarray(x, dtype=float)), beta).value
    return float(out[0, 0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))


def activate(kind: str, x: Tensor, beta: Param | None = None) -> Tensor:
    if kind == "gelu":
        return dc.gelu(x)
    if kind == "blu":
        return dc.blu(x, beta)
    if kind == "relu":
        return dc.relu(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class BlockConfig:
    """Architecture of one neural block.

    ``layers`` counts linear maps: ``layers - 1`` hidden layers of width
    ``nodes`` followed by an affine output layer.
    """

    kind: str = "mlp"
    layers: int = 2
    nodes: int = 20
    activation: str = "gelu"
    linmap: str = "linear"
    bounds: SpectralBounds | None = None

    def __post_init__(self):
        if isinstance(self.bounds, dict):
            self.bounds = SpectralBounds(**self.bounds)
        elif isinstance(self.bounds, (list, tuple)):
            self.bounds = SpectralBounds(*self.bounds)
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"block kind must be one of {BLOCK_KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.layers < 1 or self.nodes < 1:
            raise ValueError("layers and nodes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.bounds is not None:
            d["bounds"] = [self.bounds.lambda_min, self.bounds.lambda_max]
        return d


class _Layer:
    __slots__ = ("map", "bias", "beta", "recurrent", "activation", "residual")

    def __init__(self, map_, bias, beta, recurrent, activation, residual):
        self.map = map_
        self.bias = bias
        self.beta = beta
        self.recurrent = recurrent
        self.activation = activation
        self.residual = residual


class Block:
    """A feed-forward or recurrent network mapping rows of width ``in_features``.

    Hidden layers apply ``g(W h + b)`` (plus ``h`` for residual layers whose
    width is preserved, plus ``W_r h_prev`` for recurrent ones); the last
    layer is affine.
    """

    def __init__(self, in_features: int, out_features: int, config: BlockConfig,
                 rng: np.random.Generator | None = None, name: str = "block"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.config = config
        self.name = name
        sizes = [in_features] + [config.nodes] * (config.layers - 1) + [out_features]
        self.layers: list[_Layer] = []
        for k in range(config.layers):
            n_in, n_out = sizes[k], sizes[k + 1]
            hidden = k < config.layers - 1
            act = config.activation if hidden else "identity"
            lname = f"{name}.{k}"
            lmap = make_map(config.linmap, n_in, n_out, rng=rng, name=lname, bounds=config.bounds)
            bias = Param(np.zeros((1, n_out)), f"{lname}.b")
            beta = Param(np.zeros((1, 1)), f"{lname}.beta") if act == "blu" else None
            rec = None
            if config.kind == "rnn":
                rec = make_map(config.linmap, n_out, n_out, rng=rng, name=f"{lname}.Wr", bounds=config.bounds)
            residual = config.kind == "rmlp" and k >= 1 and n_in == n_out
            self.layers.append(_Layer(lmap, bias, beta, rec, act, residual))

    @property
    def recurrent(self) -> bool:
        return self.config.kind == "rnn"

    def linear_maps(self):
        """(label, map) pairs for every linear map in the block."""
        out = []
        for k, layer in enumerate(self.layers):
            out.append((f"{self.name}.{k}", layer.map))
            if layer.recurrent is not None:
                out.append((f"{self.name}.{k}.Wr", layer.recurrent))
        return out

    def parameters(self) -> list[Param]:
        params = []
        for layer in self.layers:
            params.extend(layer.map.parameters())
            params.append(layer.bias)
            if layer.beta is not None:
                params.append(layer.beta)
            if layer.recurrent is not None:
                params.extend(layer.recurrent.parameters())
        return params

    def reg_penalties(self) -> list[Tensor]:
        out = []
        for _, m in self.linear_maps():
            p = m.reg_penalty()
            if p is not None:
                out.append(p)
        return out

    def _check_input(self, x: Tensor):
        if x.cols != self.in_features:
            raise dc.ShapeError(f"{self.name}: input width {x.cols}, expected {self.in_features}")

    def _prepared_layers(self):
        return [(layer.map.prepare(), layer,
                 layer.recurrent.prepare() if layer.recurrent is not None else None)
                for layer in self.layers]

    @staticmethod
    def _layer(prep, h: Tensor, prev: Tensor | None) -> Tensor:
        apply, layer, rec = prep
        z = dc.add(apply(h), layer.bias)
        if layer.residual:
            z = dc.add(z, h)
        if prev is not None:
            z = dc.add(z, rec(prev))
        return activate(layer.activation, z, layer.beta)

    def prepare(self):
        """Build all layer matrices once; return ``fn(x)`` applying the block to a batch.

        Recurrent blocks treat each call as a length-1 sequence.
        """
        prepared = self._prepared_layers()

        def apply(x):
            x = dc.as_tensor(x)
            self._check_input(x)
            h = x
            for prep in prepared:
                h = self._layer(prep, h, None)
            return h

        return apply

    def forward(self, x) -> Tensor:
        """Apply the block to a batch of rows (n x in_features)."""
        return self.prepare()(x)

    __call__ = forward

    def forward_sequence(self, xs: Sequence) -> list[Tensor]:
        """Run over a sequence of row batches; hidden values start at zero.

        For non-recurrent blocks this is ``forward`` applied at each step.
        """
        if len(xs) == 0:
            raise ValueError("empty input sequence")
        xs = [dc.as_tensor(x) for x in xs]
        if not self.recurrent:
            apply = self.prepare()
            return [apply(x) for x in xs]
        prepared = self._prepared_layers()
        state: list[Tensor | None] = [None] * len(self.layers)
        outputs = []
        for x in xs:
            self._check_input(x)
            h = x
            for k, prep in enumerate(prepared):
                h = self._layer(prep, h, state[k])
                state[k] = h
            outputs.append(h)
        return outputs

    def project(self) -> None:
        """Clamp BLU shape parameters into [-1, 1] in place."""
        for layer in self.layers:
            if layer.beta is not None:
                np.clip(layer.beta.value, -1.0, 1.0, out=layer.beta.value)

    def __repr__(self):
        c = self.config
        return f"Block({self.name}: {c.kind} {self.in_features}->{self.out_features}, L={c.layers}, nodes={c.nodes}, {c.activation}, {c.linmap})"
