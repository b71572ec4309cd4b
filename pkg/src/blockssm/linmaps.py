"""Structured linear maps with optional spectral bounds.

Every map exposes the same surface:

* ``map(x)`` applies the map to a batch of row vectors ``x`` (n x in) and
  returns ``x @ W.T`` (n x out).  Maps carry no bias.
* ``effective_matrix()`` builds the (out x in) matrix on the active tape.
* ``reg_penalty()`` returns a 1x1 tensor, or ``None`` for maps without one.
* ``eigenvalues()`` returns the spectrum of the current effective matrix.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor

__all__ = [
    "SpectralBounds", "LinearMap", "DenseMap", "PFMap", "SoftSVDMap",
    "HouseholderSpectralMap", "MAP_KINDS", "make_map", "orthogonal_init",
    "pf_effective", "softsvd_effective", "softsvd_reg", "householder_matrix",
    "householder_effective", "eigenvalues", "write_eigen_csv",
]


@dataclass(frozen=True)
class SpectralBounds:
    lambda_min: float = 0.0
    lambda_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_min < self.lambda_max:
            raise ValueError(
                f"need 0 <= lambda_min < lambda_max, got ({self.lambda_min}, {self.lambda_max})")


def _clamp_scale(raw, bounds: SpectralBounds) -> Tensor:
    # lambda_max - (lambda_max - lambda_min) * sigmoid(raw), always inside the bounds
    width = bounds.lambda_max - bounds.lambda_min
    return dc.sub(bounds.lambda_max, dc.scale(dc.sigmoid(raw), width))


def orthogonal_init(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random orthogonal matrix from QR of a Gaussian matrix, with diag(R) > 0."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def pf_effective(W, M, bounds: SpectralBounds) -> Tensor:
    """Row-softmax(W) scaled elementwise by M squashed into the bounds.

    Each row of the result sums to a value in [lambda_min, lambda_max], so the
    dominant eigenvalue modulus is confined there as well.
    """
    W, M = dc.as_tensor(W), dc.as_tensor(M)
    if W.rows != W.cols:
        raise dc.ShapeError(f"Perron-Frobenius map must be square, got {W.shape}")
    if M.shape != W.shape:
        raise dc.ShapeError(f"W {W.shape} and M {M.shape} differ")
    return dc.mul(dc.softmax_rows(W), _clamp_scale(M, bounds))


def _diag_sandwich(U, s, V) -> Tensor:
    """U @ diag(s) @ V using the leading len(s) columns of U and rows of V."""
    r = s.cols
    if U.cols > r:
        U = dc.slice_cols(U, 0, r)
    if V.rows > r:
        V = dc.slice_rows(V, 0, r)
    if U.cols != r or V.rows != r:
        raise dc.ShapeError(f"factors {U.shape}, {s.shape}, {V.shape} do not conform")
    return dc.matmul(dc.mul(U, s), V)


def softsvd_effective(U, Sigma, V, bounds: SpectralBounds) -> Tensor:
    """U @ diag(clamped Sigma) @ V.  ``Sigma`` is a 1 x r row."""
    U, Sigma, V = dc.as_tensor(U), dc.as_tensor(Sigma), dc.as_tensor(V)
    if Sigma.rows != 1:
        raise dc.ShapeError(f"Sigma must be a row vector, got {Sigma.shape}")
    return _diag_sandwich(U, _clamp_scale(Sigma, bounds), V)


def softsvd_reg(U, V) -> Tensor:
    """Sum of Frobenius orthogonality residuals of both factors."""
    terms = []
    for A in (dc.as_tensor(U), dc.as_tensor(V)):
        eye_r = np.eye(A.rows)
        eye_c = np.eye(A.cols)
        terms.append(dc.frobenius(dc.sub(eye_r, dc.matmul(A, A.T))))
        terms.append(dc.frobenius(dc.sub(eye_c, dc.matmul(A.T, A))))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def householder_matrix(vectors: Iterable) -> Tensor:
    """Product of reflectors ``I - 2 v v^T / |v|^2`` for row vectors ``v``."""
    H = None
    for v in vectors:
        v = dc.as_tensor(v)
        if v.rows != 1:
            raise dc.ShapeError(f"reflector must be a row vector, got {v.shape}")
        if float((v.value * v.value).sum()) == 0.0:
            raise ValueError("zero-norm Householder vector")
        w = dc.div(dc.scale(v, 2.0), dc.matmul(v, v.T))  # 2 v / |v|^2
        if H is None:
            H = dc.sub(np.eye(v.cols), dc.matmul(v.T, w))
        else:
            # H (I - v^T w) = H - (H v^T) w
            H = dc.sub(H, dc.matmul(dc.matmul(H, v.T), w))
    if H is None:
        raise ValueError("need at least one Householder vector")
    return H


def householder_effective(u_vectors, v_vectors, Sigma, bounds: SpectralBounds) -> Tensor:
    U = householder_matrix(u_vectors)
    V = householder_matrix(v_vectors)
    return _diag_sandwich(U, _clamp_scale(dc.as_tensor(Sigma), bounds), V)


def eigenvalues(matrix) -> np.ndarray:
    """All eigenvalues of a square matrix (Tensor, LinearMap or array)."""
    if isinstance(matrix, LinearMap):
        matrix = matrix.effective_value()
    elif isinstance(matrix, Tensor):
        matrix = matrix.value
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise dc.ShapeError(f"eigenvalues need a square matrix, got {a.shape}")
    return np.linalg.eigvals(a)


def write_eigen_csv(path, spectra: dict[str, np.ndarray]) -> None:
    """Write ``map_name,re,im`` rows for each named spectrum."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["map_name", "re", "im"])
        for name, eigs in spectra.items():
            for lam in eigs:
                w.writerow([name, repr(float(lam.real)), repr(float(lam.imag))])


class LinearMap:
    """Base class; subclasses build their matrix in ``effective_matrix``."""

    kind = "abstract"

    def __init__(self, in_features: int, out_features: int, name: str = ""):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name

    def parameters(self) -> list[Param]:
        raise NotImplementedError

    def effective_matrix(self) -> Tensor:
        raise NotImplementedError

    def effective_value(self) -> np.ndarray:
        with dc.no_grad():
            return self.effective_matrix().value

    def reg_penalty(self) -> Tensor | None:
        return None

    def map(self, x) -> Tensor:
        return self.prepare()(x)

    __call__ = map

    def prepare(self):
        """Build the matrix once and return ``fn(x) -> x @ W.T`` for repeated use."""
        WT = dc.transpose(self.effective_matrix())
        n_in, label = self.in_features, self.name or self.kind

        def apply(x):
            x = dc.as_tensor(x)
            if x.cols != n_in:
                raise dc.ShapeError(f"{label}: input width {x.cols}, expected {n_in}")
            return dc.matmul(x, WT)

        return apply

    def eigenvalues(self) -> np.ndarray:
        return eigenvalues(self.effective_value())

    def __repr__(self):
        return f"{type(self).__name__}({self.in_features}->{self.out_features})"


class DenseMap(LinearMap):
    """Unconstrained weight matrix."""

    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, name="", weight=None, bounds=None):
        super().__init__(in_features, out_features, name)
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            lim = np.sqrt(1.0 / in_features)
            weight = rng.uniform(-lim, lim, size=(out_features, in_features))
        self.W = Param(weight, f"{name}.W")
        if self.W.shape != (out_features, in_features):
            raise dc.ShapeError(f"weight shape {self.W.shape} != {(out_features, in_features)}")

    def parameters(self):
        return [self.W]

    def effective_matrix(self):
        return self.W


class PFMap(LinearMap):
    """Perron-Frobenius parametrization (square maps only)."""

    kind = "pf"

    def __init__(self, in_features, out_features, rng=None, name="", bounds=None):
        if in_features != out_features:
            raise ValueError(f"Perron-Frobenius map must be square, got {out_features}x{in_features}")
        super().__init__(in_features, out_features, name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bounds = bounds or SpectralBounds()
        n = in_features
        self.W = Param(rng.uniform(-1.0, 1.0, size=(n, n)), f"{name}.W")
        self.M = Param(rng.uniform(-1.0, 1.0, size=(n, n)), f"{name}.M")

    def parameters(self):
        return [self.W, self.M]

    def effective_matrix(self):
        return pf_effective(self.W, self.M, self.bounds)


class SoftSVDMap(LinearMap):
    """U diag(sigma) V factorization kept orthogonal by a penalty.

    U is (out x out) and V is (in x in); the leading min(in, out) columns of
    U and rows of V are used, so the orthogonality penalty can reach zero
    for rectangular maps too.
    """

    kind = "softsvd"

    def __init__(self, in_features, out_features, rng=None, name="", bounds=None):
        super().__init__(in_features, out_features, name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bounds = bounds or SpectralBounds()
        r = min(in_features, out_features)
        self.U = Param(orthogonal_init(rng, out_features), f"{name}.U")
        self.V = Param(orthogonal_init(rng, in_features), f"{name}.V")
        self.Sigma = Param(rng.uniform(-1.0, 1.0, size=(1, r)), f"{name}.Sigma")

    def parameters(self):
        return [self.U, self.Sigma, self.V]

    def effective_matrix(self):
        return softsvd_effective(self.U, self.Sigma, self.V, self.bounds)

    def reg_penalty(self):
        return softsvd_reg(self.U, self.V)


class HouseholderSpectralMap(LinearMap):
    """SVD factorization whose orthogonal factors are products of reflectors."""

    kind = "spectral"

    def __init__(self, in_features, out_features, rng=None, name="", bounds=None,
                 n_reflectors: int | None = None):
        super().__init__(in_features, out_features, name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bounds = bounds or SpectralBounds()
        r = min(in_features, out_features)
        ku = n_reflectors or out_features
        kv = n_reflectors or in_features
        self.u_vectors = [Param(rng.standard_normal((1, out_features)), f"{name}.u{k}") for k in range(ku)]
        self.v_vectors = [Param(rng.standard_normal((1, in_features)), f"{name}.v{k}") for k in range(kv)]
        self.Sigma = Param(rng.uniform(-1.0, 1.0, size=(1, r)), f"{name}.Sigma")

    def parameters(self):
        return [*self.u_vectors, *self.v_vectors, self.Sigma]

    def U(self) -> Tensor:
        return householder_matrix(self.u_vectors)

    def V(self) -> Tensor:
        return householder_matrix(self.v_vectors)

    def effective_matrix(self):
        return householder_effective(self.u_vectors, self.v_vectors, self.Sigma, self.bounds)


MAP_KINDS = {
    "linear": DenseMap,
    "pf": PFMap,
    "softsvd": SoftSVDMap,
    "spectral": HouseholderSpectralMap,
}


def make_map(kind: str, in_features: int, out_features: int, rng=None, name: str = "",
             bounds: SpectralBounds | None = None) -> LinearMap:
    try:
        cls = MAP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown linear map kind {kind!r}; choose from {sorted(MAP_KINDS)}") from None
    return cls(in_features, out_features, rng=rng, name=name, bounds=bounds)
