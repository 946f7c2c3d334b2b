"""PCA parameterization of data vectors with histogram transformation.

``d_pca = Phi xi + mean`` with ``Phi = U_l Sigma_l`` from the SVD of the
centred, ``1/sqrt(N_r - 1)``-scaled data matrix, so standard-normal ``xi``
reproduces the prior mean and (truncated) covariance. The histogram
transformation then maps every component through its Gaussian CDF and the
empirical prior quantile function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import DataSchema, DataVector, Ensemble, NumericalError, SchemaError, centered_data_matrix


def energy_rank(singular_values: np.ndarray, energy: float) -> int:
    """Smallest ``k`` whose leading squared singular values reach ``energy``.

    ``energy == 1`` returns the numerical rank, so trailing round-off
    directions are never retained.
    """
    if not 0 < energy <= 1:
        raise ValueError(f"energy must lie in (0, 1], got {energy}")
    s2 = np.asarray(singular_values, dtype=float) ** 2
    total = s2.sum()
    if total <= 0:
        raise NumericalError("all singular values are zero")
    if energy == 1.0:
        return int(np.count_nonzero(s2 > s2.max() * s2.size * np.finfo(float).eps))
    frac = np.cumsum(s2) / total
    return min(int(np.searchsorted(frac, energy, side="left")) + 1, s2.size)


@dataclass(frozen=True)
class PcaBasis:
    schema: DataSchema
    mean: np.ndarray  # (n_f,)
    phi: np.ndarray  # (n_f, n_l) = U_l diag(s_l)
    singular_values: np.ndarray  # all, nonincreasing
    n_l: int

    @property
    def u(self) -> np.ndarray:
        """Orthonormal left singular vectors of the retained block."""
        return self.phi / self.singular_values[: self.n_l]

    def retained_energy(self) -> float:
        s2 = self.singular_values**2
        return float(s2[: self.n_l].sum() / s2.sum())


def fit_pca(e: Ensemble, energy: float | None = None, n_latent: int | None = None) -> PcaBasis:
    """Fit the basis, keeping ``n_latent`` components or the ``energy`` fraction."""
    if (energy is None) == (n_latent is None):
        raise ValueError("give exactly one of energy or n_latent")
    D = centered_data_matrix(e)
    U, s, _ = np.linalg.svd(D, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(e.values).max()):
        raise NumericalError("degenerate ensemble: all members identical")
    # keep numerically zero directions out of the retained block
    rank = int(np.count_nonzero(s > s[0] * max(D.shape) * np.finfo(float).eps))
    if n_latent is not None:
        if not 1 <= n_latent <= e.n_r - 1:
            raise ValueError(f"n_latent must lie in [1, {e.n_r - 1}]")
        n_l = int(n_latent)
        if n_l > rank:
            raise NumericalError(f"requested {n_l} components but the ensemble has rank {rank}")
    else:
        n_l = min(energy_rank(s, energy), rank)
    mean = e.flat().mean(axis=0)
    return PcaBasis(e.schema, mean, U[:, :n_l] * s[:n_l], s, n_l)


def pca_decode(basis: PcaBasis, xi) -> np.ndarray:
    """``Phi xi + mean`` reshaped to ``(n_qoi, n_t)``; batches give ``(n, n_qoi, n_t)``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != basis.n_l:
        raise SchemaError(f"latent length {xi.shape[-1]} != {basis.n_l}")
    flat = xi @ basis.phi.T + basis.mean
    return flat.reshape(*xi.shape[:-1], *basis.schema.shape)


def pca_encode(basis: PcaBasis, d) -> np.ndarray:
    """Whitened projection ``Sigma_l^{-1} U_l^T (d - mean)``."""
    values = d.values if isinstance(d, (DataVector, Ensemble)) else np.asarray(d, dtype=float)
    if values.shape[-2:] != basis.schema.shape:
        raise SchemaError("data does not match the basis schema")
    s = basis.singular_values[: basis.n_l]
    if np.any(s <= 0):
        raise NumericalError("zero singular value in retained block")
    flat = values.reshape(*values.shape[:-2], -1) - basis.mean
    return (flat @ basis.u) / s


@dataclass(frozen=True)
class MarginalCdfTable:
    """Per flattened component: sorted prior samples and Gaussian CDF parameters."""

    schema: DataSchema
    sorted_values: np.ndarray  # (n_f, n_r)
    mean: np.ndarray  # (n_f,)
    std: np.ndarray  # (n_f,)


def fit_ht(e: Ensemble, basis: PcaBasis) -> MarginalCdfTable:
    if e.schema != basis.schema:
        raise SchemaError("ensemble and basis schemas differ")
    sorted_values = np.sort(e.flat().T, axis=1)
    std = np.sqrt(np.sum(basis.phi**2, axis=1))
    return MarginalCdfTable(e.schema, sorted_values, basis.mean.copy(), std)


def empirical_quantile(sorted_values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise quantiles at plotting positions ``(i - 1) / (N - 1)``.

    ``sorted_values`` is ``(m, N)``; ``u`` broadcasts to ``(..., m)``.
    Linear interpolation between order statistics, clamped to ``[min, max]``.
    """
    m, N = sorted_values.shape
    if N == 1:
        return np.broadcast_to(sorted_values[:, 0], np.shape(u)).copy()
    pos = np.clip(u, 0.0, 1.0) * (N - 1)
    lo = np.minimum(pos.astype(np.int64), N - 2)
    frac = pos - lo
    rows = np.arange(m)
    v0 = sorted_values[rows, lo]
    v1 = sorted_values[rows, lo + 1]
    return v0 + frac * (v1 - v0)


def _apply_ht_flat(table: MarginalCdfTable, flat: np.ndarray, comps: np.ndarray | None = None):
    sv = table.sorted_values if comps is None else table.sorted_values[comps]
    mean = table.mean if comps is None else table.mean[comps]
    std = table.std if comps is None else table.std[comps]
    safe = np.where(std > 0, std, 1.0)
    u = np.where(std > 0, ndtr((flat - mean) / safe), 0.5)
    return empirical_quantile(sv, u)


def apply_ht(table: MarginalCdfTable, d_pca) -> np.ndarray:
    """``f_T^{-1}(f_I(x))`` per component; accepts one vector or a batch."""
    values = d_pca.values if isinstance(d_pca, (DataVector, Ensemble)) else np.asarray(d_pca, dtype=float)
    if values.shape[-2:] != table.schema.shape:
        raise SchemaError("data does not match the HT table schema")
    flat = values.reshape(*values.shape[:-2], -1)
    return _apply_ht_flat(table, flat).reshape(values.shape)


class PcaParameterization:
    """PCA (optionally followed by HT) as an encode / decode pair."""

    def __init__(self, basis: PcaBasis, table: MarginalCdfTable | None = None):
        self.basis = basis
        self.table = table
        self.schema = basis.schema

    @property
    def tag(self) -> str:
        return "PCA+HT" if self.table is not None else "PCA"

    @property
    def n_latent(self) -> int:
        return self.basis.n_l

    def encode(self, d) -> np.ndarray:
        return pca_encode(self.basis, d)

    def decode(self, xi) -> np.ndarray:
        out = pca_decode(self.basis, np.atleast_2d(xi))
        if self.table is not None:
            out = apply_ht(self.table, out)
        return out

    def decode_selected(self, xi, obs) -> np.ndarray:
        """Decode only the observed components (cheap path for optimisers)."""
        idx = obs.flat_indices(self.schema)
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        flat = xi @ self.basis.phi[idx].T + self.basis.mean[idx]
        if self.table is not None:
            flat = _apply_ht_flat(self.table, flat, idx)
        return flat


def fit_pca_ht(e: Ensemble, energy: float | None = None, n_latent: int | None = None,
               histogram: bool = True) -> PcaParameterization:
    basis = fit_pca(e, energy=energy, n_latent=n_latent)
    return PcaParameterization(basis, fit_ht(e, basis) if histogram else None)
