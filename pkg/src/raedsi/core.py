"""Shared data model: schemas, data vectors, ensembles, observations, RNG.

Data vectors are stored as ``(n_qoi, n_t)`` arrays. Flattening is row-major
(quantity-major, time within quantity) everywhere in the package, so the
flattened index of ``(q, t)`` is ``q * n_t + t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

RNG_ALGORITHM = "philox4x64-10"


class SchemaError(ValueError):
    """Raised when data does not match the expected schema."""


class NumericalError(ArithmeticError):
    """Raised when a linear-algebra or optimisation step cannot proceed."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator for ``seed`` and an optional stream key.

    The same ``(seed, *stream)`` tuple yields the same stream on every
    platform. Independent stages should use distinct stream keys rather than
    sharing a generator.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DataSchema:
    """Quantity names and the shared time grid (days)."""

    quantity_names: tuple[str, ...]
    times: tuple[float, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.quantity_names)
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "quantity_names", names)
        object.__setattr__(self, "times", times)
        if len(names) < 1:
            raise SchemaError("schema needs at least one quantity")
        if len(set(names)) != len(names):
            raise SchemaError("quantity names must be unique")
        if len(times) < 2:
            raise SchemaError("schema needs at least two time steps")
        if np.any(np.diff(times) <= 0):
            raise SchemaError("times must be strictly increasing")

    @property
    def n_qoi(self) -> int:
        return len(self.quantity_names)

    @property
    def n_t(self) -> int:
        return len(self.times)

    @property
    def n_f(self) -> int:
        return self.n_qoi * self.n_t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_qoi, self.n_t)

    def time_array(self) -> np.ndarray:
        return np.asarray(self.times)

    def quantity_index(self, name: str) -> int:
        try:
            return self.quantity_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown quantity {name!r}") from None

    def time_index(self, time: float) -> int:
        """Index of a reporting time; the time must coincide exactly with the grid."""
        hits = np.flatnonzero(np.isclose(self.time_array(), time, rtol=0, atol=1e-9))
        if hits.size == 0:
            raise SchemaError(f"time {time} is not a reporting step")
        return int(hits[0])

    def flat_index(self, q: int, t: int) -> int:
        return q * self.n_t + t


@dataclass(frozen=True)
class DataVector:
    """One realization: ``values[q, t]`` for every quantity and time step."""

    schema: DataSchema
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1 and values.size == self.schema.n_f:
            values = values.reshape(self.schema.shape)
        if values.shape != self.schema.shape:
            raise SchemaError(
                f"values shape {values.shape} does not match schema {self.schema.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise SchemaError("data vector has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class Ensemble:
    """Ordered realizations sharing one schema, stored as ``(n_r, n_qoi, n_t)``.

    A single-member ensemble is allowed; operations that need a spread
    (covariances, centring) check ``n_r >= 2`` themselves.
    """

    schema: DataSchema
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 2 and values.shape[1] == self.schema.n_f:
            values = values.reshape((-1, *self.schema.shape))
        if values.ndim != 3 or values.shape[1:] != self.schema.shape:
            raise SchemaError(
                f"ensemble shape {values.shape} does not match schema {self.schema.shape}"
            )
        if values.shape[0] < 1:
            raise SchemaError("ensemble is empty")
        if not np.all(np.isfinite(values)):
            raise SchemaError("ensemble has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_members(cls, members: Sequence[DataVector]) -> "Ensemble":
        if not members:
            raise SchemaError("ensemble is empty")
        schema = members[0].schema
        if any(m.schema != schema for m in members):
            raise SchemaError("members do not share a schema")
        return cls(schema, np.stack([m.values for m in members]))

    @property
    def n_r(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.n_r

    def __getitem__(self, i: int) -> DataVector:
        return DataVector(self.schema, self.values[i])

    def members(self) -> list[DataVector]:
        return [self[i] for i in range(self.n_r)]

    def flat(self) -> np.ndarray:
        """Members as rows of an ``(n_r, n_f)`` matrix."""
        return self.values.reshape(self.n_r, -1)

    def quantity(self, name: str) -> np.ndarray:
        """``(n_r, n_t)`` series of one quantity."""
        return self.values[:, self.schema.quantity_index(name), :]

    def subset(self, indices) -> "Ensemble":
        return Ensemble(self.schema, self.values[np.asarray(indices, dtype=int)])


@dataclass(frozen=True)
class ObservationSet:
    """Observed entries, values and independent Gaussian error std devs.

    ``entries`` holds ``(quantity index, time index)`` pairs. Zero error
    std is accepted here (noise-free observations); samplers that need
    ``C_D^{-1}`` reject it.
    """

    entries: np.ndarray
    values: np.ndarray
    error_std: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.int64).reshape(-1, 2)
        values = np.array(self.values, dtype=float).reshape(-1)
        std = np.array(self.error_std, dtype=float).reshape(-1)
        if not (len(entries) == len(values) == len(std)):
            raise SchemaError("entries, values and error_std must have equal length")
        if np.any(std < 0) or not np.all(np.isfinite(std)):
            raise SchemaError("error_std must be finite and nonnegative")
        if len({tuple(e) for e in entries.tolist()}) != len(entries):
            raise SchemaError("observation entries must be unique")
        for arr in (entries, values, std):
            arr.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "error_std", std)

    @property
    def n_hm(self) -> int:
        return len(self.values)

    @property
    def variance(self) -> np.ndarray:
        """Diagonal of ``C_D``."""
        return self.error_std**2

    def cov(self) -> np.ndarray:
        return np.diag(self.variance)

    def flat_indices(self, schema: DataSchema) -> np.ndarray:
        """Flattened positions of the observed entries for ``schema``."""
        if self.n_hm == 0:
            return np.zeros(0, dtype=np.int64)
        q, t = self.entries[:, 0], self.entries[:, 1]
        if np.any(q < 0) or np.any(q >= schema.n_qoi) or np.any(t < 0) or np.any(t >= schema.n_t):
            raise SchemaError("observation entry out of range for schema")
        return q * schema.n_t + t

    def require_positive_error(self) -> None:
        if np.any(self.error_std <= 0):
            raise SchemaError("error_std must be strictly positive for this operation")

    def mismatch(self, d_hm: np.ndarray) -> np.ndarray:
        """``0.5 (Hd - d_obs)^T C_D^{-1} (Hd - d_obs)`` per row of ``d_hm``."""
        r = (np.atleast_2d(d_hm) - self.values) / self.error_std
        return 0.5 * np.sum(r * r, axis=1)


def select_hm(d, obs: ObservationSet) -> np.ndarray:
    """Apply the selection matrix ``H``.

    ``d`` may be a :class:`DataVector`, an :class:`Ensemble`, or a raw array
    whose last two axes are ``(n_qoi, n_t)``. The leading axes are kept.
    """
    if isinstance(d, (DataVector, Ensemble)):
        values = d.values
    else:
        values = np.asarray(d, dtype=float)
    if values.ndim < 2:
        raise SchemaError("select_hm needs at least a (n_qoi, n_t) array")
    n_qoi, n_t = values.shape[-2:]
    if obs.n_hm == 0:
        return np.zeros(values.shape[:-2] + (0,))
    q, t = obs.entries[:, 0], obs.entries[:, 1]
    if np.any(q >= n_qoi) or np.any(t >= n_t) or np.any(q < 0) or np.any(t < 0):
        raise SchemaError("observation entry out of range for schema")
    return values[..., q, t]


def perturb_observations(obs: ObservationSet, rng: np.random.Generator) -> np.ndarray:
    """Draw one realization of ``N(d_obs, C_D)``."""
    return obs.values + obs.error_std * rng.standard_normal(obs.n_hm)


def ensemble_mean(e: Ensemble) -> DataVector:
    return DataVector(e.schema, e.values.mean(axis=0))


def centered_data_matrix(e: Ensemble) -> np.ndarray:
    """``D = [d_1 - mean, ..., d_N - mean] / sqrt(N - 1)``, shape ``(n_f, n_r)``."""
    if e.n_r < 2:
        raise SchemaError("centered data matrix needs at least two members")
    x = e.flat()
    return (x - x.mean(axis=0)).T / np.sqrt(e.n_r - 1)
