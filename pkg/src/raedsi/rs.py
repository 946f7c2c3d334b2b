"""Rejection sampling over a pre-simulated prior ensemble.

Member ``i`` is accepted with probability ``exp(-(O_i - O_min))``. Each
member owns one uniform draw, indexed by its id, so a sub-ensemble that
keeps the same ids (and the minimum-mismatch member) re-accepts the same
members.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import DataSchema, Ensemble, ObservationSet, SchemaError, select_hm


class NoSamplesAccepted(RuntimeError):
    """Raised by callers that need a nonempty accepted set."""


@dataclass(frozen=True)
class RsResult:
    accepted: np.ndarray  # member indices into the proposal ensemble
    probability: np.ndarray  # acceptance probability per member
    n_proposals: int
    mismatch_min: float

    def __post_init__(self):
        acc = np.asarray(self.accepted, dtype=np.int64)
        prob = np.asarray(self.probability, dtype=float)
        if len(np.unique(acc)) != len(acc):
            raise ValueError("accepted indices must be unique")
        if acc.size and (acc.min() < 0 or acc.max() >= self.n_proposals):
            raise ValueError("accepted index out of range")
        if np.any(prob < 0) or np.any(prob > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "accepted", acc)
        object.__setattr__(self, "probability", prob)

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.size)

    def require_accepted(self) -> None:
        if self.n_accepted == 0:
            raise NoSamplesAccepted(
                "no samples accepted; use a larger prior ensemble or inflate the observation error"
            )


def acceptance_probability(mismatch: np.ndarray) -> np.ndarray:
    m = np.asarray(mismatch, dtype=float)
    return np.exp(-(m - m.min()))


def rejection_sample_hm(d_hm: np.ndarray, obs: ObservationSet, rng: np.random.Generator,
                        member_ids=None) -> RsResult:
    """Rejection sampling given only the observed values ``(N, n_hm)`` of each member."""
    obs.require_positive_error()
    d_hm = np.asarray(d_hm, dtype=float).reshape(-1, obs.n_hm)
    n = len(d_hm)
    if n < 1:
        raise SchemaError("rejection sampling needs at least one member")
    ids = np.arange(n) if member_ids is None else np.asarray(member_ids, dtype=np.int64)
    if ids.shape != (n,) or len(np.unique(ids)) != n or ids.min() < 0:
        raise ValueError("member_ids must be unique nonnegative integers, one per member")
    mism = obs.mismatch(d_hm) if obs.n_hm else np.zeros(n)
    prob = acceptance_probability(mism)
    u = rng.random(int(ids.max()) + 1)[ids]
    accepted = np.flatnonzero(u < prob)
    return RsResult(accepted, prob, n, float(mism.min()))


def rejection_sample(e: Ensemble, obs: ObservationSet, rng: np.random.Generator,
                     member_ids=None) -> RsResult:
    return rejection_sample_hm(select_hm(e, obs), obs, rng, member_ids)


def rejection_sample_stream(stream: Callable[[], Iterable], schema: DataSchema,
                            obs: ObservationSet, rng: np.random.Generator):
    """Rejection sampling over a prior too large to hold in memory.

    ``stream()`` must return a fresh iterator of ``(start, values)`` chunks
    with ``values`` shaped ``(m, n_qoi, n_t)``, and yield the same sequence
    every call. Two passes are made: one to collect observed values, one to
    gather the accepted full data vectors.

    Returns ``(RsResult, accepted Ensemble or None)``.
    """
    idx = obs.flat_indices(schema)
    parts = []
    for start, values in stream():
        parts.append(values.reshape(len(values), -1)[:, idx])
    result = rejection_sample_hm(np.concatenate(parts), obs, rng)
    if result.n_accepted == 0:
        return result, None
    keep = []
    for start, values in stream():
        sel = result.accepted[(result.accepted >= start) & (result.accepted < start + len(values))]
        keep.append(values[sel - start])
    return result, Ensemble(schema, np.concatenate(keep))
