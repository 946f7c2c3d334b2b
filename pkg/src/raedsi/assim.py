"""Posterior sampling: ESMDA on data vectors or latent variables, and RML.

Observation noise for ESMDA is keyed by ``(seed, iteration, member id)``:
member ``j`` always receives row ``j`` of the iteration's noise matrix, so
reordering the prior reorders the posterior in the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .core import DataSchema, Ensemble, NumericalError, ObservationSet, SchemaError, make_rng, select_hm

log = logging.getLogger(__name__)


def default_alphas(n_a: int) -> list[float]:
    """Uniform inflation schedule ``alpha_k = N_a``."""
    if n_a < 1:
        raise ValueError("need at least one assimilation")
    return [float(n_a)] * n_a


@dataclass
class EsmdaConfig:
    alphas: list
    seed: int = 0

    def __post_init__(self):
        self.alphas = [float(a) for a in self.alphas]
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ValueError("alphas must be a nonempty list of positive values")
        if abs(sum(1.0 / a for a in self.alphas) - 1.0) > 1e-10:
            raise ValueError(f"sum of 1/alpha must be 1, got {sum(1.0 / a for a in self.alphas)}")

    @classmethod
    def uniform(cls, n_a: int, seed: int = 0) -> "EsmdaConfig":
        return cls(default_alphas(n_a), seed)

    @property
    def n_a(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class LatentEnsemble:
    values: np.ndarray  # (n_r, n_l)
    tag: str

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise SchemaError("latent ensemble must be a 2-D array")
        if not self.tag:
            raise ValueError("latent ensemble needs a parameterization tag")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_r(self) -> int:
        return self.values.shape[0]

    @property
    def n_l(self) -> int:
        return self.values.shape[1]


@dataclass
class EsmdaResult:
    posterior: Ensemble
    latent: LatentEnsemble | None = None
    # mean data mismatch entering iterations 1..N_a, then of the posterior
    mismatch: list = field(default_factory=list)


def cross_cov(A, B) -> np.ndarray:
    """Sample cross-covariance of paired rows ``a_i``, ``b_i``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if len(A) != len(B):
        raise ValueError("cross_cov needs equally many samples")
    if len(A) < 2:
        raise ValueError("cross_cov needs at least two samples")
    dA = A - A.mean(axis=0)
    dB = B - B.mean(axis=0)
    return dA.T @ dB / (len(A) - 1)


def _cho_factor_with_jitter(S: np.ndarray):
    try:
        return scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(S) / len(S)
        try:
            return scipy.linalg.cho_factor(S + jitter * np.eye(len(S)), lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"innovation covariance not positive definite (condition {np.linalg.cond(S):.3e})"
            ) from exc


def _iteration_noise(seed: int, k: int, member_ids: np.ndarray, n_hm: int) -> np.ndarray:
    """Standard-normal rows for each member id at iteration ``k``."""
    rng = make_rng(seed, 0x45534D, k)
    z = rng.standard_normal((int(member_ids.max()) + 1, n_hm))
    return z[member_ids]


def esmda_step(X: np.ndarray, Y: np.ndarray, obs: ObservationSet, alpha: float,
               noise: np.ndarray) -> np.ndarray:
    """One ensemble-smoother update of rows ``X`` given predicted data ``Y``.

    ``noise`` is standard normal with the shape of ``Y``; it is scaled by
    ``sqrt(alpha) * error_std``.
    """
    n = len(X)
    dX = X - X.mean(axis=0)
    dY = Y - Y.mean(axis=0)
    C_xy = dX.T @ dY / (n - 1)
    S = dY.T @ dY / (n - 1) + alpha * np.diag(obs.variance)
    innov = obs.values + np.sqrt(alpha) * obs.error_std * noise - Y
    sol = scipy.linalg.cho_solve(_cho_factor_with_jitter(S), innov.T)
    return X + (C_xy @ sol).T


def _member_ids(member_ids, n):
    ids = np.arange(n) if member_ids is None else np.asarray(member_ids, dtype=np.int64)
    if ids.shape != (n,) or len(np.unique(ids)) != n or ids.min() < 0:
        raise ValueError("member_ids must be unique nonnegative integers, one per member")
    return ids


def esmda_update_data(e: Ensemble, obs: ObservationSet, cfg: EsmdaConfig,
                      member_ids=None) -> EsmdaResult:
    """ESMDA directly on data vectors (no parameterization, no truncation)."""
    obs.require_positive_error()
    if e.n_r < 2:
        raise SchemaError("ESMDA needs at least two members")
    ids = _member_ids(member_ids, e.n_r)
    idx = obs.flat_indices(e.schema)
    X = e.flat().copy()
    mismatch = []
    for k, alpha in enumerate(cfg.alphas):
        Y = X[:, idx]
        mismatch.append(float(obs.mismatch(Y).mean()))
        X = esmda_step(X, Y, obs, alpha, _iteration_noise(cfg.seed, k, ids, obs.n_hm))
    mismatch.append(float(obs.mismatch(X[:, idx]).mean()))
    return EsmdaResult(Ensemble(e.schema, X), None, mismatch)


def _decoder(decode, schema):
    """Normalise a parameterization object or a plain callable to (decode, schema)."""
    if hasattr(decode, "decode"):
        return decode.decode, schema or getattr(decode, "schema", None)
    if callable(decode):
        return decode, schema
    raise TypeError("decode must be callable or expose .decode")


def _checked_decode(fn: Callable, xi: np.ndarray, schema: DataSchema) -> np.ndarray:
    out = np.asarray(fn(xi), dtype=float).reshape(len(xi), *schema.shape)
    bad = np.flatnonzero(~np.all(np.isfinite(out.reshape(len(xi), -1)), axis=1))
    if bad.size:
        raise NumericalError(f"decoder produced non-finite output for members {bad[:10].tolist()}")
    return out


def esmda_update_latent(le: LatentEnsemble, decode, obs: ObservationSet, cfg: EsmdaConfig,
                        schema: DataSchema | None = None, member_ids=None) -> EsmdaResult:
    """ESMDA on latent variables, predicting data through ``decode`` each iteration."""
    obs.require_positive_error()
    fn, schema = _decoder(decode, schema)
    if schema is None:
        raise ValueError("a schema is required to decode latent variables")
    if le.n_r < 2:
        raise SchemaError("ESMDA needs at least two members")
    ids = _member_ids(member_ids, le.n_r)
    xi = le.values.copy()
    mismatch = []
    for k, alpha in enumerate(cfg.alphas):
        Y = select_hm(_checked_decode(fn, xi, schema), obs)
        mismatch.append(float(obs.mismatch(Y).mean()))
        xi = esmda_step(xi, Y, obs, alpha, _iteration_noise(cfg.seed, k, ids, obs.n_hm))
    d = _checked_decode(fn, xi, schema)
    mismatch.append(float(obs.mismatch(select_hm(d, obs)).mean()))
    return EsmdaResult(Ensemble(schema, d), LatentEnsemble(xi, le.tag), mismatch)


def truncate(e: Ensemble, bounds=None) -> Ensemble:
    """Clamp values into per-quantity ``(lower, upper)`` bounds.

    ``bounds`` maps quantity names to pairs; missing quantities (or
    ``bounds=None``) use ``(0, inf)``.
    """
    bounds = bounds or {}
    lo = np.zeros(e.schema.n_qoi)
    hi = np.full(e.schema.n_qoi, np.inf)
    for name, (a, b) in bounds.items():
        q = e.schema.quantity_index(name)
        if a > b:
            raise ValueError(f"lower bound exceeds upper bound for {name}")
        lo[q], hi[q] = a, b
    return Ensemble(e.schema, np.clip(e.values, lo[None, :, None], hi[None, :, None]))


# ---------------------------------------------------------------------------
# Randomized maximum likelihood
# ---------------------------------------------------------------------------


@dataclass
class RmlConfig:
    max_iter: int = 1000
    fd_step: float = 1e-4
    grad_tol: float = 1e-6
    lr: float = 0.1
    lr_decay: float = 0.998
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _selected_fn(decode, obs, schema):
    if hasattr(decode, "decode_selected"):
        return lambda x: decode.decode_selected(x, obs)
    fn, schema = _decoder(decode, schema)
    if schema is None:
        return lambda x: select_hm(np.asarray(fn(x)), obs)
    return lambda x: select_hm(_checked_decode(fn, x, schema), obs)


def _rml_optimize(sel: Callable, obs: ObservationSet, d_star: np.ndarray, xi_star: np.ndarray,
                  cfg: RmlConfig) -> np.ndarray:
    """Minimise all RML objectives in lockstep; rows are independent problems."""
    S, L = xi_star.shape
    sigma = obs.error_std
    h = cfg.fd_step
    eye = np.eye(L)

    def data_term(pts, dstar):
        r = (sel(pts) - dstar) / sigma
        return 0.5 * np.sum(r * r, axis=-1)

    def objective(x, active):
        return data_term(x, d_star[active]) + 0.5 * np.sum((x - xi_star[active]) ** 2, axis=1)

    x = xi_star.copy()
    best = x.copy()
    best_f = objective(x, np.arange(S))
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    active = np.arange(S)
    lr = cfg.lr
    for it in range(1, cfg.max_iter + 1):
        xa = x[active]
        if obs.n_hm:
            pts = np.concatenate([xa[:, None, :] + h * eye, xa[:, None, :] - h * eye], axis=1)
            dstar = np.repeat(d_star[active], 2 * L, axis=0)
            f = data_term(pts.reshape(-1, L), dstar).reshape(len(active), 2 * L)
            grad = (f[:, :L] - f[:, L:]) / (2 * h)
        else:
            grad = np.zeros_like(xa)
        grad += xa - xi_star[active]
        if not np.all(np.isfinite(grad)):
            bad = active[~np.all(np.isfinite(grad), axis=1)]
            raise NumericalError(
                f"non-finite RML gradient at iteration {it} for samples {bad[:5].tolist()}; "
                f"iterate {x[bad[0]].tolist()}"
            )
        done = np.linalg.norm(grad, axis=1) < cfg.grad_tol
        keep = ~done
        active, grad = active[keep], grad[keep]
        if active.size == 0:
            break
        ma = cfg.beta1 * m[active] + (1 - cfg.beta1) * grad
        va = cfg.beta2 * v[active] + (1 - cfg.beta2) * grad * grad
        m[active], v[active] = ma, va
        step = lr * (ma / (1 - cfg.beta1**it)) / (np.sqrt(va / (1 - cfg.beta2**it)) + cfg.eps)
        x[active] -= step
        fx = objective(x[active], active)
        if not np.all(np.isfinite(fx)):
            bad = active[~np.isfinite(fx)]
            raise NumericalError(
                f"non-finite RML objective at iteration {it} for samples {bad[:5].tolist()}; "
                f"iterate {x[bad[0]].tolist()}"
            )
        better = fx < best_f[active]
        best[active[better]] = x[active[better]]
        best_f[active[better]] = fx[better]
        lr *= cfg.lr_decay
    return best


def _rml_draws(obs: ObservationSet, n_l: int, rng: np.random.Generator):
    d_star = obs.values + obs.error_std * rng.standard_normal(obs.n_hm)
    xi_star = rng.standard_normal(n_l)
    return d_star, xi_star


def rml_sample(le_prior: LatentEnsemble, decode, obs: ObservationSet, rng: np.random.Generator,
               opt_config: RmlConfig | None = None, schema: DataSchema | None = None) -> np.ndarray:
    """One RML posterior latent sample (the best iterate found).

    Draws ``d_obs*`` then ``xi*`` from ``rng`` and minimises the perturbed
    objective with ADAM on central finite-difference gradients, starting
    at ``xi*``.
    """
    obs.require_positive_error()
    cfg = opt_config or RmlConfig()
    d_star, xi_star = _rml_draws(obs, le_prior.n_l, rng)
    sel = _selected_fn(decode, obs, schema)
    return _rml_optimize(sel, obs, d_star[None], xi_star[None], cfg)[0]


def rml_posterior(decode, n_latent: int, obs: ObservationSet, n_samples: int, seed: int,
                  opt_config: RmlConfig | None = None, schema: DataSchema | None = None,
                  tag: str = "PCA+HT") -> EsmdaResult:
    """``n_samples`` RML samples; sample ``i`` draws from ``make_rng(seed, i)``.

    The optimisations run in lockstep but each row is an independent problem,
    so sample ``i`` equals ``rml_sample(..., make_rng(seed, i))``.
    """
    obs.require_positive_error()
    cfg = opt_config or RmlConfig()
    draws = [_rml_draws(obs, n_latent, make_rng(seed, i)) for i in range(n_samples)]
    d_star = np.array([d for d, _ in draws]).reshape(n_samples, obs.n_hm)
    xi_star = np.array([x for _, x in draws])
    sel = _selected_fn(decode, obs, schema)
    xi = _rml_optimize(sel, obs, d_star, xi_star, cfg)
    fn, schema = _decoder(decode, schema)
    d = _checked_decode(fn, xi, schema)
    mismatch = [float(obs.mismatch(sel(xi_star)).mean()), float(obs.mismatch(select_hm(d, obs)).mean())]
    return EsmdaResult(Ensemble(schema, d), LatentEnsemble(xi, tag), mismatch)
