"""Synthetic forward models standing in for a reservoir simulator.

Two models are provided:

* a mass-conserving *tank* surrogate producing injection / production
  rate series with a logistic water-cut breakthrough per producer, and
* a linear-Gaussian model ``d = G m`` whose data posterior is available in
  closed form (used as an oracle for the samplers).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.special

from .core import DataSchema, DataVector, Ensemble, NumericalError, ObservationSet, SchemaError


class ConfigError(ValueError):
    """Invalid configuration values."""


# ---------------------------------------------------------------------------
# Tank surrogate
# ---------------------------------------------------------------------------


def tank_schema(n_inj: int = 2, n_prod: int = 3, times=None) -> DataSchema:
    """Schema ordered ``[WIR_I1..WIR_In, WPR_P1, OPR_P1, WPR_P2, OPR_P2, ...]``.

    The default grid is 30..3000 days every 30 days (100 steps).
    """
    if times is None:
        times = np.arange(30.0, 3000.0 + 1e-9, 30.0)
    names = [f"WIR_I{i + 1}" for i in range(n_inj)]
    for j in range(n_prod):
        names += [f"WPR_P{j + 1}", f"OPR_P{j + 1}"]
    return DataSchema(tuple(names), tuple(float(t) for t in times))


@dataclass(frozen=True)
class TankModelParams:
    """Parameters of one tank realization.

    ``allocation[j, i]`` is the fraction of injector ``i``'s water that
    reaches producer ``j``; each column sums to one.
    """

    inj_plateau: np.ndarray  # (n_inj,) m3/day
    inj_transient: np.ndarray  # (n_inj,) in [0, 1)
    transient_time: float  # days
    allocation: np.ndarray  # (n_prod, n_inj)
    breakthrough: np.ndarray  # (n_prod,) days
    slope: np.ndarray  # (n_prod,) days
    wc_initial: np.ndarray  # (n_prod,)
    wc_max: np.ndarray  # (n_prod,)

    def __post_init__(self):
        for name in ("inj_plateau", "inj_transient", "allocation", "breakthrough",
                     "slope", "wc_initial", "wc_max"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        a, f = self.inj_plateau, self.allocation
        if f.shape != (self.n_prod, self.n_inj):
            raise ConfigError(f"allocation shape {f.shape} != ({self.n_prod}, {self.n_inj})")
        if np.any(a <= 0) or self.transient_time <= 0:
            raise ConfigError("plateau rates and transient time must be positive")
        if np.any(self.inj_transient < 0) or np.any(self.inj_transient >= 1):
            raise ConfigError("transient fractions must lie in [0, 1)")
        if np.any(f < 0) or not np.allclose(f.sum(axis=0), 1.0, rtol=0, atol=1e-12):
            raise ConfigError("allocation columns must be nonnegative and sum to 1")
        if np.any(self.breakthrough <= 0) or np.any(self.slope <= 0):
            raise ConfigError("breakthrough and slope must be positive")
        w0, wmax = self.wc_initial, self.wc_max
        if np.any(w0 < 0) or np.any(w0 >= wmax) or np.any(wmax > 1):
            raise ConfigError("need 0 <= wc_initial < wc_max <= 1")

    @property
    def n_inj(self) -> int:
        return self.inj_plateau.shape[0]

    @property
    def n_prod(self) -> int:
        return self.breakthrough.shape[0]


def _uniform_pair(value, name):
    lo, hi = (float(v) for v in value)
    if not hi > lo:
        raise ConfigError(f"{name}: need low < high, got {value}")
    return lo, hi


@dataclass
class TankPriorConfig:
    """Prior distributions of the tank parameters.

    Plateau rates are log-normal; the allocation columns are Dirichlet;
    every other field is uniform on ``[low, high]``.
    """

    n_inj: int = 2
    n_prod: int = 3
    plateau_log_mean: float = float(np.log(500.0))
    plateau_log_std: float = 0.2
    transient: tuple = (0.3, 0.5)
    transient_time: tuple = (60.0, 100.0)
    dirichlet_concentration: float = 8.0
    # wide logistic ramps keep water cut rising over the whole horizon
    breakthrough: tuple = (600.0, 2400.0)
    slope: tuple = (500.0, 1000.0)
    wc_initial: tuple = (0.03, 0.06)
    wc_max: tuple = (0.6, 0.95)

    def validate(self) -> None:
        if self.n_inj < 1 or self.n_prod < 1:
            raise ConfigError("need at least one injector and one producer")
        if self.plateau_log_std <= 0:
            raise ConfigError("log-normal scale must be positive")
        if self.dirichlet_concentration <= 0:
            raise ConfigError("Dirichlet concentration must be positive")
        t_lo, t_hi = _uniform_pair(self.transient, "transient")
        if t_lo < 0 or t_hi >= 1:
            raise ConfigError("transient range must lie in [0, 1)")
        for name in ("transient_time", "breakthrough", "slope"):
            lo, _ = _uniform_pair(getattr(self, name), name)
            if lo <= 0:
                raise ConfigError(f"{name} must be positive")
        w_lo, w_hi = _uniform_pair(self.wc_initial, "wc_initial")
        m_lo, m_hi = _uniform_pair(self.wc_max, "wc_max")
        if w_lo < 0 or m_hi > 1 or w_hi >= m_lo:
            raise ConfigError("need 0 <= wc_initial < wc_max <= 1 over the whole range")

    def schema(self, times=None) -> DataSchema:
        return tank_schema(self.n_inj, self.n_prod, times)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TankPriorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown tank prior fields: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "TankPriorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sample_tank_arrays(cfg: TankPriorConfig, rng: np.random.Generator, n: int) -> dict:
    cfg.validate()
    ni, npr = cfg.n_inj, cfg.n_prod
    u = rng.uniform
    alloc = rng.dirichlet(np.full(npr, cfg.dirichlet_concentration), size=(n, ni))
    return dict(
        inj_plateau=rng.lognormal(cfg.plateau_log_mean, cfg.plateau_log_std, size=(n, ni)),
        inj_transient=u(*cfg.transient, size=(n, ni)),
        transient_time=u(*cfg.transient_time, size=n),
        allocation=np.swapaxes(alloc, 1, 2),
        breakthrough=u(*cfg.breakthrough, size=(n, npr)),
        slope=u(*cfg.slope, size=(n, npr)),
        wc_initial=u(*cfg.wc_initial, size=(n, npr)),
        wc_max=u(*cfg.wc_max, size=(n, npr)),
    )


def _params_at(arrays: dict, k: int) -> TankModelParams:
    p = {name: v[k] for name, v in arrays.items()}
    p["transient_time"] = float(p["transient_time"])
    return TankModelParams(**p)


def sample_tank_params(cfg: TankPriorConfig, rng: np.random.Generator) -> TankModelParams:
    return _params_at(_sample_tank_arrays(cfg, rng, 1), 0)


def _simulate_arrays(arrays: dict, times: np.ndarray) -> np.ndarray:
    """Vectorised tank simulation; returns ``(n, n_inj + 2 n_prod, n_t)``."""
    a = arrays["inj_plateau"][:, :, None]
    b = arrays["inj_transient"][:, :, None]
    t0 = np.asarray(arrays["transient_time"]).reshape(-1, 1, 1)
    wir = a * (1.0 - b * np.exp(-times / t0))
    liquid = np.einsum("nji,nit->njt", arrays["allocation"], wir)
    tau = arrays["breakthrough"][:, :, None]
    s = arrays["slope"][:, :, None]
    w0 = arrays["wc_initial"][:, :, None]
    wmax = arrays["wc_max"][:, :, None]
    # 1 / (1 + exp(-x)) evaluated without overflow
    wc = w0 + (wmax - w0) * scipy.special.expit((times - tau) / s)
    n, n_prod = liquid.shape[:2]
    prod = np.empty((n, 2 * n_prod, times.size))
    prod[:, 0::2] = liquid * wc
    prod[:, 1::2] = liquid - prod[:, 0::2]
    return np.concatenate([wir, prod], axis=1)


def _params_to_arrays(p: TankModelParams) -> dict:
    return {
        "inj_plateau": p.inj_plateau[None],
        "inj_transient": p.inj_transient[None],
        "transient_time": np.array([p.transient_time]),
        "allocation": p.allocation[None],
        "breakthrough": p.breakthrough[None],
        "slope": p.slope[None],
        "wc_initial": p.wc_initial[None],
        "wc_max": p.wc_max[None],
    }


def _check_tank_schema(schema: DataSchema, n_inj: int, n_prod: int) -> None:
    if schema.quantity_names != tank_schema(n_inj, n_prod, schema.times).quantity_names:
        raise SchemaError(
            f"schema quantities {schema.quantity_names} do not match a "
            f"{n_inj}-injector / {n_prod}-producer tank model"
        )


def simulate_tank(p: TankModelParams, schema: DataSchema) -> DataVector:
    _check_tank_schema(schema, p.n_inj, p.n_prod)
    values = _simulate_arrays(_params_to_arrays(p), schema.time_array())[0]
    return DataVector(schema, values)


def generate_tank_ensemble(
    cfg: TankPriorConfig,
    schema: DataSchema,
    n: int,
    rng: np.random.Generator,
    chunk: int = 20000,
) -> Ensemble:
    """Sample ``n`` parameter sets and simulate them."""
    _check_tank_schema(schema, cfg.n_inj, cfg.n_prod)
    out = np.empty((n, *schema.shape))
    times = schema.time_array()
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        out[start:start + m] = _simulate_arrays(_sample_tank_arrays(cfg, rng, m), times)
    return Ensemble(schema, out)


def tank_stream(
    cfg: TankPriorConfig,
    schema: DataSchema,
    n: int,
    rng: np.random.Generator,
    chunk: int = 20000,
):
    """Yield ``(start, full_chunk_values)`` for a large tank prior, chunk by chunk.

    The sampled sequence is identical to :func:`generate_tank_ensemble` for the
    same ``rng`` state and ``chunk``; callers keep only what they need so that
    a large prior never sits in memory at once.
    """
    _check_tank_schema(schema, cfg.n_inj, cfg.n_prod)
    times = schema.time_array()
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        vals = _simulate_arrays(_sample_tank_arrays(cfg, rng, m), times)
        yield start, vals


# ---------------------------------------------------------------------------
# Linear-Gaussian oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianModel:
    """``d = G m`` with ``m ~ N(prior_mean, prior_cov)``."""

    schema: DataSchema
    G: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        G = np.array(self.G, dtype=float)
        mu = np.array(self.prior_mean, dtype=float).reshape(-1)
        C = np.array(self.prior_cov, dtype=float)
        if G.shape != (self.schema.n_f, mu.size):
            raise SchemaError(f"G shape {G.shape} != ({self.schema.n_f}, {mu.size})")
        if C.shape != (mu.size, mu.size):
            raise SchemaError("prior covariance shape mismatch")
        if not np.allclose(C, C.T, rtol=0, atol=1e-12):
            raise ConfigError("prior covariance must be symmetric")
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("prior covariance is not positive definite") from exc
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "prior_mean", mu)
        object.__setattr__(self, "prior_cov", C)
        object.__setattr__(self, "_chol", L)

    @property
    def n_m(self) -> int:
        return self.prior_mean.size

    @property
    def prior_chol(self) -> np.ndarray:
        return self._chol

    def data_mean(self) -> np.ndarray:
        return self.G @ self.prior_mean

    def data_cov(self) -> np.ndarray:
        return self.G @ self.prior_cov @ self.G.T

    def sample_params(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.n_m))
        return self.prior_mean + z @ self._chol.T

    def sample_ensemble(self, rng: np.random.Generator, n: int) -> Ensemble:
        return Ensemble(self.schema, self.sample_params(rng, n) @ self.G.T)


class LinearGaussianParameterization:
    """Standard-normal latent map ``xi -> G (mu + L xi)`` with ``L L^T = C_m``.

    The latent prior N(0, I) maps exactly onto the model's data prior, so
    samplers that work in latent space can be checked against the analytic
    posterior.
    """

    tag = "LINEAR"

    def __init__(self, model: LinearGaussianModel):
        self.model = model
        self.schema = model.schema
        self._A = model.G @ model.prior_chol
        self._b = model.data_mean()

    @property
    def n_latent(self) -> int:
        return self.model.n_m

    def decode(self, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return (xi @ self._A.T + self._b).reshape(len(xi), *self.schema.shape)

    def decode_selected(self, xi, obs: ObservationSet) -> np.ndarray:
        idx = obs.flat_indices(self.schema)
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return xi @ self._A[idx].T + self._b[idx]


def simulate_linear(model: LinearGaussianModel, m) -> DataVector:
    m = np.asarray(m, dtype=float).reshape(-1)
    if m.size != model.n_m:
        raise SchemaError(f"parameter length {m.size} != {model.n_m}")
    return DataVector(model.schema, model.G @ m)


def analytic_linear_posterior(model: LinearGaussianModel, obs: ObservationSet):
    """Exact Gaussian posterior of the data vector given ``obs``.

    Returns ``(mean, cov)`` over the flattened data vector.
    """
    idx = obs.flat_indices(model.schema)
    mu = model.data_mean()
    C = model.data_cov()
    if obs.n_hm == 0:
        return mu, C
    S = C[np.ix_(idx, idx)] + np.diag(obs.variance)
    try:
        factor = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(S)
        raise NumericalError(f"innovation covariance is singular (condition number {cond:.3e})") from exc
    CHt = C[:, idx]
    mean = mu + CHt @ scipy.linalg.cho_solve(factor, obs.values - mu[idx])
    cov = C - CHt @ scipy.linalg.cho_solve(factor, CHt.T)
    return mean, 0.5 * (cov + cov.T)
