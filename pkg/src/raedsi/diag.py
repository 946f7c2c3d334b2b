"""Ensemble diagnostics and tidy plot-data tables.

Nothing here draws figures; the CSV writers emit long-format tables that
any plotting tool can consume. Column layouts:

* bands: ``method,quantity,time,prob,value``
* cross-plot: ``method,member,x,y``
* correlation series: ``method,time,covariance,correlation``
* D_M CDF: ``method,rank,dm,cdf``

Empty cells mark undefined values (zero variance, guarded division).
"""

from __future__ import annotations

import ast
import csv
import fnmatch
import operator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from .core import DataSchema, DataVector, Ensemble, NumericalError, SchemaError, centered_data_matrix
from .pcaht import energy_rank

DIVISION_EPS = 1e-12
FLOAT_FMT = ".15g"


def quantile_bands(e: Ensemble, probs) -> np.ndarray:
    """Per-(quantity, time) quantiles, shape ``(len(probs), n_qoi, n_t)``.

    Linear interpolation between order statistics at plotting positions
    ``(i - 1) / (N - 1)``.
    """
    probs = np.atleast_1d(np.asarray(probs, dtype=float))
    if np.any(probs <= 0) or np.any(probs >= 1):
        raise ValueError("probabilities must lie strictly between 0 and 1")
    if e.n_r < 2:
        raise SchemaError("quantile bands need at least two members")
    return np.quantile(e.values, probs, axis=0, method="linear")


# ---------------------------------------------------------------------------
# Derived quantities
# ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}


def _guarded_divide(num, den, policy):
    num, den = np.broadcast_arrays(np.asarray(num, dtype=float), np.asarray(den, dtype=float))
    small = np.abs(den) < DIVISION_EPS
    if policy == "clamp":
        safe = np.where(small, np.where(den < 0, -DIVISION_EPS, DIVISION_EPS), den)
        return num / safe
    if policy == "null":
        return np.where(small, np.nan, num / np.where(small, 1.0, den))
    raise ValueError(f"unknown division policy {policy!r}")


def evaluate_expression(e: Ensemble, expr: str, policy: str = "clamp") -> np.ndarray:
    """Evaluate ``expr`` per member and time step; returns ``(n_r, n_t)``.

    Names refer to quantities; ``sum('WPR_*')`` adds every quantity whose
    name matches the glob. Division by magnitudes below ``1e-12`` follows
    ``policy``: ``"clamp"`` divides by ``+-1e-12`` instead, ``"null"``
    yields NaN.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise SchemaError(f"cannot parse expression {expr!r}: {exc.msg}") from None
    names = e.schema.quantity_names

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Name):
            return e.quantity(node.id)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Div):
                return _guarded_divide(ev(node.left), ev(node.right), policy)
            if type(node.op) in _BINOPS:
                return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id == "sum"
                and len(node.args) == 1 and not node.keywords
                and isinstance(node.args[0], ast.Constant) and isinstance(node.args[0].value, str)):
            group = [n for n in names if fnmatch.fnmatchcase(n, node.args[0].value)]
            if not group:
                raise SchemaError(f"group {node.args[0].value!r} matches no quantity")
            return sum(e.quantity(n) for n in group)
        raise SchemaError(f"unsupported expression element: {ast.dump(node)}")

    out = np.asarray(ev(tree), dtype=float)
    return np.broadcast_to(out, (e.n_r, e.schema.n_t)).copy()


def builtin_expressions(schema: DataSchema) -> dict[str, str]:
    """Standard derived quantities available for a well-rate schema."""
    names = schema.quantity_names
    producers = sorted({n[4:] for n in names if n.startswith("WPR_")} & {n[4:] for n in names if n.startswith("OPR_")},
                       key=lambda p: names.index("WPR_" + p))
    out = {}
    for p in producers:
        out[f"LIQ_{p}"] = f"WPR_{p} + OPR_{p}"
        out[f"WCT_{p}"] = f"WPR_{p} / (WPR_{p} + OPR_{p})"
    if any(n.startswith("WIR_") for n in names):
        out["FIELD_INJ"] = "sum('WIR_*')"
    if producers:
        out["FIELD_WPR"] = "sum('WPR_*')"
        out["FIELD_OPR"] = "sum('OPR_*')"
        out["FIELD_LIQ"] = "sum('WPR_*') + sum('OPR_*')"
    if "FIELD_INJ" in out and producers:
        out["INJ_MINUS_PROD"] = "sum('WIR_*') - sum('WPR_*') - sum('OPR_*')"
    return out


def derived_quantity(e: Ensemble, expr, name: str | None = None) -> Ensemble:
    """Ensemble of derived quantities on the same time grid.

    ``expr`` is one expression string (named ``name``, or the expression
    itself), a built-in name such as ``"WCT_P1"``, or a mapping of output
    names to expressions. Guarded divisions are clamped; use
    :func:`evaluate_expression` with ``policy="null"`` to get null markers.
    """
    builtins = builtin_expressions(e.schema)
    if isinstance(expr, str):
        exprs = {name or expr: builtins.get(expr, expr)}
    else:
        exprs = {k: builtins.get(v, v) for k, v in dict(expr).items()}
    values = np.stack([evaluate_expression(e, x, "clamp") for x in exprs.values()], axis=1)
    return Ensemble(DataSchema(tuple(exprs), e.schema.times), values)


def _series(e: Ensemble, qty: str) -> np.ndarray:
    if qty in e.schema.quantity_names:
        return e.quantity(qty)
    return evaluate_expression(e, builtin_expressions(e.schema).get(qty, qty), "null")


def corr_cov_series(e: Ensemble, qty_a: str, qty_b: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-step sample covariance and Pearson correlation across members.

    Quantities may be names, built-ins or expressions. Correlation is NaN
    (the null marker) where either variance is zero.
    """
    if e.n_r < 2:
        raise SchemaError("covariance needs at least two members")
    a = _series(e, qty_a)
    b = _series(e, qty_b)
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    n = e.n_r - 1
    cov = np.sum(da * db, axis=0) / n
    va = np.sum(da * da, axis=0) / n
    vb = np.sum(db * db, axis=0) / n
    # variance at round-off level counts as zero
    tiny_a = (1e-12 * np.abs(a).max(axis=0)) ** 2
    tiny_b = (1e-12 * np.abs(b).max(axis=0)) ** 2
    defined = (va > tiny_a) & (vb > tiny_b)
    denom = np.sqrt(np.where(defined, va * vb, 1.0))
    corr = np.where(defined, np.clip(cov / denom, -1.0, 1.0), np.nan)
    return cov, corr


# ---------------------------------------------------------------------------
# Mahalanobis distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MahalanobisBasis:
    schema: DataSchema
    mean: np.ndarray  # (n_f,)
    u: np.ndarray  # (n_f, k)
    singular_values: np.ndarray  # (k,)
    k: int
    energy: float

    def covariance(self) -> np.ndarray:
        return (self.u * self.singular_values**2) @ self.u.T


def fit_mahalanobis(reference: Ensemble, energy: float = 0.99) -> MahalanobisBasis:
    """Energy-truncated SVD of the centred, ``1/sqrt(N-1)``-scaled reference."""
    D = centered_data_matrix(reference)
    U, s, _ = np.linalg.svd(D, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(reference.values).max()):
        raise NumericalError("degenerate reference ensemble: all members identical")
    k = energy_rank(s, energy)
    # a direction with zero variance cannot be whitened
    k = min(k, int(np.count_nonzero(s > s[0] * max(D.shape) * np.finfo(float).eps)))
    return MahalanobisBasis(reference.schema, reference.flat().mean(axis=0), U[:, :k].copy(),
                            s[:k].copy(), k, float(energy))


def _flat_values(schema: DataSchema, d) -> np.ndarray:
    if isinstance(d, (DataVector, Ensemble)):
        if d.schema != schema:
            raise SchemaError("data schema does not match the basis")
        v = d.values
    else:
        v = np.asarray(d, dtype=float)
    if v.shape[-2:] == schema.shape:
        return v.reshape(*v.shape[:-2], -1)
    if v.shape[-1] == schema.n_f:
        return v
    raise SchemaError("data does not match the basis schema")


def mahalanobis_distance(basis: MahalanobisBasis, d):
    """``|| Sigma^{-1} U^T (d - mean) ||``; a float for one vector, an array for a batch."""
    flat = _flat_values(basis.schema, d)
    omega = ((flat - basis.mean) @ basis.u) / basis.singular_values
    out = np.sqrt(np.sum(omega * omega, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic)


@dataclass
class DmComparison:
    reference: str
    distances: dict  # name -> sorted D_M values
    ks: dict  # name -> KS statistic against the reference


def dm_cdf_compare(basis: MahalanobisBasis, ensembles: dict, reference: str) -> DmComparison:
    """Sorted D_M values per named ensemble and KS of each against ``reference``."""
    if len(ensembles) < 2:
        raise ValueError("need at least two named ensembles")
    if reference not in ensembles:
        raise KeyError(f"reference {reference!r} not among the ensembles")
    dist = {name: np.sort(np.atleast_1d(mahalanobis_distance(basis, e))) for name, e in ensembles.items()}
    ks = {name: ks_statistic(v, dist[reference]) for name, v in dist.items()}
    return DmComparison(reference, dist, ks)


# ---------------------------------------------------------------------------
# Tidy CSV output
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    x = float(x)
    return "" if not np.isfinite(x) else format(x, FLOAT_FMT)


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_bands_csv(path, ensembles: dict, probs) -> None:
    rows = []
    for method, e in ensembles.items():
        bands = quantile_bands(e, probs)
        for q, qname in enumerate(e.schema.quantity_names):
            for t, time in enumerate(e.schema.times):
                for p, prob in enumerate(probs):
                    rows.append([method, qname, _fmt(time), _fmt(prob), _fmt(bands[p, q, t])])
    _write_rows(path, ["method", "quantity", "time", "prob", "value"], rows)


def write_crossplot_csv(path, ensembles: dict, qty: str, time_x: float, time_y: float) -> None:
    """Values of one quantity (name, built-in or expression) at two times, per member."""
    rows = []
    for method, e in ensembles.items():
        s = _series(e, qty)
        tx, ty = e.schema.time_index(time_x), e.schema.time_index(time_y)
        rows.extend([method, i, _fmt(s[i, tx]), _fmt(s[i, ty])] for i in range(e.n_r))
    _write_rows(path, ["method", "member", "x", "y"], rows)


def write_corr_csv(path, ensembles: dict, qty_a: str, qty_b: str) -> None:
    rows = []
    for method, e in ensembles.items():
        cov, corr = corr_cov_series(e, qty_a, qty_b)
        rows.extend([method, _fmt(t), _fmt(c), _fmt(r)] for t, c, r in zip(e.schema.times, cov, corr))
    _write_rows(path, ["method", "time", "covariance", "correlation"], rows)


def write_dm_cdf_csv(path, comparison: DmComparison) -> None:
    rows = []
    for method, dm in comparison.distances.items():
        n = len(dm)
        rows.extend([method, i + 1, _fmt(v), _fmt((i + 1) / n)] for i, v in enumerate(dm))
    _write_rows(path, ["method", "rank", "dm", "cdf"], rows)
