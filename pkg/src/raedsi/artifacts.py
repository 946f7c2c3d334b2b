"""Plain-text persistence for ensembles, observations and fitted parameterizations.

All floats are written with 17 significant digits so a write/read round
trip is exact and reruns produce byte-identical files.

Layouts
-------
Ensemble CSV
    header ``quantity,time,member_0,...``; one row per (quantity, time)
    in flattening order.
Observation JSON
    ``{"entries": [[q, t], ...], "values": [...], "error_std": [...]}``.
Latent CSV
    header ``member,xi_0,...``; one row per member.
PCA basis
    ``<stem>.json`` holds the schema, ``n_l`` and all singular values;
    ``<stem>.csv`` has one row per flattened component with columns
    ``mean,phi_0,...``. With a histogram transformation, the JSON also
    holds the per-component Gaussian std and ``<stem>_ht.csv`` holds the
    sorted prior values, one row per component.
RAE weights
    ``<stem>.json`` holds the format version, sizes, normalization bounds
    and the ordered parameter list with shapes; ``<stem>.csv`` has columns
    ``parameter,value`` with each array flattened row-major.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import DataSchema, Ensemble, ObservationSet, SchemaError
from .pcaht import MarginalCdfTable, PcaBasis, PcaParameterization
from .rae import RaeWeights
from .rs import RsResult

RAE_FORMAT = "raedsi-rae-weights"
RAE_FORMAT_VERSION = 1
PCA_FORMAT = "raedsi-pca-basis"
PCA_FORMAT_VERSION = 1


class MissingArtifactError(FileNotFoundError):
    """A required input file does not exist."""


def fmt(x) -> str:
    return format(float(x), ".17g")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


def _open_write(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


def write_json(path, obj) -> None:
    with _open_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(_require(path)) as fh:
        return json.load(fh)


def write_ensemble_csv(path, e: Ensemble) -> None:
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "time"] + [f"member_{i}" for i in range(e.n_r)])
        flat = e.flat()
        k = 0
        for qname in e.schema.quantity_names:
            for t in e.schema.times:
                w.writerow([qname, fmt(t)] + [fmt(v) for v in flat[:, k]])
                k += 1


def read_ensemble_csv(path) -> Ensemble:
    with open(_require(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["quantity", "time"]:
        raise SchemaError(f"{path}: not an ensemble CSV")
    n_r = len(rows[0]) - 2
    names: list[str] = []
    times: dict[str, list[float]] = {}
    data = np.empty((len(rows) - 1, n_r))
    for i, row in enumerate(rows[1:]):
        if len(row) != n_r + 2:
            raise SchemaError(f"{path}: row {i + 2} has {len(row)} fields, expected {n_r + 2}")
        if row[0] not in times:
            names.append(row[0])
            times[row[0]] = []
        times[row[0]].append(float(row[1]))
        data[i] = [float(v) for v in row[2:]]
    grid = times[names[0]]
    if any(times[n] != grid for n in names):
        raise SchemaError(f"{path}: quantities do not share one time grid")
    schema = DataSchema(tuple(names), tuple(grid))
    return Ensemble(schema, data.T)


def write_observations(path, obs: ObservationSet) -> None:
    write_json(path, {
        "entries": obs.entries.tolist(),
        "values": [float(v) for v in obs.values],
        "error_std": [float(v) for v in obs.error_std],
    })


def read_observations(path) -> ObservationSet:
    d = read_json(path)
    try:
        return ObservationSet(d["entries"], d["values"], d["error_std"])
    except KeyError as exc:
        raise SchemaError(f"{path}: missing field {exc}") from None


def write_latent_csv(path, xi: np.ndarray) -> None:
    xi = np.atleast_2d(xi)
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member"] + [f"xi_{j}" for j in range(xi.shape[1])])
        for i, row in enumerate(xi):
            w.writerow([i] + [fmt(v) for v in row])


def read_latent_csv(path) -> np.ndarray:
    with open(_require(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "member":
        raise SchemaError(f"{path}: not a latent CSV")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(rows) - 1, len(rows[0]) - 1)


def _schema_dict(schema: DataSchema) -> dict:
    return {"quantity_names": list(schema.quantity_names), "times": list(schema.times)}


def _schema_from(d: dict) -> DataSchema:
    return DataSchema(tuple(d["quantity_names"]), tuple(d["times"]))


def _write_matrix(path, header, columns) -> None:
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.column_stack(columns):
            w.writerow([fmt(v) for v in row])


def _read_matrix(path) -> tuple[list[str], np.ndarray]:
    with open(_require(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def save_pca(stem, param: PcaParameterization) -> None:
    stem = Path(stem)
    b = param.basis
    meta = {
        "format": PCA_FORMAT,
        "version": PCA_FORMAT_VERSION,
        "schema": _schema_dict(b.schema),
        "n_latent": b.n_l,
        "singular_values": [float(s) for s in b.singular_values],
        "histogram_transform": param.table is not None,
    }
    if param.table is not None:
        meta["ht_std"] = [float(s) for s in param.table.std]
        t = param.table.sorted_values
        _write_matrix(stem.with_name(stem.name + "_ht.csv"), [f"order_{j}" for j in range(t.shape[1])], [t])
    write_json(stem.with_suffix(".json"), meta)
    _write_matrix(stem.with_suffix(".csv"), ["mean"] + [f"phi_{j}" for j in range(b.n_l)],
                  [b.mean, b.phi])


def load_pca(stem) -> PcaParameterization:
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    if meta.get("format") != PCA_FORMAT or meta.get("version") != PCA_FORMAT_VERSION:
        raise SchemaError(f"{stem}: unsupported PCA basis format")
    schema = _schema_from(meta["schema"])
    _, m = _read_matrix(stem.with_suffix(".csv"))
    basis = PcaBasis(schema, m[:, 0].copy(), m[:, 1:].copy(), np.array(meta["singular_values"]),
                     int(meta["n_latent"]))
    table = None
    if meta["histogram_transform"]:
        _, t = _read_matrix(stem.with_name(stem.name + "_ht.csv"))
        table = MarginalCdfTable(schema, t, basis.mean.copy(), np.array(meta["ht_std"]))
    return PcaParameterization(basis, table)


def save_rae(stem, w: RaeWeights, hyperparameters: dict | None = None, schema: DataSchema | None = None) -> None:
    stem = Path(stem)
    names = w.names()
    meta = {
        "format": RAE_FORMAT,
        "version": RAE_FORMAT_VERSION,
        "n_qoi": w.n_qoi,
        "n_t": w.n_t,
        "n_hidden": w.n_h,
        "n_latent": w.n_l,
        "norm_min": [float(v) for v in w.norm_min],
        "norm_max": [float(v) for v in w.norm_max],
        "parameters": [{"name": k, "shape": list(w.params[k].shape)} for k in names],
        "hyperparameters": hyperparameters or {},
    }
    if schema is not None:
        meta["schema"] = _schema_dict(schema)
    write_json(stem.with_suffix(".json"), meta)
    with _open_write(stem.with_suffix(".csv")) as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["parameter", "value"])
        for k in names:
            for v in w.params[k].ravel():
                wr.writerow([k, fmt(v)])


def load_rae(stem) -> tuple[RaeWeights, DataSchema | None]:
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    if meta.get("format") != RAE_FORMAT:
        raise SchemaError(f"{stem}: not an RAE weights file")
    if meta.get("version") != RAE_FORMAT_VERSION:
        raise SchemaError(f"{stem}: unsupported RAE weights version {meta.get('version')}")
    with open(_require(stem.with_suffix(".csv")), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    values: dict[str, list[float]] = {}
    for name, v in rows:
        values.setdefault(name, []).append(float(v))
    params = {}
    for p in meta["parameters"]:
        arr = np.array(values.get(p["name"], []))
        if arr.size != int(np.prod(p["shape"])):
            raise SchemaError(f"{stem}: parameter {p['name']} has {arr.size} values")
        params[p["name"]] = arr.reshape(p["shape"])
    w = RaeWeights(params, meta["n_qoi"], meta["n_t"], meta["n_hidden"], meta["n_latent"],
                   np.array(meta["norm_min"]), np.array(meta["norm_max"]))
    schema = _schema_from(meta["schema"]) if "schema" in meta else None
    return w, schema


def write_rs_result(path, r: RsResult) -> None:
    write_json(path, {
        "accepted": r.accepted.tolist(),
        "n_accepted": r.n_accepted,
        "n_proposals": r.n_proposals,
        "mismatch_min": float(r.mismatch_min),
        "acceptance_rate": r.n_accepted / r.n_proposals,
        "mean_acceptance_probability": float(r.probability.mean()),
    })
