"""Config-driven pipeline stages: prior, training, assimilation, rejection sampling, evaluation.

Every stage reads its inputs from and writes its outputs to one artifact
directory, so stages can be rerun independently. No timestamps or host
details are written, which keeps the artifact tree byte-identical across
reruns of the same config.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np

from . import artifacts as art
from .assim import (EsmdaConfig, LatentEnsemble, RmlConfig, esmda_update_data, esmda_update_latent,
                    rml_posterior, truncate)
from .core import RNG_ALGORITHM, Ensemble, ObservationSet, make_rng, select_hm
from .diag import (builtin_expressions, dm_cdf_compare, evaluate_expression, fit_mahalanobis,
                   write_bands_csv, write_corr_csv, write_crossplot_csv, write_dm_cdf_csv)
from .pcaht import fit_pca_ht
from .rae import RaeConfig, RaeParameterization, train_rae
from .rs import rejection_sample_stream
from .synth import ConfigError, TankPriorConfig, generate_tank_ensemble, simulate_tank, sample_tank_params, tank_stream

log = logging.getLogger(__name__)

OUTPUT_ENV = "RAEDSI_OUTPUT_ROOT"
METHODS = ("rae+esmda", "pca_ht+rml", "esmda+truncation", "pca_ht+esmda")
STAGES = ("prior", "truth", "rae", "esmda", "rml", "rs")

DEFAULT_CONFIG = {
    "seed": 2024,
    "output_dir": "raedsi-run",
    "forward_model": {
        "type": "tank",
        "n_prior": 800,
        "prior": TankPriorConfig().to_dict(),
    },
    "observations": {
        "quantities": ["WIR_I1", "WIR_I2", "WPR_P3", "OPR_P3"],
        "times": [180.0, 360.0, 540.0],
        "error_fraction": 0.1,
    },
    "parameterization": {
        "pca_ht": {"n_latent": 31, "energy": None},
        "rae": {"n_hidden": 24, "n_latent": 31, "epochs": 500, "batch_size": 32,
                "lr": 1e-3, "clip_norm": 5.0},
    },
    "sampler": {
        "methods": ["rae+esmda", "pca_ht+rml", "esmda+truncation"],
        "n_a": 4,
        "rml": {"n_samples": 800, "max_iter": 1000, "fd_step": 1e-4, "grad_tol": 1e-6,
                "lr": 0.1, "lr_decay": 0.998},
    },
    "rs": {"n_prior": 100000},
    "diagnostics": {
        "probs": [0.1, 0.5, 0.9],
        "mahalanobis_energy": 0.99,
        "crossplot": {"quantity": "LIQ_P3", "times": [300.0, 1800.0]},
        "correlation": [["FIELD_INJ", "FIELD_LIQ"]],
        "balance_after": 500.0,
    },
    "seeds": {},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k not in ("prior", "seeds"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where)
        elif k == "prior":
            out[k] = TankPriorConfig.from_dict({**base[k], **v}).to_dict()
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Default config, updated by a JSON file and then by ``overrides``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def set_path(cfg: dict, dotted: str, value) -> dict:
    """Nested override dict for ``a.b.c=value``."""
    out: dict = {}
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


def validate_config(cfg: dict) -> None:
    fm = cfg["forward_model"]
    if fm["type"] != "tank":
        raise ConfigError(f"unsupported forward model {fm['type']!r}")
    prior = TankPriorConfig.from_dict(fm["prior"])
    schema = prior.schema()
    if int(fm["n_prior"]) < 2:
        raise ConfigError("n_prior must be at least 2")
    ob = cfg["observations"]
    for q in ob["quantities"]:
        if q not in schema.quantity_names:
            raise ConfigError(f"unknown observed quantity {q!r}")
    for t in ob["times"]:
        try:
            schema.time_index(t)
        except ValueError:
            raise ConfigError(f"observation time {t} is not a reporting step") from None
    if ob["error_fraction"] < 0:
        raise ConfigError("error_fraction must be nonnegative")
    for m in cfg["sampler"]["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if int(cfg["sampler"]["n_a"]) < 1:
        raise ConfigError("n_a must be at least 1")
    for k, v in cfg["seeds"].items():
        if k not in STAGES:
            raise ConfigError(f"unknown seed stage {k!r}")
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"seed for {k!r} must be a nonnegative integer")
    pca = cfg["parameterization"]["pca_ht"]
    if (pca["n_latent"] is None) == (pca["energy"] is None):
        raise ConfigError("pca_ht needs exactly one of n_latent or energy")
    try:
        RaeConfig(**cfg["parameterization"]["rae"]).validate()
        RmlConfig(**{k: v for k, v in cfg["sampler"]["rml"].items() if k != "n_samples"})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")


def stage_seed(cfg: dict, stage: str) -> int:
    """Explicit per-stage seed, or one derived from the global seed."""
    if stage in cfg["seeds"]:
        return int(cfg["seeds"][stage])
    ss = np.random.SeedSequence([int(cfg["seed"]), STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def effective_seeds(cfg: dict) -> dict:
    return {s: stage_seed(cfg, s) for s in STAGES}


def output_dir(cfg: dict) -> Path:
    import os

    root = os.environ.get(OUTPUT_ENV)
    return Path(root) if root else Path(cfg["output_dir"])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prior_config(cfg) -> TankPriorConfig:
    return TankPriorConfig.from_dict(cfg["forward_model"]["prior"])


def _observation_entries(cfg, schema):
    ob = cfg["observations"]
    return [(schema.quantity_index(q), schema.time_index(t)) for q in ob["quantities"] for t in ob["times"]]


def make_observations(truth: np.ndarray, entries, error_fraction: float, rng) -> ObservationSet:
    """Noisy observations with ``error_std = fraction * |true value|``."""
    skeleton = ObservationSet(entries, np.zeros(len(entries)), np.zeros(len(entries)))
    true_hm = select_hm(truth, skeleton)
    std = error_fraction * np.abs(true_hm)
    return ObservationSet(entries, true_hm + std * rng.standard_normal(len(entries)), std)


def _paths(out: Path) -> dict:
    return {
        "prior": out / "prior" / "prior.csv",
        "truth": out / "prior" / "truth.csv",
        "obs": out / "prior" / "observations.json",
        "prior_config": out / "prior" / "prior_config.json",
        "pca": out / "train" / "pca_ht",
        "pca_latent": out / "train" / "pca_ht_latent.csv",
        "rae": out / "train" / "rae",
        "rae_latent": out / "train" / "rae_latent.csv",
        "rae_loss": out / "train" / "rae_loss.csv",
        "rs_result": out / "rs" / "rs_result.json",
        "rs_accepted": out / "rs" / "accepted.csv",
        "evaluate": out / "evaluate",
    }


def _method_dir(out: Path, method: str) -> Path:
    return out / "assimilate" / method.replace("+", "_")


def _write_stage_manifest(path, cfg, stage, extra):
    write = {"stage": stage, "seed": cfg["seed"], "seeds": effective_seeds(cfg),
             "rng": RNG_ALGORITHM, **extra}
    art.write_json(path, write)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def generate_prior(cfg: dict, out: Path) -> None:
    p = _paths(out)
    prior_cfg = _prior_config(cfg)
    schema = prior_cfg.schema()
    e = generate_tank_ensemble(prior_cfg, schema, int(cfg["forward_model"]["n_prior"]),
                               make_rng(stage_seed(cfg, "prior")))
    truth_rng = make_rng(stage_seed(cfg, "truth"))
    truth = simulate_tank(sample_tank_params(prior_cfg, truth_rng), schema)
    obs = make_observations(truth.values, _observation_entries(cfg, schema),
                            float(cfg["observations"]["error_fraction"]), truth_rng)
    art.write_ensemble_csv(p["prior"], e)
    art.write_ensemble_csv(p["truth"], Ensemble(schema, truth.values[None]))
    art.write_observations(p["obs"], obs)
    art.write_json(p["prior_config"], prior_cfg.to_dict())
    _write_stage_manifest(out / "prior" / "manifest.json", cfg, "generate-prior",
                          {"n_prior": e.n_r, "n_observations": obs.n_hm})
    log.info("prior: %d members, %d observations", e.n_r, obs.n_hm)


def _needs(cfg) -> tuple[bool, bool]:
    methods = cfg["sampler"]["methods"]
    return (any(m.startswith("pca_ht") for m in methods), any(m.startswith("rae") for m in methods))


def train(cfg: dict, out: Path) -> None:
    p = _paths(out)
    e = art.read_ensemble_csv(p["prior"])
    need_pca, need_rae = _needs(cfg)
    if need_pca:
        pc = cfg["parameterization"]["pca_ht"]
        param = fit_pca_ht(e, energy=pc["energy"], n_latent=pc["n_latent"])
        art.save_pca(p["pca"], param)
        art.write_latent_csv(p["pca_latent"], param.encode(e))
        log.info("pca_ht: n_l=%d, retained energy %.4f", param.n_latent, param.basis.retained_energy())
    if need_rae:
        rc = RaeConfig(**cfg["parameterization"]["rae"])
        res = train_rae(e, rc, make_rng(stage_seed(cfg, "rae")))
        art.save_rae(p["rae"], res.weights, hyperparameters=dict(cfg["parameterization"]["rae"]),
                     schema=e.schema)
        param = RaeParameterization(res.weights, e.schema)
        art.write_latent_csv(p["rae_latent"], param.encode(e))
        art.write_json(p["rae_loss"].with_suffix(".json"), {"loss": [float(x) for x in res.loss_history]})
        log.info("rae: final loss %.6g", res.loss_history[-1])
    _write_stage_manifest(out / "train" / "manifest.json", cfg, "train",
                          {"parameterization": cfg["parameterization"]})


def _load_param(p, kind: str):
    if kind == "pca_ht":
        return art.load_pca(p["pca"]), art.read_latent_csv(p["pca_latent"])
    w, schema = art.load_rae(p["rae"])
    return RaeParameterization(w, schema), art.read_latent_csv(p["rae_latent"])


def run_method(method: str, cfg: dict, prior: Ensemble, obs: ObservationSet, param=None, latent=None):
    """Posterior for one method; returns an ``EsmdaResult``."""
    n_a = int(cfg["sampler"]["n_a"])
    if method == "esmda+truncation":
        res = esmda_update_data(prior, obs, EsmdaConfig.uniform(n_a, stage_seed(cfg, "esmda")))
        res.posterior = truncate(res.posterior)
        return res
    if method in ("rae+esmda", "pca_ht+esmda"):
        le = LatentEnsemble(latent, param.tag)
        return esmda_update_latent(le, param, obs, EsmdaConfig.uniform(n_a, stage_seed(cfg, "esmda")),
                                   schema=prior.schema)
    if method == "pca_ht+rml":
        rc = dict(cfg["sampler"]["rml"])
        n = int(rc.pop("n_samples"))
        return rml_posterior(param, param.n_latent, obs, n, stage_seed(cfg, "rml"), RmlConfig(**rc),
                             schema=prior.schema, tag=param.tag)
    raise ConfigError(f"unknown method {method!r}")


def assimilate(cfg: dict, out: Path, methods=None) -> None:
    p = _paths(out)
    prior = art.read_ensemble_csv(p["prior"])
    obs = art.read_observations(p["obs"])
    for method in methods or cfg["sampler"]["methods"]:
        param = latent = None
        if not method.startswith("esmda"):
            param, latent = _load_param(p, method.split("+")[0])
        res = run_method(method, cfg, prior, obs, param, latent)
        d = _method_dir(out, method)
        art.write_ensemble_csv(d / "posterior.csv", res.posterior)
        if res.latent is not None:
            art.write_latent_csv(d / "latent.csv", res.latent.values)
        extra = {"method": method, "mean_mismatch": res.mismatch}
        if method != "pca_ht+rml":
            extra["alphas"] = EsmdaConfig.uniform(int(cfg["sampler"]["n_a"])).alphas
        _write_stage_manifest(d / "manifest.json", cfg, "assimilate", extra)
        log.info("%s: mean mismatch %s", method, ", ".join(f"{m:.4g}" for m in res.mismatch))


def rs_prior_stream(cfg: dict, chunk: int = 20000):
    prior_cfg = _prior_config(cfg)
    schema = prior_cfg.schema()
    n = int(cfg["rs"]["n_prior"])
    seed = stage_seed(cfg, "rs")
    return schema, lambda: tank_stream(prior_cfg, schema, n, make_rng(seed, 1), chunk)


def rejection(cfg: dict, out: Path) -> None:
    p = _paths(out)
    obs = art.read_observations(p["obs"])
    schema, stream = rs_prior_stream(cfg)
    result, accepted = rejection_sample_stream(stream, schema, obs, make_rng(stage_seed(cfg, "rs"), 2))
    art.write_rs_result(p["rs_result"], result)
    _write_stage_manifest(out / "rs" / "manifest.json", cfg, "rs", {"n_prior": result.n_proposals})
    result.require_accepted()
    art.write_ensemble_csv(p["rs_accepted"], accepted)
    log.info("rs: accepted %d of %d", result.n_accepted, result.n_proposals)


def field_balance_violation(e: Ensemble, after: float) -> float:
    """``|mean(injection - production)| / mean field production`` over steps after ``after``."""
    ex = builtin_expressions(e.schema)
    late = e.schema.time_array() > after
    diff = evaluate_expression(e, ex["INJ_MINUS_PROD"])[:, late].mean(axis=0)
    prod = evaluate_expression(e, ex["FIELD_LIQ"])[:, late].mean(axis=0)
    return float(np.max(np.abs(diff) / prod))


def evaluate(cfg: dict, out: Path) -> dict:
    p = _paths(out)
    dg = cfg["diagnostics"]
    ens = {"prior": art.read_ensemble_csv(p["prior"])}
    for m in cfg["sampler"]["methods"]:
        ens[m] = art.read_ensemble_csv(_method_dir(out, m) / "posterior.csv")
    ens["rs"] = art.read_ensemble_csv(p["rs_accepted"])
    ev = p["evaluate"]
    write_bands_csv(ev / "bands.csv", ens, dg["probs"])
    cp = dg["crossplot"]
    write_crossplot_csv(ev / "crossplot.csv", ens, cp["quantity"], *cp["times"])
    for a, b in dg["correlation"]:
        write_corr_csv(ev / f"corr_{a}_{b}.csv", ens, a, b)
    basis = fit_mahalanobis(ens["rs"], dg["mahalanobis_energy"])
    cmp_ = dm_cdf_compare(basis, ens, "rs")
    write_dm_cdf_csv(ev / "dm_cdf.csv", cmp_)
    summary = {
        "mahalanobis_k": basis.k,
        "n_rs_accepted": ens["rs"].n_r,
        "ks_vs_rs": {k: v for k, v in cmp_.ks.items() if k != "rs"},
        "ranking": sorted((k for k in cmp_.ks if k not in ("rs", "prior")), key=lambda k: cmp_.ks[k]),
        "field_balance_violation": {k: field_balance_violation(e, dg["balance_after"]) for k, e in ens.items()},
    }
    art.write_json(ev / "summary.json", summary)
    return summary


def run_pipeline(cfg: dict, out: Path) -> dict:
    # the output location is not part of the run's identity
    recorded = {k: v for k, v in cfg.items() if k != "output_dir"}
    _write_stage_manifest(out / "manifest.json", cfg, "pipeline", {"config": recorded})
    generate_prior(cfg, out)
    train(cfg, out)
    assimilate(cfg, out)
    rejection(cfg, out)
    return evaluate(cfg, out)
