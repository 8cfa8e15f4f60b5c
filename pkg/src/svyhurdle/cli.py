"""Command line surface: fit, sandwich, decompose, simulate, diagnose.

Each command reads CSV data and a JSON config, writes its artifacts into an
output directory together with a run manifest, and reports failures through
exit codes: 0 ok, 2 schema error, 3 numeric failure, 4 design violation.
Artifacts are plain CSV/JSON with round-trip-safe number formatting, so a
rerun on unchanged inputs and seed overwrites every file byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit, ndtri

from . import __version__, model, scores, survey
from .infer import (
    McmcConfig,
    NonConvergenceError,
    ess_bulk,
    fit_map,
    laplace_draws,
    mode_hessian,
    sample_mcmc,
    split_rhat,
)
from .kernel import log_zero_prob_arrays
from .model import Dataset, ModelStructure, param_names, unflatten
from .specfun import digamma
from .survey import SurveyDesign

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_DESIGN = 4

_RESERVED = ("y", "n", "state", "stratum", "psu", "weight")
_Z90 = 1.6448536269514722


class SchemaError(ValueError):
    """Input file or config violates the documented layout."""


class DesignError(ValueError):
    """Design metadata is missing or unusable for the requested command."""


# ---------------------------------------------------------------------------
# serialization helpers


def _fmt(x) -> str:
    """Round-trip-safe text for one numeric cell (17 significant digits)."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([c if isinstance(c, str) else _fmt(c) for c in row])


def _write_frame(path: Path, df: pd.DataFrame) -> None:
    df.to_csv(path, index=False, float_format="%.17g")


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_json_ready(payload), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# manifest


def write_manifest(outdir: Path, command: str, inputs: list[Path],
                   config_path: Path | None, config: dict, seed: int,
                   extra: dict | None = None) -> str:
    """Record what produced this output directory; returns the content hash.

    The hash covers the input file digests, the effective config, the seed
    and the tool version, so downstream commands can refuse silently edited
    inputs. The created timestamp is informational and excluded from it.
    """
    digests = {str(p): _sha256(p) for p in inputs}
    basis = json.dumps(
        {"command": command, "inputs": digests, "config": _json_ready(config),
         "seed": seed, "version": __version__},
        sort_keys=True,
    )
    content_hash = hashlib.sha256(basis.encode()).hexdigest()
    payload = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config": config,
        "inputs": digests,
        "seed": seed,
        "version": __version__,
        "content_hash": content_hash,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        payload.update(extra)
    _write_json(outdir / "manifest.json", payload)
    return content_hash


def _load_manifest(artifact_dir: Path) -> dict:
    path = artifact_dir / "manifest.json"
    if not path.exists():
        raise SchemaError(f"no manifest.json in {artifact_dir}")
    with open(path) as fh:
        return json.load(fh)


def _check_manifest_inputs(manifest: dict, force: bool) -> None:
    """Refuse downstream work when a recorded input changed on disk."""
    for recorded, digest in manifest.get("inputs", {}).items():
        p = Path(recorded)
        if not p.exists():
            if force:
                continue
            raise SchemaError(
                f"manifest input {recorded} is missing (use --force to override)")
        if _sha256(p) != digest and not force:
            raise SchemaError(
                f"manifest input {recorded} changed since the fit "
                f"(use --force to override)")


# ---------------------------------------------------------------------------
# data ingestion


def _read_header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        first = fh.readline()
    if not first:
        raise SchemaError(f"{path} is empty")
    names = [c.strip() for c in first.rstrip("\r\n").split(",")]
    seen: set[str] = set()
    for name in names:
        if name in seen:
            raise SchemaError(f"duplicate column {name!r} in {path}")
        seen.add(name)
    return names


def read_dataset(path: Path, require_design: bool = True,
                 variant: str = "m1") -> tuple[Dataset, dict]:
    """Load and validate one analysis file.

    Expected columns: y, n, covariates x1..xP (x1 constant one, injected when
    absent), state, and optionally stratum/psu/weight. Returns the dataset
    plus a summary of what the file actually provided.
    """
    if not path.exists():
        raise SchemaError(f"data file {path} does not exist")
    names = _read_header(path)
    frame = pd.read_csv(path)
    problems: list[str] = []

    for col in ("y", "n"):
        if col not in names:
            raise SchemaError(f"{path} is missing required column {col!r}")
    if "state" not in names and variant != "m0":
        raise SchemaError(
            f"{path} is missing column 'state' (required for variant {variant})")

    xcols = sorted((c for c in names if c.startswith("x") and c[1:].isdigit()),
                   key=lambda c: int(c[1:]))
    for j, c in enumerate(xcols, start=1):
        if c != f"x{j}":
            raise SchemaError(f"covariate columns must be contiguous x1..xP; got {xcols}")
    X = frame[xcols].to_numpy(dtype=float) if xcols else np.empty((len(frame), 0))
    if not xcols or not np.allclose(X[:, 0], 1.0):
        X = np.column_stack([np.ones(len(frame)), X])
        columns = ["x1"] + [f"x{j+2}" for j in range(X.shape[1] - 1)]
    else:
        columns = xcols

    y = frame["y"].to_numpy()
    n = frame["n"].to_numpy()
    zero_n = int(np.sum(n == 0))
    if zero_n:
        raise SchemaError(
            f"{path} contains {zero_n} rows with n = 0; drop empty cells upstream")
    bad = np.where((n < 0) | (y < 0) | (y > n))[0]
    if bad.size:
        listed = ", ".join(str(i + 1) for i in bad[:10])
        problems.append(f"counts must satisfy 0 <= y <= n at data rows {listed}")
    if not np.all(np.isfinite(X)):
        rows = np.where(~np.isfinite(X).all(axis=1))[0]
        listed = ", ".join(str(i + 1) for i in rows[:10])
        problems.append(f"non-finite covariates at data rows {listed}")
    if problems:
        raise SchemaError(f"{path}: " + "; ".join(problems))

    has = {c: c in names for c in ("state", "stratum", "psu", "weight")}
    if require_design and not (has["psu"] and has["stratum"]):
        missing = [c for c in ("stratum", "psu") if not has[c]]
        raise SchemaError(
            f"{path} is missing design columns {missing}; "
            f"pass --no-design to fit without them")
    state = frame["state"].to_numpy() if has["state"] else np.zeros(len(frame), int)
    try:
        ds = Dataset(
            y=y, n=n, X=X, state=state,
            stratum=frame["stratum"].to_numpy() if has["stratum"] else None,
            psu=frame["psu"].to_numpy() if has["psu"] else None,
            weight=frame["weight"].to_numpy() if has["weight"] else None,
            columns=columns,
        )
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    info = {"columns_present": has, "n_rows": len(ds), "covariates": columns}
    return ds, info


# ---------------------------------------------------------------------------
# config


_PRIOR_KEYS = {
    "prior_coef_sd": ("ALPHA_SD", (model, scores, survey)),
    "prior_logkappa_mean": ("LOGKAPPA_MEAN", (model, scores)),
    "prior_logkappa_sd": ("LOGKAPPA_SD", (model, scores, survey)),
}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"config file {path} does not exist")
    with open(p) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise SchemaError(f"config {path} must hold a JSON object")
    return cfg


def _apply_prior_overrides(cfg: dict) -> None:
    """Override the prior constants consistently across modules.

    Every consumer binds the names at import, so each consuming module gets
    the new value explicitly; the override is process-local.
    """
    for key, (name, mods) in _PRIOR_KEYS.items():
        if key in cfg:
            value = float(cfg[key])
            if value <= 0 and key != "prior_logkappa_mean":
                raise SchemaError(f"{key} must be positive")
            for mod in mods:
                setattr(mod, name, value)


def _effective(cfg: dict, args, key: str, default):
    """CLI flag wins over config value wins over default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return cfg.get(key, default)


# ---------------------------------------------------------------------------
# fit command


def _fit_common(args) -> tuple[Dataset, dict, ModelStructure, dict]:
    cfg = _load_config(args.config)
    _apply_prior_overrides(cfg)
    variant = _effective(cfg, args, "variant", "m1")
    ds, info = read_dataset(Path(args.data), require_design=not args.no_design,
                            variant=variant)
    S = max(ds.n_states, 1)
    ms = ModelStructure.for_variant(variant, P=ds.n_cov, S=S)
    return ds, cfg, ms, info


def _fit_weights(ds: Dataset, cfg: dict, info: dict) -> np.ndarray | None:
    """Weighted pseudo-likelihood iff the file shipped varying weights,
    unless the config pins the choice."""
    if "weighted" in cfg:
        return ds.weight if bool(cfg["weighted"]) else None
    if info["columns_present"]["weight"] and np.ptp(ds.weight) > 0:
        return ds.weight
    return None


def cmd_fit(args) -> int:
    ds, cfg, ms, info = _fit_common(args)
    engine = _effective(cfg, args, "engine", "map")
    seed = int(_effective(cfg, args, "seed", 20_260_815))
    n_draws = int(cfg.get("draws", 1000))
    level = float(cfg.get("level", 0.90))
    weights = _fit_weights(ds, cfg, info)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    names = param_names(ms, ds.columns)
    diagnostics: dict = {
        "variant": ms.variant, "engine": engine, "n_obs": len(ds),
        "n_states": ds.n_states, "weighted": weights is not None,
        "kish": survey.kish(ds.weight).__dict__,
    }
    if engine == "map":
        fit = fit_map(ds, ms, weights=weights)
        draws = laplace_draws(fit, ds, n_draws, seed, weights=weights)
        vec = fit.vec
        diagnostics.update(converged=fit.converged, objective=fit.objective,
                           grad_norm=fit.grad_norm, iterations=fit.n_iter)
    elif engine == "mcmc":
        mc_cfg = McmcConfig(**{"seed": seed, **cfg.get("mcmc", {})})
        res = sample_mcmc(ds, ms, weights=weights, config=mc_cfg)
        rhats = [split_rhat(res.draws[:, :, j])
                 for j in range(res.draws.shape[-1])]
        ess = [ess_bulk(res.draws[:, :, j])
               for j in range(res.draws.shape[-1])]
        draws = res.stacked()
        if n_draws < draws.shape[0]:
            idx = np.linspace(0, draws.shape[0] - 1, n_draws).astype(int)
            draws = draws[idx]
        vec = draws.mean(axis=0)
        diagnostics.update(converged=bool(max(rhats) < 1.05),
                           max_rhat=float(max(rhats)),
                           min_ess_bulk=float(min(ess)),
                           divergences=res.divergences,
                           accept_rate=res.accept_rate)
    else:
        raise SchemaError(f"unknown engine {engine!r}; choose map or mcmc")

    content_hash = write_manifest(
        outdir, "fit", [Path(args.data)], args.config and Path(args.config),
        {"variant": ms.variant, "engine": engine, "draws": n_draws,
         "level": level, "weighted": weights is not None, **cfg},
        seed, extra={"design_columns": info["columns_present"]},
    )
    _write_json(outdir / "theta_hat.json", {
        "manifest": content_hash, "names": names, "theta": vec,
        "variant": ms.variant, "engine": engine,
        "n_free": len(vec), "level": level,
    })
    _write_csv(outdir / "draws.csv", names, draws)
    diagnostics["manifest"] = content_hash
    _write_json(outdir / "diagnostics.json", diagnostics)
    print(f"fit: {ms.variant} via {engine}, {len(ds)} rows, "
          f"{len(vec)} free coordinates -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sandwich command


def _load_fit(fit_dir: Path) -> tuple[dict, np.ndarray, np.ndarray]:
    theta_path = fit_dir / "theta_hat.json"
    if not theta_path.exists():
        raise SchemaError(f"no theta_hat.json in {fit_dir}")
    with open(theta_path) as fh:
        theta_doc = json.load(fh)
    draws_path = fit_dir / "draws.csv"
    if not draws_path.exists():
        raise SchemaError(f"no draws.csv in {fit_dir}")
    header = _read_header(draws_path)
    draws = pd.read_csv(draws_path).to_numpy(dtype=float)
    if draws.ndim != 2 or draws.shape[1] != len(theta_doc["names"]):
        raise SchemaError(
            f"draws.csv has {draws.shape[1]} columns, "
            f"expected {len(theta_doc['names'])}")
    if header != theta_doc["names"]:
        raise SchemaError("draws.csv header does not match theta_hat.json names")
    return theta_doc, np.asarray(theta_doc["theta"], dtype=float), draws


def cmd_sandwich(args) -> int:
    fit_dir = Path(args.fit)
    manifest = _load_manifest(fit_dir)
    _check_manifest_inputs(manifest, args.force)
    theta_doc, vec, draws = _load_fit(fit_dir)
    cfg = _load_config(args.config)
    _apply_prior_overrides(cfg)
    variant = theta_doc["variant"]
    ds, info = read_dataset(Path(args.data), require_design=False, variant=variant)
    if not (info["columns_present"]["psu"] and info["columns_present"]["stratum"]):
        missing = [c for c in ("stratum", "psu")
                   if not info["columns_present"][c]]
        raise DesignError(
            f"sandwich needs design columns; {missing} absent from {args.data}")
    ms = ModelStructure.for_variant(variant, P=ds.n_cov, S=max(ds.n_states, 1))
    if len(vec) != model.n_free(ms):
        raise SchemaError(
            f"fit has {len(vec)} coordinates but the data implies "
            f"{model.n_free(ms)}; was it fit on different data?")
    theta = unflatten(vec, ms)
    weighted = bool(manifest.get("config", {}).get("weighted", True))
    weights = ds.weight if weighted else None

    design = SurveyDesign.from_dataset(ds)
    singles = [h for h, c in design.psus_per_stratum().items() if c < 2]
    if singles and not args.collapse_single:
        raise DesignError(
            f"strata {singles} have a single PSU; variance between PSUs is "
            f"undefined there (pass --collapse-single to pool them)")
    try:
        report = survey.design_sandwich(theta, ds, ms, weights=weights,
                                        design=design,
                                        collapse_single=args.collapse_single)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"sandwich bread is singular: {exc}") from exc

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    content_hash = write_manifest(
        outdir, "sandwich", [Path(args.data)], args.config and Path(args.config),
        {"fit_dir": str(fit_dir), "fit_manifest": manifest["content_hash"],
         "collapse_single": args.collapse_single, **cfg},
        int(manifest.get("seed", 0)),
    )

    score_rows = scores.score_matrix(theta, ds, ms, include_deviations=True)
    _write_csv(outdir / "scores.csv", report.names, score_rows)
    _write_json(outdir / "sandwich.json", {
        "manifest": content_hash, "fit_manifest": manifest["content_hash"],
        "names": report.names, "H": report.H, "J": report.J, "V": report.V,
        "dof": report.dof,
        "der": {"values": report.der.values, "labels": report.der.labels},
    })

    n_fixed = 2 * ms.P + 1
    block = np.arange(n_fixed)
    V_fixed = report.V[:n_fixed, :n_fixed]
    calibrated = survey.cholesky_calibrate(draws, vec, V_fixed, block=block)
    _write_csv(outdir / "calibrated_draws.csv", theta_doc["names"], calibrated)

    level = float(theta_doc.get("level", 0.90))
    zq = float(ndtri(0.5 + level / 2.0))
    se = report.se()[:n_fixed]
    wald_rows = [
        (report.names[j], vec[j], se[j], vec[j] - zq * se[j],
         vec[j] + zq * se[j], report.dof)
        for j in range(n_fixed)
    ]
    _write_csv(outdir / "wald.csv",
               ["name", "estimate", "se", "lo", "hi", "dof"], wald_rows)
    worst = report.der.worst()
    print(f"sandwich: dof {report.dof}, worst DER {worst:.3f} -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decompose command


def _per_obs_channels(theta, ds: Dataset, ms: ModelStructure, k: int):
    """Per-observation extensive and intensive channel contributions of
    covariate k on the per-trial mean, at one parameter value."""
    eta_ext, eta_int = model.linear_predictors(theta, ds, ms)
    qprob = expit(eta_ext)
    mu = expit(eta_int)
    kap = theta.kappa
    lp0 = log_zero_prob_arrays(ds.n, mu, kap)
    posmass = -np.expm1(lp0)
    h = mu / posmass
    b = (1.0 - mu) * kap
    lam = kap * (digamma(b + ds.n) - digamma(b))
    omega = mu * np.exp(lp0) * lam / posmass
    omega = np.where(ds.n == 1, 1.0, omega)
    eps = 1.0 - omega
    a_k = np.full(len(ds), theta.alpha[k])
    b_k = np.full(len(ds), theta.beta[k])
    if ms.q and k < ms.q:
        deltas = theta.deltas(ms)
        a_k = a_k + deltas[ds.state, k]
        b_k = b_k + deltas[ds.state, ms.q + k]
    ext = h * qprob * (1.0 - qprob) * a_k
    inten = qprob * h * eps * (1.0 - mu) * b_k
    return ext, inten


def _reversal_probabilities(draws: np.ndarray, ds: Dataset, ms: ModelStructure,
                            k: int) -> pd.DataFrame:
    """Per state: fraction of draws whose state-average total effect of
    covariate k disagrees in sign with the pooled average."""
    S = ms.S
    M = draws.shape[0]
    flips = np.zeros(S)
    masks = [ds.state == s for s in range(S)]
    for m in range(M):
        theta = unflatten(draws[m], ms)
        ext, inten = _per_obs_channels(theta, ds, ms, k)
        total = ext + inten
        pooled = float(np.mean(total))
        for s in range(S):
            if masks[s].any():
                flips[s] += float(np.sign(np.mean(total[masks[s]])) != np.sign(pooled))
    present = np.array([m.any() for m in masks])
    probs = np.where(present, flips / M, np.nan)
    return pd.DataFrame({"state": np.arange(S), "covariate": ds.columns[k],
                         "reversal_prob": probs})


def cmd_decompose(args) -> int:
    fit_dir = Path(args.fit)
    manifest = _load_manifest(fit_dir)
    _check_manifest_inputs(manifest, args.force)
    theta_doc, vec, draws = _load_fit(fit_dir)
    variant = theta_doc["variant"]
    ds, info = read_dataset(Path(args.data), require_design=False, variant=variant)
    ms = ModelStructure.for_variant(variant, P=ds.n_cov, S=max(ds.n_states, 1))
    if len(vec) != model.n_free(ms):
        raise SchemaError(
            f"fit has {len(vec)} coordinates but the data implies {model.n_free(ms)}")

    calibrated_path = fit_dir / "calibrated_draws.csv"
    source = "draws.csv"
    if args.calibrated:
        calibrated_path = Path(args.calibrated)
        if not calibrated_path.exists():
            raise SchemaError(f"calibrated draws {calibrated_path} do not exist")
        draws = pd.read_csv(calibrated_path).to_numpy(dtype=float)
        source = str(calibrated_path)
    level = float(theta_doc.get("level", 0.90))

    table = model.ame_decompose(draws, ds, ms, level=level)
    wide = table.pivot(index="covariate", columns="channel",
                       values=["mean", "lo", "hi"])
    rows = []
    for cov in ds.columns:
        ext = float(wide.loc[cov, ("mean", "extensive")])
        inten = float(wide.loc[cov, ("mean", "intensive")])
        denom = abs(ext) + abs(inten)
        rows.append({
            "covariate": cov,
            "extensive": ext, "intensive": inten,
            "total": float(wide.loc[cov, ("mean", "total")]),
            "ext_share": abs(ext) / denom if denom > 0 else 0.0,
            "extensive_lo": float(wide.loc[cov, ("lo", "extensive")]),
            "extensive_hi": float(wide.loc[cov, ("hi", "extensive")]),
            "intensive_lo": float(wide.loc[cov, ("lo", "intensive")]),
            "intensive_hi": float(wide.loc[cov, ("hi", "intensive")]),
            "total_lo": float(wide.loc[cov, ("lo", "total")]),
            "total_hi": float(wide.loc[cov, ("hi", "total")]),
        })
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    content_hash = write_manifest(
        outdir, "decompose", [Path(args.data)],
        None, {"fit_dir": str(fit_dir), "draws_source": source, "level": level},
        int(manifest.get("seed", 0)),
    )
    _write_frame(outdir / "ame.csv", pd.DataFrame(rows))

    summary = {"manifest": content_hash, "draws_source": source, "level": level}
    if ms.variant != "m0" and ms.P > 1:
        k = 1
        rev = _reversal_probabilities(draws, ds, ms, k)
        _write_frame(outdir / "reversal.csv", rev)
        summary["reversal_covariate"] = ds.columns[k]
    _write_json(outdir / "decompose.json", summary)
    print(f"decompose: {len(rows)} covariates -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate command


def cmd_simulate(args) -> int:
    from . import simlab

    cfg = _load_config(args.config)
    scenario_names = cfg.get("scenarios", ["S0"])
    if isinstance(scenario_names, str):
        scenario_names = [scenario_names]
    seed = int(_effective(cfg, args, "seed", 20_260_815))
    reps = cfg.get("replications")
    if args.replications is not None:
        reps = args.replications
    if reps is not None:
        reps = int(reps)
        if reps < 1:
            raise SchemaError("replications must be a positive integer")
    full = bool(args.full or cfg.get("full", False))
    workers = int(_effective(cfg, args, "workers", 1))
    engine = _effective(cfg, args, "engine", "map")
    if engine != "map":
        raise SchemaError(f"simulation supports engine map only, got {engine!r}")
    for nm in scenario_names:
        if nm not in simlab.SCENARIO_NAMES:
            raise SchemaError(
                f"unknown scenario {nm!r}; choose from {simlab.SCENARIO_NAMES}")

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    records, metrics = simlab.run_campaign(
        scenario_names, reps=reps, base_seed=seed, workers=workers, full=full)

    failed = records[records["failed"]]
    success_frac = 1.0 - len(failed) / max(len(records), 1)
    if len(failed):
        lines = [
            f"scenario {r.scenario} rep {r.rep} estimator {r.estimator} "
            f"param {r.param}: fit did not converge"
            for r in failed.itertuples()
        ]
        (outdir / "errors.log").write_text("\n".join(lines) + "\n")
    if success_frac < 0.80:
        raise RuntimeError(
            f"only {success_frac:.0%} of replication fits converged; "
            f"see {outdir / 'errors.log'}")

    content_hash = write_manifest(
        outdir, "simulate", [], args.config and Path(args.config),
        {"scenarios": scenario_names, "replications": reps, "full": full,
         "workers": workers, **cfg},
        seed,
    )
    _write_frame(outdir / "records.csv", records)
    _write_frame(outdir / "metrics.csv", metrics)
    _write_json(outdir / "metrics.json", {
        "manifest": content_hash,
        "rows": metrics.to_dict(orient="records"),
    })
    plot = metrics[["scenario", "param", "estimator", "coverage"]]
    _write_frame(outdir / "plotdata.csv", plot)
    scen_doc = [simlab.scenario_config(nm, full=full) for nm in scenario_names]
    _write_json(outdir / "scenarios.json",
                {"manifest": content_hash, "scenarios": scen_doc})
    print(f"simulate: {len(records)} records over {scenario_names}, "
          f"{success_frac:.0%} converged -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose command


def cmd_diagnose(args) -> int:
    cfg = _load_config(args.config)
    _apply_prior_overrides(cfg)
    variant = _effective(cfg, args, "variant", "m1")
    ds, info = read_dataset(Path(args.data), require_design=False, variant=variant)
    ms = ModelStructure.for_variant(variant, P=ds.n_cov, S=max(ds.n_states, 1))

    kr = survey.kish(ds.weight)
    quantiles = np.quantile(ds.weight, [0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0])
    bvm = survey.bvm_weight_diagnostic(ds.weight)
    report: dict = {
        "n_obs": len(ds),
        "kish": kr.__dict__,
        "weight_summary": {
            "quantiles": dict(zip(("min", "q25", "median", "q75", "q90",
                                   "q99", "max"), quantiles)),
            "mean": float(ds.weight.mean()),
        },
        "bvm": bvm.__dict__,
    }

    informative = np.ptp(ds.weight) > 1e-12
    pf: dict = {}
    for margin in ("extensive", "intensive"):
        if not informative:
            pf[margin] = None
            continue
        uni = survey.pfeffermann_test(ds, margin, columns=[0])
        full = survey.pfeffermann_test(ds, margin)
        pf[margin] = {"univariate": uni.__dict__, "full": full.__dict__}
    report["pfeffermann"] = pf

    try:
        fit_u = fit_map(ds, ms)
        fit_w = fit_u if not informative else fit_map(ds, ms, weights=ds.weight)
        n_fixed = 2 * ms.P + 1
        var_u = np.diag(np.linalg.inv(mode_hessian(fit_u, ds)))[:n_fixed]
        var_w = var_u if fit_w is fit_u else \
            np.diag(np.linalg.inv(mode_hessian(fit_w, ds, weights=ds.weight)))[:n_fixed]
        names = param_names(ms, ds.columns)[:n_fixed]
        if fit_w is fit_u:
            z = np.zeros(n_fixed)
            report["hausman"] = {"names": names, "z": z,
                                 "p_values": np.ones(n_fixed),
                                 "worst_abs_z": 0.0}
        else:
            hz = survey.hausman(fit_u.vec[:n_fixed], fit_w.vec[:n_fixed],
                                var_u, var_w, names=names)
            finite = hz.z[np.isfinite(hz.z)]
            report["hausman"] = {
                "names": names, "z": hz.z, "p_values": hz.p_value,
                "negative_gap": hz.negative_gap,
                "worst_abs_z": float(np.max(np.abs(finite))) if finite.size else 0.0,
            }
    except NonConvergenceError as exc:
        report["hausman"] = {"error": f"fit did not converge: {exc}"}

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    content_hash = write_manifest(
        outdir, "diagnose", [Path(args.data)],
        args.config and Path(args.config),
        {"variant": variant, **cfg}, int(_effective(cfg, args, "seed", 0)))
    report["manifest"] = content_hash
    _write_json(outdir / "diagnostics.json", report)
    flagged = " FLAGGED" if bvm.flagged else ""
    print(f"diagnose: DEFF {kr.deff:.2f}, ESS {kr.ess:.0f}, "
          f"delta {bvm.delta:.3f}{flagged} -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("data", help="analysis CSV (y, n, x1..xP, state, stratum, psu, weight)")
    p.add_argument("--config", default=None, help="JSON config path")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--force", action="store_true",
                   help="proceed despite manifest hash mismatches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svyhurdle",
        description="Survey-weighted hurdle beta-binomial estimation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="estimate the model and write artifacts")
    _add_common(p_fit)
    p_fit.add_argument("--variant", choices=("m0", "m1", "m2", "m3a", "m3b"),
                       default=None)
    p_fit.add_argument("--engine", choices=("map", "mcmc"), default=None)
    p_fit.add_argument("--no-design", action="store_true",
                       help="fit without stratum/psu columns")
    p_fit.set_defaults(func=cmd_fit)

    p_sw = sub.add_parser("sandwich", help="design-based variance correction")
    _add_common(p_sw)
    p_sw.add_argument("--fit", required=True, help="directory with fit artifacts")
    p_sw.add_argument("--collapse-single", action="store_true",
                      help="pool single-PSU strata instead of refusing")
    p_sw.set_defaults(func=cmd_sandwich)

    p_dec = sub.add_parser("decompose", help="margin decomposition of effects")
    _add_common(p_dec)
    p_dec.add_argument("--fit", required=True, help="directory with fit artifacts")
    p_dec.add_argument("--calibrated", default=None,
                       help="path to calibrated draws (default: fit draws)")
    p_dec.set_defaults(func=cmd_decompose)

    p_sim = sub.add_parser("simulate", help="run the coverage study")
    _add_common(p_sim, data=False)
    p_sim.add_argument("--replications", type=int, default=None)
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--engine", choices=("map", "mcmc"), default=None)
    scale = p_sim.add_mutually_exclusive_group()
    scale.add_argument("--desk", action="store_true",
                       help="desk-scale sizes (default)")
    scale.add_argument("--full", action="store_true", help="published-scale sizes")
    p_sim.set_defaults(func=cmd_simulate)

    p_diag = sub.add_parser("diagnose", help="design diagnostics report")
    _add_common(p_diag)
    p_diag.add_argument("--variant", choices=("m0", "m1", "m2", "m3a", "m3b"),
                        default=None)
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except DesignError as exc:
        print(f"design violation: {exc}", file=sys.stderr)
        return EXIT_DESIGN
    except (NonConvergenceError, np.linalg.LinAlgError, RuntimeError,
            FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
