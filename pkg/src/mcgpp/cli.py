"""Command-line surface: fit, predict, simulate, diagnose.

All configuration comes from a JSON file validated against a fixed key
schema (unknown keys are rejected) with a few flag overrides.  Outputs
are CSV files and plain-text reports; fitted models are stored as
versioned, self-describing JSON so artifacts stay auditable.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import CDRCovariance, CDRParams, fit_cdr
from .covariance import MCGPCovariance, MCGPHyperparams
from .diagnostics import pd_audit, pd_audit_csv, regret_growth
from .inference import MODEL_SPECS, FittedModel, ModelSpec, OptimOptions, aic, fit
from .kernels import CovFamily, KernelParams
from .likelihood import Dataset, RegressionCoefficients
from .prediction import predict_batch
from .simulation import ScenarioConfig, run_replications

MODEL_FORMAT = "mcgpp-model/1"


class ConfigError(ValueError):
    """Bad configuration file or flags."""


class DatasetFormatError(ValueError):
    """Malformed dataset CSV."""


# ---------------------------------------------------------------------------
# dataset CSV


def load_dataset(path, add_intercept: bool = True) -> Dataset:
    """Read a dataset CSV.

    Columns: `component` (1 or 2), `z` (count), optional `u_1..u_q`
    (mean covariates), `x_1..x_p` (covariance inputs), optional
    `exposure`.  An intercept column is prepended unless disabled.
    Errors carry the 1-based data row number.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetFormatError("empty dataset file")
        cols = list(reader.fieldnames)
        u_cols = sorted(
            (c for c in cols if c.startswith("u_")), key=lambda c: int(c.split("_")[1])
        )
        x_cols = sorted(
            (c for c in cols if c.startswith("x_")), key=lambda c: int(c.split("_")[1])
        )
        for required in ("component", "z"):
            if required not in cols:
                raise DatasetFormatError(f"missing required column: {required}")
        if not x_cols:
            raise DatasetFormatError("at least one covariance input column x_1 is required")
        has_e = "exposure" in cols
        known = {"component", "z", "exposure", *u_cols, *x_cols}
        unknown = [c for c in cols if c not in known]
        if unknown:
            raise DatasetFormatError(f"unknown columns: {unknown}")
        rows = {1: [], 2: []}
        for i, rec in enumerate(reader, start=1):
            try:
                comp = int(rec["component"])
                if comp not in (1, 2):
                    raise ValueError
            except (TypeError, ValueError):
                raise DatasetFormatError(
                    f"row {i}: component must be 1 or 2, got {rec.get('component')!r}"
                )
            zs = rec["z"]
            try:
                zf = float(zs)
                if zf < 0 or zf != int(zf):
                    raise ValueError
                z = int(zf)
            except (TypeError, ValueError):
                raise DatasetFormatError(
                    f"row {i}: count z must be a nonnegative integer, got {zs!r}"
                )
            try:
                u = [float(rec[c]) for c in u_cols]
                x = [float(rec[c]) for c in x_cols]
            except (TypeError, ValueError):
                raise DatasetFormatError(f"row {i}: malformed covariate value")
            if has_e:
                try:
                    e = float(rec["exposure"])
                    if not e > 0:
                        raise ValueError
                except (TypeError, ValueError):
                    raise DatasetFormatError(
                        f"row {i}: exposure must be positive, got {rec.get('exposure')!r}"
                    )
            else:
                e = 1.0
            rows[comp].append((z, u, x, e))
    for comp in (1, 2):
        if not rows[comp]:
            raise DatasetFormatError(f"no rows for component {comp}")

    def unpack(comp):
        z = np.array([r[0] for r in rows[comp]])
        u = np.array([r[1] for r in rows[comp]], dtype=float).reshape(len(rows[comp]), -1)
        if add_intercept:
            u = np.hstack([np.ones((len(rows[comp]), 1)), u]) if u.size else np.ones(
                (len(rows[comp]), 1)
            )
        elif u.size == 0:
            raise DatasetFormatError(
                "no mean covariates: provide u_ columns or keep the intercept"
            )
        x = np.array([r[2] for r in rows[comp]], dtype=float)
        e = np.array([r[3] for r in rows[comp]], dtype=float)
        return z, u, x, e

    z1, U1, x1, E1 = unpack(1)
    z2, U2, x2, E2 = unpack(2)
    return Dataset(z1=z1, U1=U1, x1=x1, E1=E1, z2=z2, U2=U2, x2=x2, E2=E2)


# ---------------------------------------------------------------------------
# fitted-model serialisation


def _kernel_to_dict(kp: KernelParams) -> dict:
    return {
        "v": kp.v,
        "A": kp.A.tolist(),
        "nu": kp.nu,
        "gamma": kp.gamma,
        "alpha": kp.alpha,
    }


def _kernel_from_dict(d) -> KernelParams:
    return KernelParams(
        v=d["v"], A=np.asarray(d["A"]), nu=d["nu"], gamma=d["gamma"], alpha=d["alpha"]
    )


def model_to_dict(model: FittedModel) -> dict:
    out = {
        "format": MODEL_FORMAT,
        "kind": model.kind,
        "beta1": model.beta.b1.tolist(),
        "beta2": model.beta.b2.tolist(),
        "tau0": model.tau0.tolist(),
        "loglik": model.loglik,
        "aic": aic(model),
        "n_params": model.n_params,
        "converged": model.converged,
        "n_iter": model.n_iter,
        "jitter": model.kfactor.jitter
        if model.kfactor is not None
        else model.diagnostics.get("jitter"),
    }
    if model.kind == "cdr":
        p: CDRParams = model.theta
        out["theta"] = {
            "family": p.family.value,
            "kernel": _kernel_to_dict(p.kernel),
            "alpha": p.alpha,
            "sigma_eps2": p.sigma_eps2,
        }
    else:
        t: MCGPHyperparams = model.theta
        out["theta"] = {
            "shared_family": t.shared_family.value,
            "xi1": _kernel_to_dict(t.xi1),
            "xi2": _kernel_to_dict(t.xi2),
            "eta1_family": t.eta1_family.value,
            "eta1": _kernel_to_dict(t.eta1),
            "eta2_family": t.eta2_family.value,
            "eta2": _kernel_to_dict(t.eta2),
        }
    if model.spec is not None:
        out["spec"] = {
            "shared_family": None
            if model.spec.shared_family is None
            else model.spec.shared_family.value,
            "eta1_family": model.spec.eta1_family.value,
            "eta2_family": model.spec.eta2_family.value,
            "nu": model.spec.nu,
            "gamma": model.spec.gamma,
            "alpha": model.spec.alpha,
            "free_shapes": model.spec.free_shapes,
        }
    else:
        out["spec"] = None
    return out


def model_from_dict(d) -> FittedModel:
    if d.get("format") != MODEL_FORMAT:
        raise ConfigError(f"unsupported model format: {d.get('format')!r}")
    beta = RegressionCoefficients(b1=np.asarray(d["beta1"]), b2=np.asarray(d["beta2"]))
    if d["kind"] == "cdr":
        t = d["theta"]
        params = CDRParams(
            beta=beta,
            kernel=_kernel_from_dict(t["kernel"]),
            alpha=t["alpha"],
            sigma_eps2=t["sigma_eps2"],
            family=CovFamily(t["family"]),
        )
        cov = CDRCovariance(
            kernel=params.kernel,
            alpha=params.alpha,
            sigma_eps2=params.sigma_eps2,
            family=params.family,
        )
        theta = params
    else:
        t = d["theta"]
        theta = MCGPHyperparams(
            shared_family=CovFamily(t["shared_family"]),
            xi1=_kernel_from_dict(t["xi1"]),
            xi2=_kernel_from_dict(t["xi2"]),
            eta1_family=CovFamily(t["eta1_family"]),
            eta1=_kernel_from_dict(t["eta1"]),
            eta2_family=CovFamily(t["eta2_family"]),
            eta2=_kernel_from_dict(t["eta2"]),
        )
        cov = MCGPCovariance(theta)
    spec = None
    if d.get("spec") is not None:
        s = d["spec"]
        spec = ModelSpec(
            shared_family=None
            if s["shared_family"] is None
            else CovFamily(s["shared_family"]),
            eta1_family=CovFamily(s["eta1_family"]),
            eta2_family=CovFamily(s["eta2_family"]),
            nu=s["nu"],
            gamma=s["gamma"],
            alpha=s["alpha"],
            free_shapes=s["free_shapes"],
        )
    return FittedModel(
        kind=d["kind"],
        beta=beta,
        theta=theta,
        cov=cov,
        tau0=np.asarray(d["tau0"]),
        kfactor=None,
        loglik=d["loglik"],
        n_params=d["n_params"],
        converged=d["converged"],
        n_iter=d["n_iter"],
        spec=spec,
        diagnostics={"jitter": d.get("jitter")},
    )


def save_model(model: FittedModel, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n")


def load_model(path) -> FittedModel:
    return model_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# config handling

_OPTIM_SCHEMA = {
    "max_iter": int,
    "grad_step": float,
    "mode_tol": float,
    "mode_max_iter": int,
    "outer_tol": float,
    "n_starts": int,
    "seed": int,
}

_FAMILY_NAMES = {f.value for f in CovFamily}

_SCHEMAS = {
    "fit": {
        "data": str,
        "model": str,
        "families": dict,
        "free_shapes": bool,
        "nu": float,
        "gamma": float,
        "alpha": float,
        "no_intercept": bool,
        "optim": dict,
        "seed": int,
        "out": str,
    },
    "predict": {
        "model_file": str,
        "data": str,
        "points": str,
        "no_intercept": bool,
        "out": str,
    },
    "simulate": {
        "scenario": int,
        "n1": int,
        "n2": int,
        "n_test": int,
        "n_replications": int,
        "seed": int,
        "models": list,
        "gamma": float,
        "mean_input_scale": float,
        "amplitude_scale": float,
        "optim": dict,
        "out": str,
    },
    "diagnose": {
        "families": list,
        "sizes": list,
        "delta": float,
        "seed": int,
        "n_draws": int,
        "amplitude2": float,
        "pd_draws": int,
        "out": str,
    },
}


def _validate_config(cfg: dict, command: str) -> dict:
    schema = _SCHEMAS[command]
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for key, val in cfg.items():
        if key not in schema:
            raise ConfigError(f"unknown config key for {command!r}: {key!r}")
        want = schema[key]
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            continue
        if not isinstance(val, want) or (want is int and isinstance(val, bool)):
            raise ConfigError(
                f"config key {key!r} must be {want.__name__}, got {type(val).__name__}"
            )
    if "optim" in cfg:
        for key, val in cfg["optim"].items():
            if key not in _OPTIM_SCHEMA:
                raise ConfigError(f"unknown optim key: {key!r}")
            want = _OPTIM_SCHEMA[key]
            if want is float and isinstance(val, int) and not isinstance(val, bool):
                continue
            if not isinstance(val, want) or isinstance(val, bool):
                raise ConfigError(f"optim key {key!r} must be {want.__name__}")
    if "families" in cfg:
        for slot, fam in cfg["families"].items():
            if slot not in ("shared", "eta1", "eta2"):
                raise ConfigError(f"unknown families slot: {slot!r}")
            if fam is not None and fam not in _FAMILY_NAMES:
                raise ConfigError(f"unknown covariance family: {fam!r}")
    return cfg


def _load_config(args, command) -> dict:
    cfg = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    cfg = _validate_config(cfg, command)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "model", None) is not None:
        cfg["model"] = args.model
    if getattr(args, "out", None) is not None:
        cfg["out"] = args.out
    if getattr(args, "replications", None) is not None:
        cfg["n_replications"] = args.replications
    if getattr(args, "scenario", None) is not None:
        cfg["scenario"] = args.scenario
    return cfg


def _optim_from_cfg(cfg: dict) -> OptimOptions:
    kw = dict(cfg.get("optim", {}))
    if "seed" not in kw and "seed" in cfg:
        kw["seed"] = cfg["seed"]
    return OptimOptions(**kw)


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def _spec_from_cfg(cfg: dict) -> ModelSpec:
    families = cfg.get("families")
    base = MODEL_SPECS["model4"]
    if families is not None:
        shared = families.get("shared", "sqexp")
        base = ModelSpec(
            shared_family=None if shared is None else CovFamily(shared),
            eta1_family=CovFamily(families.get("eta1", "sqexp")),
            eta2_family=CovFamily(families.get("eta2", "sqexp")),
        )
    kw = {}
    for key in ("nu", "gamma", "alpha", "free_shapes"):
        if key in cfg:
            kw[key] = cfg[key]
    if kw:
        import dataclasses

        base = dataclasses.replace(base, **kw)
    return base


def cmd_fit(args) -> int:
    cfg = _load_config(args, "fit")
    if "data" not in cfg:
        raise ConfigError("fit requires a 'data' path")
    data = load_dataset(cfg["data"], add_intercept=not cfg.get("no_intercept", False))
    opts = _optim_from_cfg(cfg)
    model_name = cfg.get("model", "mcgpp")
    if model_name == "cdr":
        fitted = fit_cdr(data, opts)
    elif model_name == "indep":
        fitted = fit(data, MODEL_SPECS["indep"], opts)
    elif model_name in ("mcgpp",):
        fitted = fit(data, _spec_from_cfg(cfg), opts)
    elif model_name in MODEL_SPECS:
        fitted = fit(data, MODEL_SPECS[model_name], opts)
    else:
        raise ConfigError(f"unknown model: {model_name!r}")
    out = _out_dir(cfg)
    save_model(fitted, out / "model.json")
    summary = [
        f"model kind     : {fitted.kind}",
        f"log-likelihood : {fitted.loglik!r}",
        f"AIC            : {aic(fitted)!r}",
        f"free parameters: {fitted.n_params}",
        f"converged      : {fitted.converged}",
        f"outer iters    : {fitted.n_iter}",
        f"beta1          : {fitted.beta.b1.tolist()!r}",
        f"beta2          : {fitted.beta.b2.tolist()!r}",
    ]
    (out / "fit_summary.txt").write_text("\n".join(summary) + "\n")
    print(f"wrote {out / 'model.json'}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args, "predict")
    for key in ("model_file", "data", "points"):
        if key not in cfg:
            raise ConfigError(f"predict requires {key!r}")
    fitted = load_model(cfg["model_file"])
    add_i = not cfg.get("no_intercept", False)
    data = load_dataset(cfg["data"], add_intercept=add_i)
    points = load_dataset(cfg["points"], add_intercept=add_i)
    if points.n1 != points.n2:
        raise ConfigError(
            "prediction points must pair one component-1 row with one "
            f"component-2 row; got {points.n1} vs {points.n2}"
        )
    preds = predict_batch(
        fitted,
        data,
        points.U1,
        points.U2,
        points.x1,
        points.x2,
        e1s=points.E1,
        e2s=points.E2,
    )
    out = _out_dir(cfg)
    path = out / "predictions.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component", "pair", "mean", "variance", "cross_cov"])
        npairs = points.n1
        for comp in (1, 2):
            for i in range(npairs):
                writer.writerow(
                    [
                        comp,
                        i,
                        repr(float(preds[f"mean{comp}"][i])),
                        repr(float(preds[f"var{comp}"][i])),
                        repr(float(preds["cross"][i])),
                    ]
                )
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args, "simulate")
    kw = {
        k: cfg[k]
        for k in (
            "scenario",
            "n1",
            "n2",
            "n_test",
            "n_replications",
            "seed",
            "gamma",
            "mean_input_scale",
            "amplitude_scale",
        )
        if k in cfg
    }
    if "models" in cfg:
        kw["models"] = tuple(cfg["models"])
    if "optim" in cfg:
        kw["optim"] = OptimOptions(**cfg["optim"])
    config = ScenarioConfig(**kw)
    table = run_replications(config)
    out = _out_dir(cfg)
    (out / "results.csv").write_text(table.to_csv())
    (out / "rmse_distribution.csv").write_text(table.distribution_csv())
    print(f"wrote {out / 'results.csv'}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_config(args, "diagnose")
    out = _out_dir(cfg)
    families = cfg.get("families", ["sqexp"])
    sizes = cfg.get("sizes", [8, 16, 32, 64, 110, 180, 280, 400])
    delta = cfg.get("delta", 1.0)
    seed = cfg.get("seed", 0)
    n_draws = cfg.get("n_draws", 20)
    amplitude2 = cfg.get("amplitude2", 0.04)
    rows = ["family,n,regret,regret_over_n"]
    for fam in families:
        curve = regret_growth(
            CovFamily(fam),
            sizes,
            delta,
            seed,
            amplitude2=amplitude2,
            n_draws=n_draws,
        )
        for n, r in zip(curve.sizes, curve.regret):
            rows.append(f"{fam},{n},{r!r},{(r / n)!r}")
    (out / "regret_curves.csv").write_text("\n".join(rows) + "\n")
    audit = pd_audit(n_draws=cfg.get("pd_draws", 200), seed=seed)
    (out / "pd_audit.csv").write_text(pd_audit_csv(audit))
    n_ok = sum(r["chol_ok"] for r in audit)
    worst = min(r["min_eig_ratio"] for r in audit)
    report = [
        f"PD audit draws          : {len(audit)}",
        f"cholesky (1e-6 jitter)  : {n_ok}/{len(audit)} succeeded",
        f"worst min-eig / norm    : {worst!r}",
    ]
    (out / "diagnose_report.txt").write_text("\n".join(report) + "\n")
    print(f"wrote {out / 'regret_curves.csv'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mcgpp",
        description="Bivariate Poisson regression with convolved-GP priors",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in (
        ("fit", cmd_fit),
        ("predict", cmd_predict),
        ("simulate", cmd_simulate),
        ("diagnose", cmd_diagnose),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
        if name == "fit":
            sp.add_argument("--model", choices=["mcgpp", "cdr", "indep"], default=None)
        if name == "simulate":
            sp.add_argument("--replications", type=int, default=None)
            sp.add_argument("--scenario", type=int, choices=[1, 2], default=None)
        sp.set_defaults(handler=handler)
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, DatasetFormatError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except Exception as exc:  # inner-module failures, with context
        json.dump(
            {"error": type(exc).__name__, "message": str(exc), "command": args.command},
            sys.stderr,
        )
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
