"""Command-line entry point: ``srsrr <subcommand> [--config FILE] [flags]``.

Every run writes ``config.json`` (the resolved configuration with all
defaults filled in) and ``manifest.json`` (configuration, seed and SHA-256
of every artifact) into its output directory.  A manifest can be passed
back as ``--config`` to rerun the same job.

Exit codes: 0 ok, 1 configuration error, 2 runtime failure, 3 validation
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adjustment import NestingError, ci_adjusted, fit_adjustment
from .allocator import AllocationError, AllocationInput, load_moments_csv, optimize
from .design import DesignEngine, DesignFailure, export_draw
from .equivalence import TINY_LAYOUTS, tiny_plan, tiny_population
from .estimator import REPORT_FIELDS, NotSupportedError, ci_unadjusted, from_analysis, observe
from .plan import PlanError, calibrate_threshold, load_plan
from .population import (
    BLOCKS,
    CovariateSchema,
    Population,
    PopulationError,
    load_population,
    load_schema,
    save_population,
    stratum_moments,
)
from .simlab import (
    DESIGNS,
    ESTIMATORS,
    ScenarioConfig,
    check_orderings,
    emit_report,
    equivalence_probe,
    run_study,
)
from .statkit import RngStream, SingularMatrixError, nu

log = logging.getLogger("srsrr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3
CONFIG_VERSION = 1
ENV_OUTPUT_ROOT = "SRSRR_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


class ValidationFailure(RuntimeError):
    pass


# key -> (kind, default); kinds drive both flag parsing and config checking
_COMMON = {"out": ("str", None), "seed": ("int", 0)}
_POP = {"pop": ("str", None), "schema": ("str", None)}
COMMANDS = {
    "calibrate": {
        "J": ("int", None), "p": ("float", 0.01), "plan": ("str", None), "draws": ("int", 0), **_POP,
    },
    "design": {"plan": ("str", None), "stage": ("str", "two-stage"), **_POP},
    "analyze": {
        "design": ("str", None), "a_S": ("num", None), "a_T": ("num", None), "alpha": ("float", 0.05),
        "mc_draws": ("int", 2_000_000), "adjusted": ("str", "auto"), **_POP,
    },
    "allocate": {
        "moments": ("str", None), "mode": ("str", "srse"), "f": ("float", None), "e": ("float", None),
        "a_S": ("num", None), "a_T": ("num", None), "p_S": ("float", None), "p_T": ("float", None),
        "max_iter": ("int", 500), "tol": ("float", 1e-8), **_POP,
    },
    "simulate": {
        "case": ("int", 1), "sizes": ("intlist", None), "heterogeneous": ("bool", False),
        "f": ("float", 0.1), "e": ("float", 0.5), "p_S": ("float", 0.01), "p_T": ("float", 0.01),
        "reps": ("int", 2000), "full": ("bool", False), "dgp_seed": ("int", 0),
        "designs": ("strlist", ["SRSE", "SRSE-S", "SRSE-R", "SRSRR"]), "estimators": ("strlist", list(ESTIMATORS)),
        "alpha": ("float", 0.05), "mc_draws": ("int", 200_000), "threads": ("int", 1), "check": ("bool", False),
    },
    "probe-equivalence": {
        "tiny": ("bool", False), "N": ("intlist", sorted(TINY_LAYOUTS)), "plan": ("str", None),
        "p_S": ("float", 0.5), "p_T": ("float", 0.5), "mode": ("str", "exact"),
        "n_z": ("int", 2000), "n_t": ("int", 500), **_POP,
    },
}
_DEFAULT_SEEDS = {"simulate": 2024}


def _keys(command: str) -> dict:
    keys = dict(_COMMON)
    keys.update(COMMANDS[command])
    if command in _DEFAULT_SEEDS:
        keys["seed"] = ("int", _DEFAULT_SEEDS[command])
    return keys


def _convert(kind: str, value, key: str):
    if value is None:
        return None
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "num":
            if isinstance(value, str) and value.strip().lower() in ("inf", "infinity"):
                return math.inf
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError
        if kind == "str":
            return str(value)
        if kind in ("intlist", "strlist"):
            items = value.split(",") if isinstance(value, str) else list(value)
            conv = int if kind == "intlist" else str
            return [conv(v.strip() if isinstance(v, str) else v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    raise AssertionError(kind)


def _flag_kind(kind: str):
    return {"int": int, "float": float}.get(kind, str)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are configuration errors, not argparse's default status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srsrr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config or manifest from an earlier run")
        for key, (kind, _) in _keys(name).items():
            flags = ["--" + key.replace("_", "-")]
            if "_" in key:
                flags.append("--" + key)
            if kind == "bool":
                sp.add_argument(*flags, dest=key, nargs="?", const="true", default=argparse.SUPPRESS)
            else:
                sp.add_argument(*flags, dest=key, type=_flag_kind(kind), default=argparse.SUPPRESS)
    return p


def _read_config(path: str, command: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "artifacts" in raw and "config" in raw:  # a manifest
        raw = dict(raw["config"], schema_version=raw.get("schema_version", CONFIG_VERSION),
                   command=raw.get("command", command))
    version = raw.pop("schema_version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config needs schema_version {CONFIG_VERSION}, got {version!r}")
    cmd = raw.pop("command", command)
    if cmd != command:
        raise ConfigError(f"config is for {cmd!r}, not {command!r}")
    return raw


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults, then file values, then flags; unknown keys are errors."""
    keys = _keys(command)
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {unknown}")
    cfg = {k: default for k, (_, default) in keys.items()}
    for src in (file_values, flag_values):
        for k, v in src.items():
            cfg[k] = _convert(keys[k][0], v, k)
    return cfg


def output_dir(cfg: dict, command: str) -> Path:
    root = os.environ.get(ENV_OUTPUT_ROOT)
    out = cfg.get("out")
    if out is None:
        return Path(root or "srsrr-out") / command
    out = Path(out)
    if root and not out.is_absolute():
        return Path(root) / out
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump(obj) -> str:
    def enc(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating, np.bool_)):
            return o.item()
        if isinstance(o, Path):
            return str(o)
        raise TypeError(type(o).__name__)

    def fix(o):
        if isinstance(o, float) and not math.isfinite(o):
            return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
        if isinstance(o, dict):
            return {str(k): fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        return o

    return json.dumps(fix(json.loads(json.dumps(obj, default=enc))), indent=2) + "\n"


def _write_json(path: Path, obj) -> Path:
    path.write_text(_dump(obj))
    return path


def write_manifest(outdir: Path, command: str, cfg: dict, artifacts: dict) -> Path:
    conf = _write_json(outdir / "config.json", {"schema_version": CONFIG_VERSION, "command": command, **cfg})
    files = {p.name: _sha256(p) for p in [*artifacts.values(), conf]}
    return _write_json(outdir / "manifest.json", {
        "schema_version": CONFIG_VERSION, "command": command, "package_version": __version__,
        "seed": cfg.get("seed"), "config": cfg, "artifacts": files,
    })


# ---------------------------------------------------------------------------
# loading helpers
# ---------------------------------------------------------------------------


def infer_schema(path) -> CovariateSchema:
    """Column roles from a header using the default names (w_1, x_1, ...)."""
    with open(path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    cols = {b: tuple(h for h in header if h.startswith(f"{b}_")) for b in BLOCKS}
    if {"y1", "y0"} <= set(header):
        mode = "oracle"
    elif {"z", "t", "y"} <= set(header):
        mode = "analysis"
    else:
        mode = "covariates"
    return CovariateSchema(mode=mode, **cols)


def _load_pop(cfg: dict, check_nesting: bool = True):
    if not cfg.get("pop"):
        raise ConfigError("a population file is required (--pop)")
    path = Path(cfg["pop"])
    if not path.exists():
        raise ConfigError(f"population file not found: {path}")
    if cfg.get("schema"):
        schema = load_schema(cfg["schema"])
    else:
        side = path.with_suffix(".schema.json")
        schema = load_schema(side) if side.exists() else infer_schema(path)
    return load_population(path, schema, check_nesting=check_nesting)


def _load_plan(cfg: dict, pop):
    if not cfg.get("plan"):
        raise ConfigError("a plan file is required (--plan)")
    if not Path(cfg["plan"]).exists():
        raise ConfigError(f"plan file not found: {cfg['plan']}")
    return load_plan(cfg["plan"], pop)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(cfg: dict, out: Path) -> dict:
    p = cfg["p"]
    pop = _load_pop(cfg) if cfg.get("pop") else None
    J = cfg["J"] if cfg["J"] is not None else (pop.J1 if pop is not None else None)
    if J is None:
        raise ConfigError("calibrate needs J or a population with W covariates")
    a = calibrate_threshold(J, p)
    result = {"J": J, "p": p, "a": a, "method": "asymptotic chi-squared quantile"}
    if cfg["draws"] > 0:
        if pop is None:
            raise ConfigError("empirical calibration needs --pop and --plan")
        plan = _load_plan(cfg, pop).with_thresholds(a_S=None, p_S=None, a_T=None, p_T=None)
        eng = DesignEngine(pop, plan)
        ms = eng.srse_m_s(RngStream(cfg["seed"]).generator(), cfg["draws"])
        rate = float(np.mean(ms <= a))
        result["empirical"] = {
            "draws": cfg["draws"], "acceptance_rate": rate,
            "standard_error": math.sqrt(rate * (1 - rate) / cfg["draws"]),
        }
    return {"calibration": _write_json(out / "calibration.json", result)}


def _audit(eng: DesignEngine, cfg: dict, sel, asg, status: str, detail: str = "") -> dict:
    P = eng.plan
    return {
        "status": status, "detail": detail, "stage": cfg["stage"], "seed": cfg["seed"],
        "design": P.design_tag, "J1": P.J1, "J2": P.J2,
        "a_S": P.a_S, "a_T": P.a_T, "threshold_source": {"S": P.source_S, "T": P.source_T},
        "asymptotic_acceptance": {"S": P.p_S, "T": P.p_T},
        "max_attempts": {"S": P.max_attempts_S, "T": P.max_attempts_T},
        "attempts": {"S": sel.attempts if sel is not None else None,
                     "T": asg.attempts if asg is not None else None},
        "m_s": sel.m_s if sel is not None else None,
        "m_t": asg.m_t if asg is not None else None,
        "n": P.n.tolist(), "n1": P.n1.tolist(),
    }


def cmd_design(cfg: dict, out: Path) -> dict:
    pop = _load_pop(cfg)
    plan = _load_plan(cfg, pop)
    eng = DesignEngine(pop, plan)
    stream = RngStream(cfg["seed"])
    if cfg["stage"] not in ("two-stage", "single-stage"):
        raise ConfigError(f"stage must be two-stage or single-stage, got {cfg['stage']!r}")
    sel = asg = None
    failure = None
    try:
        if cfg["stage"] == "two-stage":
            sel = eng.sample(stream.child(0))
            asg = eng.assign(sel, stream.child(1))
        else:
            sel, asg = eng.joint(stream)
    except DesignFailure as exc:
        failure = exc
        if exc.stage == "sampling":
            sel = exc.best
        elif exc.stage == "assignment":
            asg = exc.best
        elif exc.best is not None:
            sel, asg = exc.best
    arts = {}
    if sel is not None:
        export_draw(out / "draw.csv", pop, sel, asg)
        arts["draw"] = out / "draw.csv"
    status = "accepted" if failure is None else "failed"
    arts["audit"] = _write_json(out / "design.json", _audit(eng, cfg, sel, asg, status, str(failure or "")))
    if failure is not None:
        raise _Failed(arts, str(failure))
    if pop.has_oracle:
        data = observe(pop, sel, asg)
        y = np.full(pop.N, np.nan)
        y[sel.idx] = data.y
        obs = Population(
            pop.strata, w=pop.w, x=pop.x, e=pop.e, c=pop.c, unit_ids=pop.unit_ids, labels=pop.labels,
            z=sel.z, t=asg.full(sel), y=y, check_nesting=False,
        )
        save_population(obs, out / "observed.csv")
        arts["observed"] = out / "observed.csv"
    return arts


class _Failed(RuntimeError):
    """Runtime failure that still produced artifacts."""

    def __init__(self, artifacts: dict, message: str):
        super().__init__(message)
        self.artifacts = artifacts


def _design_metadata(cfg: dict, pop) -> tuple[float, float, str]:
    a_S, a_T, tag = cfg["a_S"], cfg["a_T"], "SRSRR"
    if cfg["design"]:
        try:
            meta = json.loads(Path(cfg["design"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read design metadata: {exc}") from None
        for key in ("a_S", "a_T"):
            if key not in meta:
                raise ConfigError(f"design metadata lacks {key}")
        a_S = a_S if a_S is not None else _convert("num", meta["a_S"], "a_S")
        a_T = a_T if a_T is not None else _convert("num", meta["a_T"], "a_T")
        tag = meta.get("design", tag)
        for J, key in ((pop.J1, "J1"), (pop.J2, "J2")):
            if key in meta and meta[key] != J:
                raise ConfigError(f"design metadata {key}={meta[key]} does not match the population ({J})")
    if a_S is None or a_T is None:
        raise ConfigError("analysis needs the design thresholds: pass --design design.json or --a-S/--a-T")
    return a_S, a_T, tag


def cmd_analyze(cfg: dict, out: Path) -> dict:
    pop = _load_pop(cfg, check_nesting=False)
    if pop.z is None:
        raise ConfigError("analyze needs an analysis-mode population (z, t, y columns)")
    a_S, a_T, tag = _design_metadata(cfg, pop)
    data = from_analysis(pop)
    reports = [ci_unadjusted(data, cfg["alpha"], a_S, a_T, design=tag, mc_draws=cfg["mc_draws"],
                             rng=RngStream(cfg["seed"]))]
    want = cfg["adjusted"].lower()
    if want not in ("auto", "true", "false"):
        raise ConfigError("adjusted must be auto, true or false")
    if want == "true" or (want == "auto" and (pop.J3 or pop.J4)):
        reports.append(ci_adjusted(fit_adjustment(data), cfg["alpha"], design=tag))
    path_json = _write_json(out / "report.json", [r.to_dict() for r in reports])
    with open(out / "report.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(REPORT_FIELDS)
        for r in reports:
            wr.writerow(r.csv_row())
    return {"report": path_json, "report_csv": out / "report.csv"}


def _threshold(a, p, J: int, stage: str) -> float:
    if a is not None and p is not None:
        raise ConfigError(f"give either a_{stage} or p_{stage}, not both")
    if a is not None:
        return a
    if p is not None:
        if J == 0:
            raise ConfigError(f"p_{stage} given but the {stage} block is empty")
        return calibrate_threshold(J, p)
    return math.inf


def cmd_allocate(cfg: dict, out: Path) -> dict:
    if cfg["f"] is None:
        raise ConfigError("allocate needs the total sampling fraction --f")
    mode = cfg["mode"]
    if cfg["moments"]:
        if not Path(cfg["moments"]).exists():
            raise ConfigError(f"moments file not found: {cfg['moments']}")
        inp = load_moments_csv(cfg["moments"], cfg["f"], mode)
    else:
        pop = _load_pop(cfg)
        inp = AllocationInput.from_moments(stratum_moments(pop), cfg["f"], mode)
    inp.a_S = _threshold(cfg["a_S"], cfg["p_S"], inp.J1, "S")
    inp.a_T = _threshold(cfg["a_T"], cfg["p_T"], inp.J2, "T")
    if cfg["e"] is not None:
        inp.e1 = np.full(inp.K, cfg["e"])
    res = optimize(inp) if mode == "srse" else _iterate(inp, cfg)
    n = np.rint(res.f_k * inp.sizes).astype(int)
    body = res.to_dict()
    body.update(
        mode=mode, f=inp.f, a_S=inp.a_S, a_T=inp.a_T,
        nu_S=nu(inp.J1, inp.a_S) if inp.J1 and math.isfinite(inp.a_S) else 1.0,
        nu_T=nu(inp.J2, inp.a_T) if inp.J2 and math.isfinite(inp.a_T) else 1.0,
        n_k=n.tolist(), n_k1=np.rint(res.e1 * n).astype(int).tolist(),
    )
    if not res.converged:
        log.warning("allocation did not converge within %d iterations", res.iterations)
    return {"allocation": _write_json(out / "allocation.json", body)}


def _iterate(inp, cfg):
    from .allocator import optimal_adjusted, optimal_srsrr

    fn = optimal_srsrr if inp.mode == "srsrr" else optimal_adjusted
    return fn(inp, max_iter=cfg["max_iter"], tol=cfg["tol"])


def cmd_simulate(cfg: dict, out: Path) -> dict:
    for d in cfg["designs"]:
        if d not in DESIGNS:
            raise ConfigError(f"unknown design {d!r}; choose from {list(DESIGNS)}")
    for e in cfg["estimators"]:
        if e not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {e!r}")
    if cfg["sizes"] is None and cfg["case"] not in (1, 2, 3):
        raise ConfigError("case must be 1, 2 or 3 unless sizes are given")
    sc = ScenarioConfig(
        case=cfg["case"] if cfg["sizes"] is None else "custom",
        sizes=tuple(cfg["sizes"]) if cfg["sizes"] else None, heterogeneous=cfg["heterogeneous"],
        f=cfg["f"], e=cfg["e"], p_S=cfg["p_S"], p_T=cfg["p_T"],
        reps=10_000 if cfg["full"] else cfg["reps"], seed=cfg["seed"], dgp_seed=cfg["dgp_seed"],
        designs=tuple(cfg["designs"]), estimators=tuple(cfg["estimators"]), alpha=cfg["alpha"],
        mc_draws=cfg["mc_draws"], threads=cfg["threads"],
        keep_samples=cfg["check"],
    )
    table = run_study(sc, progress=lambda name: log.info("finished %s", name))
    arts = emit_report(table, out)
    if cfg["check"]:
        checks = check_orderings(table, seed=cfg["seed"])
        arts["checks"] = _write_json(out / "checks.json", checks)
        bad = [c for c in checks if not c["passed"]]
        for c in checks:
            log.info("%s %s: %s", "PASS" if c["passed"] else "FAIL", c["name"], c["detail"])
        if bad:
            raise _Invalid(arts, "failed checks: " + "; ".join(c["name"] for c in bad))
    return arts


class _Invalid(ValidationFailure):
    def __init__(self, artifacts: dict, message: str):
        super().__init__(message)
        self.artifacts = artifacts


def cmd_probe(cfg: dict, out: Path) -> dict:
    results = []
    if cfg["tiny"]:
        for N in cfg["N"]:
            if N not in TINY_LAYOUTS:
                raise ConfigError(f"no tiny layout for N={N}; choose from {sorted(TINY_LAYOUTS)}")
            res = equivalence_probe(tiny_population(N, RngStream(cfg["seed"], (N,))), tiny_plan(N), cfg["mode"],
                                    p_S=cfg["p_S"], p_T=cfg["p_T"], rng=RngStream(cfg["seed"], (N, 1)),
                                    n_z=cfg["n_z"], n_t=cfg["n_t"])
            results.append({"N": N, **res.to_dict()})
    else:
        pop = _load_pop(cfg)
        plan = _load_plan(cfg, pop)
        exact = cfg["mode"] == "exact"
        res = equivalence_probe(pop, plan, cfg["mode"], p_S=cfg["p_S"] if exact else None,
                                p_T=cfg["p_T"] if exact else None, rng=RngStream(cfg["seed"]),
                                n_z=cfg["n_z"], n_t=cfg["n_t"])
        results.append({"N": pop.N, **res.to_dict()})
    d = [r["d_tv"] for r in results if r["d_tv"] is not None]
    body = {
        "results": results,
        "non_increasing": all(b <= a + 1e-12 for a, b in zip(d, d[1:])) if len(d) > 1 else None,
    }
    arts = {"probe": _write_json(out / "probe.json", body)}
    over = [r["N"] for r in results if r["d_tv"] is not None and r["d_tv"] > r["bound"] + 1e-12]
    if over:
        raise _Invalid(arts, f"d_TV exceeds the bound for N={over}")
    for r in results:
        log.info("N=%s d_TV=%s bound=%.6g", r["N"], r["d_tv"], r["bound"])
    return arts


HANDLERS = {
    "calibrate": cmd_calibrate, "design": cmd_design, "analyze": cmd_analyze,
    "allocate": cmd_allocate, "simulate": cmd_simulate, "probe-equivalence": cmd_probe,
}


def run(command: str, cfg: dict) -> tuple[int, Path]:
    out = output_dir(cfg, command)
    out.mkdir(parents=True, exist_ok=True)
    code, arts = EXIT_OK, {}
    try:
        arts = HANDLERS[command](cfg, out)
    except _Failed as exc:
        code, arts = EXIT_RUNTIME, exc.artifacts
        log.error("%s", exc)
    except _Invalid as exc:
        code, arts = EXIT_VALIDATION, exc.artifacts
        log.error("%s", exc)
    write_manifest(out, command, cfg, arts)
    return code, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s", stream=sys.stderr,
    )
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = _read_config(args.config, command) if args.config else {}
        cfg = resolve_config(command, file_values, flags)
        code, out = run(command, cfg)
    except (NestingError, NotSupportedError, ValidationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, PlanError, PopulationError, AllocationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DesignFailure, SingularMatrixError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(str(out))
    return code


if __name__ == "__main__":
    sys.exit(main())
