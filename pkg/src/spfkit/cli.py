"""Command-line front end.

Subcommands: rates, calibrate, fit, validate, compare, simulate. Each reads a
JSON config (``--config``), writes its artifacts under the output directory
and a ``manifest.json`` describing the run.

Exit codes: 0 success, 1 invalid input, 2 computation failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .calibration import calibration_factor, rate_summary
from .data import Dataset, ModelSpec, load_segments, split, write_segments
from .errors import ComputationError, InputError, SpecError
from .evaluate import (
    FittedModel,
    HsmModel,
    compare,
    gof,
    load_model,
    model_to_dict,
    save_model,
    synth_generate,
)
from .likelihood import FixedParams
from .mixed import DEFAULT_DRAWS, DEFAULT_SKIP, MixedParams, draw_count_diagnostic, fit_random
from .optimize import coefficient_table, fit_fixed
from .report import dumps, forecast_csv, rates_csv, scatter_svg, slug, write_json

log = logging.getLogger("spfkit")

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2, 64
COMMANDS = ("rates", "calibrate", "fit", "validate", "compare", "simulate")
DEFAULT_OUTPUT_DIR = "spfkit_out"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spfkit", description="Safety performance function estimation and validation.")
    parser.add_argument("--version", action="version", version=f"spfkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {
        "rates": "crash-rate summary table (CSV)",
        "calibrate": "HSM calibration factors (JSON)",
        "fit": "fit a Poisson/NB or random-parameter SPF",
        "validate": "score saved model artifacts on a dataset",
        "compare": "fit several SPFs on a training split and rank them on the held-out part",
        "simulate": "generate a synthetic segment dataset from a known model",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--input", type=Path, help="segment CSV (overrides config)")
        p.add_argument("--seed", type=int, help="seed for splits and simulation (overrides config)")
        p.add_argument("--output-dir", type=Path, help="artifact directory (overrides config and $SPFKIT_OUTPUT_DIR)")
        p.add_argument("--draws", type=int, help=f"Halton draws for random-parameter models (default {DEFAULT_DRAWS})")
        p.add_argument("--skip", type=int, help=f"leading Halton points discarded (default {DEFAULT_SKIP})")
        p.add_argument("--workers", type=int, default=1, help="threads for simulated likelihood evaluation")
        p.add_argument("--svg-timestamp", action="store_true", help="add a generation-time comment to SVG files")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("rates", "calibrate"):
            p.add_argument("--group-by", choices=("region", "all"))
        if name == "rates":
            p.add_argument("--kind", choices=("vmt", "per_mile"))
        if name == "calibrate":
            p.add_argument("--base-only", action="store_true", help="ignore CMFs (c_adj equals c_base)")
        if name == "validate":
            p.add_argument("--model", type=Path, action="append", dest="models", help="model artifact (repeatable)")
    return parser


# -- configuration -------------------------------------------------------------------


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def effective_config(args) -> tuple[dict, Path]:
    """Merge the config file with command-line overrides; return (config, base dir for relative paths)."""
    if args.config:
        cfg = _read_json(args.config)
        base = args.config.resolve().parent
    else:
        cfg, base = {}, Path.cwd()
    cfg = copy.deepcopy(cfg)
    block = cfg.setdefault(args.command, {})
    if args.input:
        cfg["input"] = str(args.input.resolve())
    if args.output_dir:
        cfg["output_dir"] = str(args.output_dir.resolve())
    elif "output_dir" in cfg:
        cfg["output_dir"] = str(_path(base, cfg["output_dir"]))
    else:
        cfg["output_dir"] = os.environ.get("SPFKIT_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.draws is not None:
        cfg["draws"] = args.draws
    if args.skip is not None:
        cfg["skip"] = args.skip
    if getattr(args, "group_by", None):
        block["group_by"] = args.group_by
    if getattr(args, "kind", None):
        block["kind"] = args.kind
    if getattr(args, "base_only", False):
        block["adjusted"] = False
    if getattr(args, "models", None):
        block["models"] = [str(m.resolve()) for m in args.models]
    return cfg, base


def _path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _load_input(cfg: dict, base: Path) -> Dataset:
    if "input" not in cfg:
        raise InputError("no input CSV given (use --input or 'input' in the config)")
    schema = cfg.get("schema")
    if isinstance(schema, str):
        schema = _read_json(_path(base, schema))
    return load_segments(_path(base, cfg["input"]), schema)


def _spec(d: dict, cfg: dict) -> ModelSpec:
    d = dict(d)
    d.pop("kind", None)
    for key in ("draws", "skip"):
        if key in cfg:
            d[key] = cfg[key]
    if "seed" in cfg and "seed" not in d:
        d["seed"] = cfg["seed"]
    try:
        return ModelSpec.from_dict(d)
    except TypeError as exc:
        raise SpecError(f"invalid model spec: {exc}") from None


def _split_cfg(cfg: dict, block: dict) -> dict | None:
    s = block.get("split", cfg.get("split"))
    if s is None:
        return None
    out = {"fraction": float(s.get("fraction", 0.7)), "seed": int(s.get("seed", 0))}
    if "seed" in cfg:
        out["seed"] = int(cfg["seed"])
    return out


def _fit(data: Dataset, spec: ModelSpec, workers: int):
    return fit_random(data, spec, workers=workers) if spec.form == 4 else fit_fixed(data, spec)


def _fit_report(fit, data: Dataset) -> dict:
    out = fit.to_dict()
    out["gof"] = gof(fit).to_dict()
    if fit.spec.form == 4 and fit.spec.random:
        out["draw_diagnostic"] = draw_count_diagnostic(fit, data)
    return out


# -- commands -----------------------------------------------------------------------------


def cmd_rates(cfg, base, out: Path, args) -> list[Path]:
    block = cfg.get("rates", {})
    data = _load_input(cfg, base)
    kind = block.get("kind", "vmt")
    summaries = rate_summary(data, kind=kind, group_by=block.get("group_by", "region"))
    if block.get("group_by", "region") == "region":
        summaries = rate_summary(data, kind=kind, group_by="all") + summaries
    path = out / f"rates_{kind}.csv"
    path.write_text(rates_csv(summaries, digits=2 if kind == "vmt" else 3), encoding="utf-8")
    print(path.read_text(encoding="utf-8"), end="")
    return [path]


def cmd_calibrate(cfg, base, out: Path, args) -> list[Path]:
    block = cfg.get("calibrate", {})
    data = _load_input(cfg, base)
    adjusted = bool(block.get("adjusted", True))
    group_by = block.get("group_by", "all")
    groups = calibration_factor(data, adjusted=adjusted, group_by=group_by)
    overall = groups if group_by == "all" else calibration_factor(data, adjusted=adjusted, group_by="all")
    result = {"adjusted": adjusted, "group_by": group_by, "overall": overall[0].to_dict(),
              "groups": [g.to_dict() for g in groups]}
    paths = [write_json(out / "calibration.json", result)]
    model = HsmModel("HSM-SPF x C", overall[0].factor)
    paths.append(out / "model_hsm_calibrated.json")
    save_model(model, paths[-1])
    for g in groups:
        print(f"{g.group:<16} n={g.n:<5} c_base={g.c_base:.3f} c_adj={g.c_adj:.3f}")
    return paths


def cmd_fit(cfg, base, out: Path, args) -> list[Path]:
    block = cfg.get("fit")
    if not block:
        raise InputError("config has no 'fit' block with a model spec")
    data = _load_input(cfg, base)
    s = _split_cfg(cfg, block)
    spec_d = {k: v for k, v in block.items() if k != "split"}
    spec = _spec(spec_d, cfg)
    train = split(data, s["fraction"], s["seed"])[0] if s else data
    fit = _fit(train, spec, args.workers)
    name = slug(spec.label or "model")
    paths = [write_json(out / f"fit_{name}.json", _fit_report(fit, train))]
    paths.append(out / f"model_{name}.json")
    save_model(FittedModel.from_fit(fit), paths[-1])
    table = coefficient_table(fit)
    paths.append(out / f"coefficients_{name}.txt")
    paths[-1].write_text(table + "\n", encoding="utf-8")
    print(table)
    if not fit.converged:
        log.warning("fit did not converge: %s", fit.message)
    return paths


def _write_reports(out: Path, comparison, args, tag: str) -> list[Path]:
    paths = [write_json(out / f"{tag}.json", {
        "ranking": comparison.ranking,
        "reports": [r.to_dict() for r in comparison.reports],
        "failures": [{"model": m, "error": e} for m, e in comparison.failures],
    })]
    paths.append(out / f"{tag}.csv")
    paths[-1].write_text(forecast_csv(comparison.reports), encoding="utf-8")
    for r in comparison.reports:
        paths.append(out / f"scatter_{slug(r.model_label)}.svg")
        paths[-1].write_text(scatter_svg(r, timestamp=args.svg_timestamp), encoding="utf-8")
    print(paths[1].read_text(encoding="utf-8"), end="")
    for m, e in comparison.failures:
        log.error("model %s failed: %s", m, e)
    return paths


def cmd_validate(cfg, base, out: Path, args) -> list[Path]:
    block = cfg.get("validate", {})
    if not block.get("models"):
        raise InputError("validate needs model artifacts (--model or validate.models)")
    data = _load_input(cfg, base)
    s = _split_cfg(cfg, block)
    test = split(data, s["fraction"], s["seed"])[1] if s else data
    models = [load_model(_path(base, m)) for m in block["models"]]
    return _write_reports(out, compare(models, test), args, "validation")


def _build_models(entries, train: Dataset, cfg, base, out: Path, workers: int):
    models, fits, paths = [], {}, []
    for i, entry in enumerate(entries):
        kind = entry.get("kind", "fit")
        if kind == "hsm":
            models.append(HsmModel(entry.get("label", "HSM-SPF"), 1.0, bool(entry.get("apply_cmfs", False))))
        elif kind == "hsm_calibrated":
            adjusted = bool(entry.get("adjusted", True))
            c = calibration_factor(train, adjusted=adjusted, group_by="all")[0].factor
            models.append(HsmModel(entry.get("label", "HSM-SPF x C"), c, bool(entry.get("apply_cmfs", False))))
        elif kind == "artifact":
            models.append(load_model(_path(base, entry["path"])))
        elif kind == "fit":
            spec = _spec({k: v for k, v in entry.items() if k != "kind"}, cfg)
            label = spec.label or f"model {i + 1}"
            fit = _fit(train, spec, workers)
            fits[label] = _fit_report(fit, train)
            models.append(FittedModel.from_fit(fit, label))
        else:
            raise SpecError(f"unknown model kind {kind!r}")
        path = out / "models" / f"{slug(models[-1].label)}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(models[-1], path)
        paths.append(path)
    return models, fits, paths


def cmd_compare(cfg, base, out: Path, args) -> list[Path]:
    block = cfg.get("compare", {})
    if not block.get("models"):
        raise InputError("compare needs a 'models' list")
    data = _load_input(cfg, base)
    s = _split_cfg(cfg, block) or {"fraction": 0.7, "seed": 0}
    train, test = split(data, s["fraction"], s["seed"])
    models, fits, paths = _build_models(block["models"], train, cfg, base, out, args.workers)
    paths.append(write_json(out / "fits.json", fits))
    paths.append(write_json(out / "split.json", {"fraction": s["fraction"], "seed": s["seed"],
                                                  "train": train.ids, "test": test.ids}))
    return paths + _write_reports(out, compare(models, test), args, "compare")


def _truth(d: dict, spec: ModelSpec):
    ln_alpha = d.get("ln_alpha")
    if ln_alpha is None and d.get("alpha") is not None:
        ln_alpha = float(np.log(d["alpha"]))
    if "beta" in d:
        return FixedParams(np.array(d["beta"], float), ln_alpha)
    return MixedParams(np.array(d["beta_fixed"], float), np.array(d["mu_random"], float),
                       np.array(d["sigma_random"], float), ln_alpha)


def cmd_simulate(cfg, base, out: Path, args) -> list[Path]:
    block = cfg.get("simulate", {})
    if "truth" not in block or "spec" not in block:
        raise InputError("simulate needs 'spec' and 'truth' blocks")
    spec = _spec(block["spec"], cfg)
    truth = _truth(block["truth"], spec)
    seed = int(cfg.get("seed", block.get("seed", 0)))
    ranges = {k: (v if isinstance(v, (int, float)) else tuple(v)) for k, v in block.get("covariate_ranges", {}).items()}
    data = synth_generate(truth, spec, int(block.get("n", 299)), seed, ranges, years=int(block.get("years", 5)))
    path = out / "synthetic.csv"
    write_segments(data, path)
    truth_path = write_json(out / "truth.json", data.provenance["truth"])
    print(f"wrote {len(data)} segments to {path}")
    return [path, truth_path]


HANDLERS = {
    "rates": cmd_rates,
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "validate": cmd_validate,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def _manifest(command: str, cfg: dict, outputs: list[Path], out: Path) -> dict:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return {
        "command": command,
        "config_sha256": hashlib.sha256(canon.encode("utf-8")).hexdigest(),
        "config": cfg,
        "seeds": {k: v for k, v in {"seed": cfg.get("seed"), "split": cfg.get(command, {}).get("split")}.items()
                  if v is not None},
        "versions": {
            "spfkit": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"spfkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, base = effective_config(args)
        out = Path(cfg["output_dir"])
        out = out if out.is_absolute() else Path.cwd() / out
        out.mkdir(parents=True, exist_ok=True)
        outputs = HANDLERS[args.command](cfg, base, out, args)
        (out / "manifest.json").write_text(dumps(_manifest(args.command, cfg, outputs, out)), encoding="utf-8")
    except InputError as exc:
        print(f"spfkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ComputationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"spfkit: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
