"""
Command-line interface: ``shorttail <command> [options]``.

Every command resolves its configuration as built-in defaults, overridden by
an optional ``--config`` JSON file, overridden by flags given explicitly on
the command line.  Results go to ``--out`` together with a manifest sidecar
recording the command, resolved configuration, seed, package version, input
digests and wall-clock time.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 numerical or estimation failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import RollingScheme, run_backtest
from .distributions import PRESETS, RNG_ALGORITHM, ModelSpec, SeededStream, sample
from .errors import ConfigError, DataError, EstimationError, ShortTailError
from .extreme_expectile import estimate as estimate_expectile
from .data_io import load_price_csv, load_series_csv, weekly_loss_returns, write_series_csv
from .montecarlo import ESTIMATORS, METHODS, MCConfig, run_mc_study, table1_check
from .tail_fit import fit_tail, select_k_path_stability

log = logging.getLogger("shorttail")

SCHEMA_VERSION = 1
EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 2, 3, 4

DEFAULTS = {
    "simulate": {"model": "beta-iid", "n": 300, "seed": 0, "replicate": 0, "dependence": None,
                 "rho": None, "out": None},
    "fit": {"input": None, "column": None, "k": None, "auto_k": False, "k_min": None,
            "k_max": None, "method": "gpml", "out": None},
    "estimate": {"input": None, "column": None, "p": None, "k": None, "auto_k": False,
                 "k_min": None, "k_max": None, "method": "gpml", "estimator": "laws",
                 "out": None},
    "mc-study": {"model": "beta-iid", "n": 300, "M": 1000, "p": None, "k_min": None,
                 "k_max": None, "estimator": ",".join(ESTIMATORS), "method": ",".join(METHODS),
                 "seed": 0, "workers": 1, "out": None},
    "backtest": {"input": None, "column": None, "n": 300, "mode": "expectile",
                 "level_grid": "0.99:0.9999:101", "k_min": None, "k_max": None,
                 "workers": 1, "out": None},
    "table1": {"model": "beta-iid", "n": 300, "tol": 5e-4, "mc_draws": 10**8, "seed": 0,
               "out": None},
    "weekly-returns": {"input": None, "date_column": "date", "price_column": "close",
                       "date_format": "%Y-%m-%d", "week_convention": "AnchoredSunday",
                       "out": None},
}


# ---------------------------------------------------------------------------
# Argument parsing and configuration
# ---------------------------------------------------------------------------

def _add_k_flags(p, single=True):
    if single:
        p.add_argument("--k", type=int, help="number of top order statistics")
        p.add_argument("--auto-k", action="store_true", default=None,
                       help="choose k by path stability of the index estimate")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shorttail", description=__doc__.split("\n\n")[0].strip())
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    # every default is None here so explicit flags can be told apart from defaults
    s = sub.add_parser("simulate", help="draw a sample from a model preset")
    s.add_argument("--model", help=f"preset name ({', '.join(PRESETS)})")
    s.add_argument("--n", type=int)
    s.add_argument("--dependence", choices=["iid", "ar1"])
    s.add_argument("--rho", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--replicate", type=int, help="substream index")

    f = sub.add_parser("fit", help="fit tail parameters to the top k observations")
    f.add_argument("--input")
    f.add_argument("--column")
    _add_k_flags(f)
    f.add_argument("--method", choices=["gpml", "moment"])

    e = sub.add_parser("estimate", help="estimate an extreme expectile")
    e.add_argument("--input")
    e.add_argument("--column")
    e.add_argument("--p", type=float, help="tail probability; the level is 1 - p")
    _add_k_flags(e)
    e.add_argument("--method", choices=["gpml", "moment"])
    e.add_argument("--estimator", choices=list(ESTIMATORS))

    m = sub.add_parser("mc-study", help="Monte Carlo comparison of the estimators")
    m.add_argument("--model")
    m.add_argument("--n", type=int)
    m.add_argument("--M", type=int)
    m.add_argument("--p", type=float)
    _add_k_flags(m, single=False)
    m.add_argument("--estimator", help="comma-separated subset of " + ",".join(ESTIMATORS))
    m.add_argument("--method", help="comma-separated subset of " + ",".join(METHODS))
    m.add_argument("--seed", type=int)
    m.add_argument("--workers", type=int)

    b = sub.add_parser("backtest", help="rolling-window forecast backtest")
    b.add_argument("--input")
    b.add_argument("--column")
    b.add_argument("--n", type=int, help="window length")
    b.add_argument("--mode", choices=["expectile", "quantile"])
    b.add_argument("--level-grid", help="'start:stop:num' or comma-separated levels")
    _add_k_flags(b, single=False)
    b.add_argument("--workers", type=int)

    t = sub.add_parser("table1", aliases=["oracle"], help="check true expectiles at level 1 - 1/n")
    t.add_argument("--model")
    t.add_argument("--n", type=int)
    t.add_argument("--tol", type=float)
    t.add_argument("--mc-draws", type=int, help="pooled Monte Carlo draws (0 skips)")
    t.add_argument("--seed", type=int)

    w = sub.add_parser("weekly-returns", help="weekly loss returns from daily prices")
    w.add_argument("--input")
    w.add_argument("--date-column")
    w.add_argument("--price-column")
    w.add_argument("--date-format")
    w.add_argument("--week-convention", choices=["AnchoredSunday", "ISOWeek"])

    for p in (s, f, e, m, b, t, w):
        p.add_argument("--out", help="output path (file or directory)")
        p.add_argument("--config", help="JSON file with option overrides")
    return ap


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(doc)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _model(spec) -> ModelSpec:
    if isinstance(spec, dict):
        return ModelSpec.from_dict(spec)
    if spec in PRESETS:
        return PRESETS[spec]
    raise ConfigError(f"unknown model {spec!r}; presets are {', '.join(PRESETS)}")


def _model_name(spec) -> str:
    return spec if isinstance(spec, str) else f"{spec.get('family', 'model')}"


def _parse_levels(text) -> np.ndarray:
    if isinstance(text, (list, tuple)):
        levels = np.asarray(text, dtype=float)
    else:
        text = str(text).strip()
        if not text:
            raise ConfigError("level grid is empty")
        try:
            if ":" in text:
                a, b, num = text.split(":")
                levels = np.linspace(float(a), float(b), int(num))
            else:
                levels = np.array([float(v) for v in text.split(",") if v.strip()])
        except ValueError:
            raise ConfigError(f"cannot parse level grid {text!r}") from None
    if levels.size == 0:
        raise ConfigError("level grid is empty")
    if np.any(levels <= 0) or np.any(levels >= 1):
        raise ConfigError("levels must lie in (0, 1)")
    return levels


def _k_range(cfg, n):
    lo = cfg.get("k_min") or max(2, math.ceil(0.01 * n))
    hi = cfg.get("k_max") or math.floor(0.25 * n)
    if not (2 <= lo <= hi < n):
        raise ConfigError(f"invalid k range [{lo}, {hi}] for n={n}")
    return int(lo), int(hi)


def _choose_k(cfg, x):
    n = x.size
    if cfg.get("auto_k"):
        lo, hi = _k_range(cfg, n)
        sel = select_k_path_stability(x, lo, hi, cfg["method"])
        return sel.k, sel.to_dict()
    if cfg.get("k") is None:
        raise ConfigError("give --k or --auto-k")
    return int(cfg["k"]), None


def _read_sample(cfg):
    _require(cfg, "input")
    try:
        return load_series_csv(cfg["input"], cfg.get("column"))
    except OSError as exc:
        raise DataError(f"cannot read {cfg['input']}: {exc}") from None


class Outputs:
    """Collects output files and writes them with a manifest sidecar."""

    def __init__(self, command, cfg, seed=None):
        self.command, self.cfg, self.seed = command, cfg, seed
        self.start = time.time()

    def _manifest(self, files):
        inputs = {}
        if self.cfg.get("input"):
            inputs[str(self.cfg["input"])] = _digest(self.cfg["input"])
        return {
            "command": self.command,
            "config": self.cfg,
            "seed": self.seed,
            "rng": RNG_ALGORITHM,
            "version": __version__,
            "input_digests": inputs,
            "outputs": sorted(files),
            "wall_clock": {
                "started": dt.datetime.fromtimestamp(self.start, dt.timezone.utc).isoformat(),
                "seconds": round(time.time() - self.start, 3),
            },
        }

    def write(self, files: dict, stdout_text: str = ""):
        out = self.cfg.get("out")
        if out is None:
            if stdout_text:
                sys.stdout.write(stdout_text)
            return
        out = Path(out)
        if len(files) == 1 and out.suffix:
            (name, text), = files.items()
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text, encoding="utf-8")
            manifest_path = out.with_name(out.name + ".manifest.json")
            written = [out.name]
        else:
            out.mkdir(parents=True, exist_ok=True)
            for name, text in files.items():
                (out / name).write_text(text, encoding="utf-8")
            manifest_path = out / "manifest.json"
            written = list(files)
        manifest_path.write_text(json.dumps(self._manifest(written), indent=1, sort_keys=True) + "\n",
                                 encoding="utf-8")
        if stdout_text:
            sys.stdout.write(stdout_text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    model = _model(cfg["model"])
    if cfg.get("dependence") == "iid":
        model = ModelSpec(model.marginal)
    elif cfg.get("dependence") == "ar1":
        rho = cfg.get("rho")
        if rho is None:
            rho = model.rho if model.rho is not None else next(
                s.rho for s in PRESETS.values() if s.marginal == model.marginal and s.rho is not None)
        model = ModelSpec(model.marginal, rho)
    elif cfg.get("rho") is not None:
        model = ModelSpec(model.marginal, cfg["rho"])
    if cfg["n"] is None or cfg["n"] < 1:
        raise ConfigError("--n must be positive")
    x = sample(model, int(cfg["n"]), SeededStream(int(cfg["seed"]), int(cfg["replicate"])))
    text = write_series_csv(x, "value")
    Outputs("simulate", {**cfg, "resolved_model": model.to_dict()}, cfg["seed"]).write(
        {"sample.csv": text}, "" if cfg.get("out") else text)
    return 0


def cmd_fit(cfg):
    x = _read_sample(cfg)
    k, sel = _choose_k(cfg, x)
    fit = fit_tail(x, k, cfg["method"])
    doc = {"fit": fit.to_dict(), "k_selection": sel}
    text = _dumps(doc)
    Outputs("fit", cfg).write({"fit.json": text}, text)
    return 0


def cmd_estimate(cfg):
    _require(cfg, "p")
    x = _read_sample(cfg)
    p = float(cfg["p"])
    if not (0 < p < 1):
        raise ConfigError("--p must lie in (0, 1)")
    sel = None
    if cfg["estimator"] == "empirical":
        k = None
    else:
        k, sel = _choose_k(cfg, x)
    est, fit = estimate_expectile(x, p, k, cfg["estimator"], cfg["method"])
    doc = {"estimate": est.to_dict(), "fit": fit.to_dict() if fit else None, "k_selection": sel,
           "n": int(x.size)}
    text = _dumps(doc)
    Outputs("estimate", cfg).write({"estimate.json": text}, text)
    return 0


def _split(val):
    if isinstance(val, (list, tuple)):
        return tuple(val)
    return tuple(v.strip().lower() for v in str(val).split(",") if v.strip())


def cmd_mc_study(cfg):
    model = _model(cfg["model"])
    n = int(cfg["n"])
    lo, hi = _k_range(cfg, n)
    config = MCConfig(model, n, int(cfg["M"]), cfg.get("p"), tuple(range(lo, hi + 1)),
                      _split(cfg["estimator"]), _split(cfg["method"]), int(cfg["seed"]))
    report = run_mc_study(config, workers=int(cfg["workers"]))
    name = _model_name(cfg["model"])
    files = {"mc_report.csv": report.to_csv(name), "mc_report.json": report.to_json() + "\n"}
    # worker count does not affect results, so keep it out of the reproducibility record
    Outputs("mc-study", {**cfg, "workers": None}, cfg["seed"]).write(files)
    sys.stdout.write(_dumps({"truth": report.truth, "rows": len(report.rows),
                             "k_grid": [lo, hi], "M": config.M}))
    return 0


def cmd_backtest(cfg):
    x = _read_sample(cfg)
    levels = _parse_levels(cfg["level_grid"])
    n = int(cfg["n"])
    scheme = RollingScheme(x, n)
    lo, hi = _k_range(cfg, n)
    report = run_backtest(scheme, levels, cfg["mode"], k_grid=list(range(lo, hi + 1)),
                          workers=int(cfg["workers"]))
    files = {"scores.csv": report.to_csv(), "scores.json": report.to_json() + "\n",
             "forecasts.csv": report.forecasts_csv()}
    Outputs("backtest", {**cfg, "workers": None}).write(files)
    first = report.level_grid[0]
    sys.stdout.write(_dumps({"T": report.T, "forecasters": report.forecasters,
                             "ranking_at_" + repr(float(first)): report.ranking(first)}))
    return 0


def cmd_table1(cfg):
    n = int(cfg["n"])
    res = table1_check(cfg["model"] if isinstance(cfg["model"], str) else _model(cfg["model"]),
                       n, float(cfg["tol"]), int(cfg["mc_draws"]) or None, int(cfg["seed"]))
    doc = {"model": res.model, "n": res.n, "table_value": res.table_value,
           "oracle_value": res.oracle_value, "mc_value": res.mc_value, "mc_se": res.mc_se,
           "pass": res.passed}
    text = _dumps(doc)
    Outputs("table1", cfg, cfg["seed"]).write({"table1.json": text}, text)
    return 0 if res.passed else EXIT_ESTIMATION


def cmd_weekly_returns(cfg):
    _require(cfg, "input")
    try:
        prices = load_price_csv(cfg["input"], cfg["date_column"], cfg["price_column"],
                                cfg["date_format"])
    except OSError as exc:
        raise DataError(f"cannot read {cfg['input']}: {exc}") from None
    series = weekly_loss_returns(prices, cfg["week_convention"])
    text = series.to_csv()
    Outputs("weekly-returns", cfg).write({"weekly_losses.csv": text}, "" if cfg.get("out") else text)
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "estimate": cmd_estimate,
    "mc-study": cmd_mc_study, "backtest": cmd_backtest, "table1": cmd_table1,
    "oracle": cmd_table1, "weekly-returns": cmd_weekly_returns,
}


def _error(code, exc):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "diagnostics", None):
        doc["diagnostics"] = exc.diagnostics
    sys.stderr.write(json.dumps(doc, sort_keys=True, default=str) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = "table1" if args.command == "oracle" else args.command
    try:
        cfg = resolve_config(command, args)
        return COMMANDS[command](cfg)
    except ConfigError as exc:
        return _error(EXIT_USAGE, exc)
    except DataError as exc:
        return _error(EXIT_DATA, exc)
    except EstimationError as exc:
        return _error(EXIT_ESTIMATION, exc)
    except ShortTailError as exc:  # pragma: no cover - every subclass is handled above
        return _error(EXIT_ESTIMATION, exc)


if __name__ == "__main__":
    sys.exit(main())
