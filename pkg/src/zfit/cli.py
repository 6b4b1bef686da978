"""``zfit`` command line: generate | fit | bench.

Exit codes: 0 success, 1 usage/config error, 2 IO error, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .bench import BasinHopSettings, run_and_report
from .circuit import CircuitSyntaxError, parse_circuit
from .datagen import DEFAULT_CIRCUITS, GenerationConfig, generate_dataset, load_dataset, write_dataset
from .loss import GuardConfig, LossKind
from .solver import FitOptions, basinhop_fit, fit_multistart
from .spectrum import SpectrumFormatError, read_spectrum_csv

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

GEN_KEYS = ("circuits", "spectra_per_circuit", "freq_min", "freq_max", "points_per_decade",
            "noise_sigma_rel", "perturb_exponents")
FIT_KEYS = ("chi2_threshold", "r2_threshold", "max_restarts", "max_evaluations_per_restart", "paired",
            "gtol", "xtol", "ftol")
RUN_KEYS = ("seed", "losses", "jobs", "global", "hop_count", "step_scale", "temperature", "out",
            "canonical", "guards")
CONFIG_KEYS = frozenset(GEN_KEYS + FIT_KEYS + RUN_KEYS)

log = logging.getLogger("zfit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def split_top_level(text: str, sep: str = ",") -> list:
    """Split on ``sep`` outside square brackets, so circuit lists can use commas."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _add_common(p):
    p.add_argument("--config", help="JSON file with flat configuration keys")
    p.add_argument("--seed", type=int, help="global RNG seed (fallback: $ZFIT_SEED, then 0)")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_fit_flags(p):
    p.add_argument("--max-restarts", dest="max_restarts", type=int)
    p.add_argument("--chi2-threshold", dest="chi2_threshold", type=float)
    p.add_argument("--r2-threshold", dest="r2_threshold", type=float)
    p.add_argument("--paired", dest="paired", action="store_true", default=None)
    p.add_argument("--unpaired", dest="paired", action="store_false")
    p.add_argument("--global", dest="global", choices=("none", "basinhop"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zfit", description="Fit equivalent-circuit models to impedance spectra.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(g)
    g.add_argument("--out", help="output directory")
    g.add_argument("--circuits", help="comma-separated circuit list")
    g.add_argument("--spectra-per-circuit", dest="spectra_per_circuit", type=int)
    g.add_argument("--noise-sigma", dest="noise_sigma_rel", type=float)
    g.add_argument("--points-per-decade", dest="points_per_decade", type=int)

    f = sub.add_parser("fit", help="fit one spectrum CSV, print JSON")
    f.add_argument("spectrum", help="CSV with header freq_hz,z_real,z_imag")
    f.add_argument("--circuit", required=True)
    f.add_argument("--loss", default="x2", help="uw, x2, pw, b, log-b or log-bw")
    _add_common(f)
    _add_fit_flags(f)

    b = sub.add_parser("bench", help="compare losses over a dataset")
    b.add_argument("dataset", help="directory written by 'zfit generate'")
    _add_common(b)
    _add_fit_flags(b)
    b.add_argument("--out", help="report directory")
    b.add_argument("--losses", help="comma-separated loss tokens (default: all six)")
    b.add_argument("--canonical", action="store_true", default=None,
                   help="omit timing from the tables so reruns are byte-identical")
    return parser


def load_config(args) -> dict:
    """Config file values overridden by any flag that was given."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(cfg) - CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if "seed" not in cfg:
        env = os.environ.get("ZFIT_SEED")
        if env is not None:
            try:
                cfg["seed"] = int(env)
            except ValueError:
                raise UsageError(f"ZFIT_SEED must be an integer, got {env!r}") from None
    cfg.setdefault("seed", 0)
    if isinstance(cfg.get("circuits"), str):
        cfg["circuits"] = split_top_level(cfg["circuits"])
    if isinstance(cfg.get("losses"), str):
        cfg["losses"] = split_top_level(cfg["losses"])
    return cfg


def _generation_config(cfg) -> GenerationConfig:
    kwargs = {k: cfg[k] for k in GEN_KEYS if k in cfg}
    kwargs.setdefault("circuits", DEFAULT_CIRCUITS)
    try:
        return GenerationConfig(rng_seed=int(cfg["seed"]), **kwargs)
    except CircuitSyntaxError as exc:
        raise UsageError(f"bad circuit: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad generation config: {exc}") from None


def _fit_options(cfg) -> FitOptions:
    kwargs = {k: cfg[k] for k in FIT_KEYS if k in cfg}
    try:
        guards = GuardConfig(**cfg.get("guards", {}))
        return FitOptions(rng_seed=int(cfg["seed"]), guards=guards, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad fit options: {exc}") from None


def _losses(tokens) -> list:
    try:
        return [LossKind.from_token(t) for t in tokens]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _basinhop(cfg) -> BasinHopSettings:
    return BasinHopSettings(
        hop_count=int(cfg.get("hop_count", 50)),
        step_scale=float(cfg.get("step_scale", 0.5)),
        temperature=float(cfg.get("temperature", 1.0)),
    )


def _method(cfg) -> str:
    return "basinhop" if cfg.get("global", "none") == "basinhop" else "multistart"


def _jsonable(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def cmd_generate(args) -> int:
    cfg = load_config(args)
    gen = _generation_config(cfg)
    out = cfg.get("out")
    if not out:
        raise UsageError("generate needs --out")
    spectra, manifest = generate_dataset(gen, jobs=int(cfg.get("jobs", 1)))
    write_dataset(out, spectra, manifest)
    log.info("wrote %d spectra to %s", len(spectra), out)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args)
    kind = _losses([args.loss])[0]
    try:
        model = parse_circuit(args.circuit)
    except CircuitSyntaxError as exc:
        raise UsageError(f"bad circuit: {exc}") from None
    options = _fit_options(cfg)
    spectrum = read_spectrum_csv(args.spectrum)
    method = _method(cfg)
    if method == "basinhop":
        bh = _basinhop(cfg)
        out = basinhop_fit(model, spectrum, kind, options, bh.hop_count, bh.step_scale, bh.temperature)
    else:
        out = fit_multistart(model, spectrum, kind, options)
    result = {
        "circuit": str(model),
        "loss": kind.token,
        "method": method,
        "best_params": {n: float(v) for n, v in zip(model.param_names, out.best_params)},
        "converged": out.converged,
        "restarts_used": out.restarts_used,
        "chi2": out.chi2,
        "r2_score": out.r2_score,
        "r2_mag": out.r2_magnitude,
        "r2_phase": out.r2_phase,
        "final_loss": out.final_loss,
        "evaluations": out.evaluations,
        "wall_time": out.wall_time,
        "options": options.to_dict(),
        "config": _jsonable(cfg),
    }
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    options = _fit_options(cfg)
    losses = _losses(cfg.get("losses") or [k.token for k in LossKind])
    out = cfg.get("out")
    if not out:
        raise UsageError("bench needs --out")
    try:
        spectra, manifest = load_dataset(args.dataset)
    except (KeyError, json.JSONDecodeError) as exc:
        raise SpectrumFormatError(f"dataset manifest is malformed: {exc}") from None
    if not spectra:
        raise UsageError("dataset is empty")
    method = _method(cfg)
    report = run_and_report(
        spectra, manifest, losses, options, out,
        jobs=int(cfg.get("jobs", 1)), method=method, basinhop=_basinhop(cfg),
        canonical=bool(cfg.get("canonical", False)),
    )
    report_path = Path(out) / "report.json"
    body = json.loads(report_path.read_text(encoding="utf-8"))
    body["run_config"] = _jsonable(cfg)
    report_path.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    for loss, c in report["convergence"].items():
        log.info("%-7s converged %d/%d (%.1f%%)", loss, c["count"], c["total"], 100 * c["rate"])
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"zfit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"zfit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SpectrumFormatError) as exc:
        print(f"zfit: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        log.debug("internal error", exc_info=True)
        print(f"zfit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
