"""Command-line driver: generate, optimize, sweep, render, report."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, field
from math import sqrt
from pathlib import Path

import numpy as np

from . import report
from .automaton import SCHEMES, build_periodic_cell, build_topology, get_scheme
from .energy import epsilon_from_diffuse
from .geometry import (
    DegenerateGeometryError,
    DofVector,
    GeometrySpec,
    geometry_from_json,
    geometry_to_json,
    initial_geometry,
)
from .optimizer import OptimizationTrace, OptimizerConfig, continuation, default_start

log = logging.getLogger("twinbranch")

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_UNCONVERGED = 0, 1, 2, 3
EXIT_INTERRUPTED = 130

PRESETS = {
    "paper": {
        "eps_tilde": 2 * sqrt(5) * 1e-3,
        "sigma": 10.0,
        "L": 0.5,
        "N": "fixed:2",
        "K_start": 4,
        "K_max": 14,
        "max_work": 1e8,
    },
    "none": {},
}

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, help); every key is also a flag with "_" spelled "-"
KEYS = {
    "preset": (str, "parameter preset applied before the config file (paper or none)"),
    "scheme": (str, "scheme name(s): NEW, KM, L; comma separated where several are allowed"),
    "epsilon": (float, "sharp-interface energy coefficient"),
    "eps_tilde": (float, "diffuse interface width, converted together with --sigma"),
    "sigma": (float, "diffuse well height, converted together with --eps-tilde"),
    "L": (float, "domain length"),
    "N": (str, "fixed:<value> or free"),
    "K": (int, "level for generate"),
    "K_start": (int, "first optimised level"),
    "K_max": (int, "last optimised level"),
    "g_tol": (float, "projected gradient tolerance relative to the initial gradient"),
    "f_tol": (float, "relative energy decrease over the stall window that counts as converged"),
    "x_tol": (float, "step tolerance"),
    "max_iter": (int, "iteration cap per level"),
    "max_work": (float, "cap on iterations times parameters per level"),
    "memory": (int, "quasi-Newton memory"),
    "delta_geom": (float, "minimal ordinate gap"),
    "seed": (int, "recorded for reproducibility; the solver is deterministic"),
    "timing": (_bool, "record wall-clock seconds in traces"),
    "free_facet_tips": (_bool, "optimise tips of spikes born inside facets (true) or keep their warm start"),
    "window": (str, "render window x0,x1,y0,y1 (x physical, y in cell units)"),
    "eps_list": (str, "comma separated epsilon values for sweep"),
    "geometry": (str, "geometry JSON to render"),
    "out": (str, "output directory"),
}


TOP = "top"


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    schemes: list
    epsilon: float
    L: float
    opt: OptimizerConfig
    out: Path
    K: int | None = None
    window: report.Window | None = None
    eps_list: list = field(default_factory=list)
    geometry: Path | None = None
    seed: int = 0
    args: argparse.Namespace | None = None

    def for_scheme(self, name: str) -> "RunConfig":
        """The configuration with the [name] section of the config file applied."""
        return resolve(self.args, name) if self.args is not None else self


def _read_config(path: str) -> configparser.ConfigParser:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    # top-level keys land in a plain section so scheme sections do not inherit them
    cp = configparser.ConfigParser(interpolation=None, default_section="\0")
    cp.optionxform = str
    try:
        cp.read_string(f"[{TOP}]\n" + p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    for sec in cp.sections():
        if sec != TOP and sec.upper() not in SCHEMES:
            raise ConfigError(f"unknown section [{sec}] in {path}")
        for k in cp[sec]:
            if k not in KEYS or k == "preset" and sec != TOP:
                raise ConfigError(f"unknown key {k!r} in [{sec}] of {path}")
    return cp


def _merge(args, scheme: str | None) -> dict:
    """preset < config top level < config scheme section < flags."""
    flags = {k: getattr(args, k) for k in KEYS if getattr(args, k, None) is not None}
    cp = _read_config(args.config) if args.config else None
    preset = flags.get("preset") or (cp[TOP].get("preset") if cp else None) or "paper"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    layers = [dict(PRESETS[preset])]
    if cp is not None:
        for sec in cp.sections():
            if sec == TOP or scheme is not None and sec.upper() == scheme.upper():
                layer = {}
                for k, v in cp[sec].items():
                    try:
                        layer[k] = KEYS[k][0](v)
                    except ValueError:
                        raise ConfigError(f"bad value for {k}: {v!r}") from None
                layers.insert(1 if sec == TOP else len(layers), layer)
    layers.append(flags)
    vals = {}
    for layer in layers:
        if "epsilon" in layer and ("eps_tilde" in layer or "sigma" in layer):
            raise ConfigError("give either epsilon or eps_tilde with sigma, not both")
        # a direct epsilon in a later layer replaces a converted one and vice versa
        if "epsilon" in layer:
            vals.pop("eps_tilde", None), vals.pop("sigma", None)
        if "eps_tilde" in layer or "sigma" in layer:
            vals.pop("epsilon", None)
        vals.update(layer)
    return vals


def _epsilon(vals: dict) -> float:
    if "epsilon" in vals:
        if vals["epsilon"] <= 0:
            raise ConfigError("epsilon must be positive")
        return float(vals["epsilon"])
    if "eps_tilde" in vals and "sigma" in vals:
        try:
            return epsilon_from_diffuse(vals["eps_tilde"], vals["sigma"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    raise ConfigError("epsilon not set (use --epsilon or --eps-tilde with --sigma)")


def _parse_N(text: str):
    if text == "free":
        return None
    if text.startswith("fixed:"):
        try:
            return float(text[6:])
        except ValueError:
            pass
    raise ConfigError(f"N must be fixed:<value> or free, got {text!r}")


def _schemes(text: str | None) -> list:
    if not text:
        raise ConfigError("no scheme given")
    out = []
    for name in text.split(","):
        try:
            out.append(get_scheme(name.strip()).name)
        except (KeyError, ValueError):
            raise ConfigError(f"unknown scheme {name!r}") from None
    return out


def resolve(args, scheme: str | None = None) -> RunConfig:
    """Turn parsed flags plus the config file into a validated RunConfig."""
    vals = _merge(args, scheme)
    if scheme:
        schemes = [scheme]
    elif args.command == "render":
        schemes = []  # the geometry file names its scheme
    elif args.command == "report" and not vals.get("scheme"):
        schemes = list(SCHEMES)
    else:
        schemes = _schemes(vals.get("scheme"))
    opt_kw = {k: vals[k] for k in ("K_start", "K_max", "g_tol", "f_tol", "x_tol", "max_iter",
                                    "max_work", "memory", "delta_geom", "seed", "timing", "free_facet_tips")
              if k in vals}
    try:
        opt = OptimizerConfig(N=_parse_N(str(vals.get("N", "fixed:2"))), **opt_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    L = float(vals.get("L", 0.5))
    if L <= 0:
        raise ConfigError("L must be positive")
    try:
        window = report.Window.parse(vals["window"]) if vals.get("window") else None
        eps_list = [float(e) for e in vals["eps_list"].split(",")] if vals.get("eps_list") else []
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "out" not in vals:
        raise ConfigError("--out is required")
    needs_eps = args.command in ("generate", "optimize", "report")
    return RunConfig(
        schemes=schemes,
        epsilon=_epsilon(vals) if needs_eps else 0.0,
        L=L,
        opt=opt,
        out=Path(vals["out"]),
        K=vals.get("K"),
        window=window,
        eps_list=eps_list,
        geometry=Path(vals["geometry"]) if vals.get("geometry") else None,
        seed=int(vals.get("seed", 0)),
        args=args,
    )


# -- output helpers -----------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_trace(d: Path, tr: OptimizationTrace) -> None:
    _write(d / "trace.csv", tr.to_csv())
    _write(d / "trace.json", tr.to_json())


def _final_geometry(tr: OptimizationTrace):
    if tr.final_spec is None:
        return None
    spec = GeometrySpec(**tr.final_spec)
    return build_topology(spec.scheme, spec.K), spec, DofVector([np.asarray(a) for a in tr.final_Y])


def _write_results(d: Path, tr: OptimizationTrace, window=None) -> None:
    _write_trace(d, tr)
    final = _final_geometry(tr)
    if final is not None:
        top, spec, Y = final
        _write(d / "geometry.json", geometry_to_json(spec, Y))
        _write(d / "pattern.svg", report.render_svg(top, spec, Y, window))
    report.plot_traces([tr], d / "C_vs_K.svg", "C")
    report.plot_traces([tr], d / "F_vs_K.svg", "F")


def _run(cfg: RunConfig, scheme: str, d: Path) -> OptimizationTrace:
    """Continuation that flushes the trace after every level and on Ctrl-C."""
    holder = {}

    def flush(tr, res):
        holder["trace"] = tr
        _write_trace(d, tr)

    try:
        return continuation(scheme, cfg.opt, cfg.epsilon, cfg.L, on_level=flush)
    except KeyboardInterrupt:
        if "trace" in holder:
            _write_trace(d, holder["trace"])
        raise


def _status(traces) -> int:
    if any(t.degenerate for t in traces):
        return EXIT_DEGENERATE
    if not all(t.converged for t in traces):
        return EXIT_UNCONVERGED
    return EXIT_OK


# -- commands -------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    if cfg.K is None or cfg.K < 1:
        raise ConfigError("generate needs --K >= 1")
    for name in cfg.schemes:
        sc = cfg.for_scheme(name)
        top = build_topology(name, cfg.K)
        d = cfg.out / name
        _write(d / "words.txt", "".join(f"{k} {w}\n" for k, w in enumerate(top.words)))
        cell = build_periodic_cell(top)
        topo = {
            "schema": "twinbranch.topology/1",
            "scheme": name,
            "K": cfg.K,
            "half_words": [top.half_word(k) for k in range(cfg.K + 1)],
            "interfaces": [w.count("|") for w in top.words],
            "periodic_cell": cell,
        }
        _write(d / "topology.json", json.dumps(topo, indent=1, sort_keys=True))
        spec = default_start(name, sc.epsilon, sc.L, sc.opt.N or 2.0, cfg.K)
        Y = initial_geometry(top, spec)
        _write(d / "geometry.json", geometry_to_json(spec, Y))
        log.info("%s: wrote %s", name, d)
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    traces = []
    for name in cfg.schemes:
        sc = cfg.for_scheme(name)
        d = cfg.out / name
        tr = _run(sc, name, d)
        _write_results(d, tr, sc.window)
        traces.append(tr)
        b = tr.best()
        log.info("%s: K=%d F=%.8g C=%.4f theta=%.4f degenerate=%s converged=%s", name, b.K, b.F_total,
                 report.constant_C(b.F_total, sc.L, sc.epsilon), b.theta, tr.degenerate, tr.converged)
    return _status(traces)


def cmd_sweep(cfg: RunConfig) -> int:
    if len(cfg.eps_list) < 4:
        raise ConfigError("sweep needs --eps-list with at least 4 values")
    codes = []
    for name in cfg.schemes:
        sc = cfg.for_scheme(name)
        d = cfg.out / name

        def keep(eps, tr, d=d):
            _write_trace(d / f"eps_{eps:.6g}", tr)

        try:
            res = report.scaling_sweep(name, sc.opt, sc.eps_list, sc.L, strict=False, on_trace=keep)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        _write(d / "fit.csv", res.to_csv())
        _write(d / "fit.json", res.to_json())
        log.info("%s: p_F=%.4f p_N=%.4f valid=%s", name, res.p_F, res.p_N, res.valid)
        codes.append(EXIT_OK if res.valid else EXIT_UNCONVERGED)
    return max(codes)


def cmd_render(cfg: RunConfig) -> int:
    if cfg.geometry is None:
        raise ConfigError("render needs --geometry")
    if not cfg.geometry.is_file():
        raise ConfigError(f"geometry file not found: {cfg.geometry}")
    try:
        top, spec, Y = geometry_from_json(cfg.geometry.read_text())
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad geometry file: {exc}") from None
    _write(cfg.out / "pattern.svg", report.render_svg(top, spec, Y, cfg.window))
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    """All schemes share one configuration so their energies are comparable."""
    traces = []

    def keep(tr):
        traces.append(tr)
        _write_results(cfg.out / tr.scheme, tr, cfg.window)

    rep = report.compare(cfg.schemes, cfg.opt, cfg.epsilon, cfg.L, on_trace=keep)
    _write(cfg.out / "report.csv", rep.to_csv())
    _write(cfg.out / "report.json", rep.to_json())
    report.plot_traces(traces, cfg.out / "C_vs_K.svg", "C")
    report.plot_traces(traces, cfg.out / "F_vs_K.svg", "F")
    for r in rep.rows:
        log.info("%s: K=%s C=%s error=%s", r.scheme, r.best_K, r.C, r.error)
    if any(r.error for r in rep.rows):
        return EXIT_DEGENERATE if any(t.degenerate for t in traces) else EXIT_UNCONVERGED
    return _status(traces)


COMMANDS = {
    "generate": cmd_generate,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "render": cmd_render,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors; 2 is reserved for degeneracy."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twinbranch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        sp.add_argument("--config", help="flat key=value file; [NEW]/[KM]/[L] sections override per scheme")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key, (_, text) in KEYS.items():
            typ = float if key in ("epsilon", "eps_tilde", "sigma", "L", "g_tol", "f_tol", "x_tol",
                                   "max_work", "delta_geom") else int if KEYS[key][0] is int else str
            if key == "free_facet_tips":
                typ = _bool
            if key == "timing":
                sp.add_argument("--timing", action="store_true", default=None, help=text)
                continue
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=text)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateGeometryError as exc:
        print(f"degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except KeyboardInterrupt:
        print("interrupted; partial traces written", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
