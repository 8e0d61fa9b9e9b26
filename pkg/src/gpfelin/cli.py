"""Command line: presets, flat YAML configs, trace and metrics export.

Exit codes: 0 success, 2 config error, 3 numerical fault, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .controller import ControllerConfig
from .errors import ContractViolation
from .kernels import SEHyperparams
from .simulator import PLANTS, RunConfig, Sinusoid, SimulationAborted, SoftStep, Trace, run_closed_loop
from .trigger import TriggerConfig

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "GPFELIN_OUT"


class ConfigError(Exception):
    pass


# Flat document keys. None marks "no value" (e.g. no g kernel in known-g mode).
DEFAULTS = {
    "name": "custom",
    "plant": "pendulum",
    "dt": 1e-3,
    "seed": 0,
    "trigger_period": None,
    "hyper_policy": "fixed",
    "kernel_g_lengthscales": None,
    "kernel_g_variance": None,
    "forgetting": "none",
    "budget": None,
    "model_mode": "unknown_g",
    "m_g": 2.0,
    "eta": 1e-3,
    "n_restarts": 2,
    "max_events": 5000,
    "delta": None,
    "traj_center": 10.0,
    "traj_steepness": 20.0,
    "traj_start": 1.0,
    "traj_end": 0.0,
    "traj_amplitude": 1.0,
    "traj_frequency": 1.0,
    "traj_phase": 0.0,
}
REQUIRED = ("trajectory", "lam", "k_c", "r_min", "beta", "trigger", "noise_variance", "x0", "t_sim",
            "kernel_f_lengthscales", "kernel_f_variance")
KEYS = set(DEFAULTS) | set(REQUIRED)

_BASE = {
    "plant": "pendulum", "lam": [1.0], "k_c": 1.0, "r_min": 1e-5, "beta": 7.0, "m_g": 2.0,
    "x0": [3.0, 2.0], "dt": 1e-3, "seed": 0,
}
_S2 = {
    **_BASE, "name": "s2", "trajectory": "sinusoid", "noise_variance": 1e-16, "t_sim": 100.0,
    "trigger": "variance", "model_mode": "known_g", "hyper_policy": "fixed",
    "kernel_f_lengthscales": [math.sqrt(5.0)] * 2, "kernel_f_variance": 5.0,
}
PRESETS = {
    "s1": {
        **_BASE, "name": "s1", "trajectory": "soft_step", "noise_variance": 1e-6, "t_sim": 20.0,
        "trigger": "time", "trigger_period": 0.5, "model_mode": "unknown_g",
        "hyper_policy": "reoptimize", "kernel_f_lengthscales": [1.0, 1.0], "kernel_f_variance": 1.0,
        "kernel_g_lengthscales": [1.0, 1.0], "kernel_g_variance": 1.0,
    },
    "s2": _S2,
    "s2-time": {**_S2, "name": "s2-time", "trigger": "time", "trigger_period": 0.5},
    "s2-forget-all": {**_S2, "name": "s2-forget-all", "forgetting": "forget_all"},
    "s2-budget": {**_S2, "name": "s2-budget", "forgetting": "budget", "budget": 20},
}


def _trajectory(doc):
    kind = doc["trajectory"]
    if kind == "soft_step":
        return SoftStep(float(doc["traj_center"]), float(doc["traj_steepness"]),
                        float(doc["traj_start"]), float(doc["traj_end"]))
    if kind == "sinusoid":
        return Sinusoid(float(doc["traj_amplitude"]), float(doc["traj_frequency"]), float(doc["traj_phase"]))
    raise ConfigError(f"unknown trajectory {kind!r} (soft_step, sinusoid)")


def _se(ls, var):
    return SEHyperparams(tuple(float(v) for v in ls), float(var))


def build_config(doc: dict) -> RunConfig:
    """Turn a complete flat document into a validated RunConfig."""
    unknown = sorted(set(doc) - KEYS - {"preset"})
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    doc = {**DEFAULTS, **doc}
    missing = [k for k in REQUIRED if doc.get(k) is None]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    if doc["plant"] not in PLANTS:
        raise ConfigError(f"unknown plant {doc['plant']!r}")
    try:
        noise_var = float(doc["noise_variance"])
        kg = None
        if doc["kernel_g_lengthscales"] is not None:
            kg = _se(doc["kernel_g_lengthscales"], doc["kernel_g_variance"])
        return RunConfig(
            plant=PLANTS[doc["plant"]],
            trajectory=_trajectory(doc),
            controller=ControllerConfig(tuple(doc["lam"]), float(doc["k_c"]), float(doc["r_min"])),
            trigger=TriggerConfig(float(doc["beta"]), delta=doc["delta"],
                                  noise_std=math.sqrt(max(noise_var, 0.0)),
                                  budget=doc["budget"], r_min=float(doc["r_min"])),
            trigger_mode=doc["trigger"],
            noise_variance=noise_var,
            x0=tuple(doc["x0"]),
            t_sim=float(doc["t_sim"]),
            dt=float(doc["dt"]),
            seed=int(doc["seed"]),
            trigger_period=None if doc["trigger_period"] is None else float(doc["trigger_period"]),
            hyper_policy=doc["hyper_policy"],
            kernel_f=_se(doc["kernel_f_lengthscales"], doc["kernel_f_variance"]),
            kernel_g=kg,
            forgetting=doc["forgetting"],
            model_mode=doc["model_mode"],
            m_g=float(doc["m_g"]),
            eta=float(doc["eta"]),
            n_restarts=int(doc["n_restarts"]),
            max_events=doc["max_events"],
            name=str(doc["name"]),
        )
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad field value: {exc}") from exc


def resolve(doc: dict, overrides: Optional[dict] = None) -> dict:
    """Apply preset inheritance and overrides; returns the full flat document."""
    doc = dict(doc)
    doc.update(overrides or {})
    preset = doc.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        base = PRESETS[preset]
    out = {**DEFAULTS, **base, **doc}
    build_config(out)  # validate
    return out


def _load_document(source: str) -> dict:
    if source in PRESETS:
        return {"preset": source}
    path = Path(source)
    if path.is_file():
        try:
            text = path.read_text()
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc}") from exc
    elif "\n" in source or ":" in source:
        text = source
    else:
        raise ConfigError(f"{source!r} is neither a preset nor a config file")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a key: value mapping")
    return doc


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = yaml.safe_load(value)
    return out


def parse_config(source: str, overrides: Optional[dict] = None) -> RunConfig:
    """Preset name, config path or inline YAML text -> RunConfig."""
    return build_config(resolve(_load_document(source), overrides))


def serialize(doc: dict) -> str:
    return yaml.safe_dump(dict(sorted(doc.items())), sort_keys=False)


# --------------------------------------------------------------------------- export

def trace_header(n: int) -> list[str]:
    return (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"xd_{i + 1}" for i in range(n)]
            + ["e_norm", "r", "u", "sigma", "f_hat", "g_hat", "kappa", "event"])


def _g(v) -> str:
    return "%.12g" % v


def export_trace(trace: Trace, path) -> None:
    k = trace.n_rows
    n = trace.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(n))
        for i in range(k):
            w.writerow([_g(trace.t[i]), *map(_g, trace.x[i]), *map(_g, trace.xd[i]),
                        _g(trace.e_norm[i]), _g(trace.r[i]), _g(trace.u[i]), _g(trace.sigma[i]),
                        _g(trace.f_hat[i]), _g(trace.g_hat[i]), int(trace.kappa[i]), int(trace.event[i])])


def read_trace(path) -> dict:
    """Load an exported trace back into column arrays."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float, ndmin=1)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


def export_events(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "t", "kind", "size"])
        ev = trace.events
        for i, (t, kind, size) in enumerate(zip(ev.times, ev.kinds, ev.sizes)):
            w.writerow([i + 1, "%.15g" % t, kind, size])


@dataclass
class MetricsSummary:
    events: int
    final_size: int
    max_size: int
    min_gap: Optional[float]
    mean_gap: Optional[float]
    final_e_norm: float
    max_e_norm_second_half: float
    wall_clock: float
    floor_hits: int
    status: str

    @classmethod
    def from_trace(cls, trace: Trace, t_sim: float) -> "MetricsSummary":
        gaps = trace.events.gaps()
        k = trace.n_rows
        half = trace.e_norm[:k][trace.t[:k] >= t_sim / 2]
        return cls(
            events=len(trace.events),
            final_size=trace.dataset_size,
            max_size=trace.peak_size,
            min_gap=float(gaps.min()) if gaps.size else None,
            mean_gap=float(gaps.mean()) if gaps.size else None,
            final_e_norm=float(trace.e_norm[k - 1]) if k else float("nan"),
            max_e_norm_second_half=float(half.max()) if half.size else float("nan"),
            wall_clock=trace.wall_clock,
            floor_hits=trace.floor_hits,
            status="ok" if trace.fault is None else trace.fault,
        )

    def lines(self) -> list[str]:
        return [f"{k:24s} {v}" for k, v in asdict(self).items()]


def write_outputs(trace: Trace, cfg: RunConfig, doc: dict, out: Path) -> MetricsSummary:
    out.mkdir(parents=True, exist_ok=True)
    export_trace(trace, out / "trace.csv")
    export_events(trace, out / "events.csv")
    metrics = MetricsSummary.from_trace(trace, cfg.t_sim)
    (out / "metrics.json").write_text(json.dumps(asdict(metrics), indent=2) + "\n")
    (out / "config.yaml").write_text(serialize(doc))
    return metrics


# --------------------------------------------------------------------------- entry point

def _cmd_presets(args) -> int:
    for name, doc in PRESETS.items():
        print(f"{name:14s} trigger={doc['trigger']:8s} model={doc['model_mode']:9s} "
              f"T={doc['t_sim']:g} forgetting={doc.get('forgetting', 'none')}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    doc = resolve(_load_document(args.config), parse_overrides(args.override))
    print(serialize(doc), end="")
    return EXIT_OK


def _cmd_run(args) -> int:
    overrides = parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    doc = resolve(_load_document(args.config), overrides)
    cfg = build_config(doc)
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / cfg.name
    code = EXIT_OK
    try:
        trace = run_closed_loop(cfg)
    except SimulationAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        trace, code = exc.trace, EXIT_NUMERIC
    metrics = write_outputs(trace, cfg, doc, out)
    print("\n".join(metrics.lines()))
    print(f"wrote {out}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpfelin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate a preset or config file")
    r.add_argument("config", help="preset name, YAML path or inline YAML")
    r.add_argument("--override", "-o", action="append", metavar="KEY=VALUE")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name> or runs/<name>)")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=_cmd_run)
    sub.add_parser("presets", help="list presets").set_defaults(func=_cmd_presets)
    v = sub.add_parser("validate", help="resolve and print a config")
    v.add_argument("config")
    v.add_argument("--override", "-o", action="append", metavar="KEY=VALUE")
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
