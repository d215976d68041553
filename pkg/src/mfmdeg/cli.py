"""Command-line front end: ``mfmdeg <command> --config <path> [--seed S] [--out DIR]``.

Configs are strict JSON.  Every run writes its outputs plus ``manifest.json``
(resolved config, version, wall-clock, sha256 of each emitted file).  Failures
print one JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import __version__
from . import hawkdove as hd
from . import meanfield as mf
from . import microsim as ms
from . import solver as so
from .model import CSV_HEADER, ModelError, ModelSpec, PopulationProfile, StationaryStrategy

COMMANDS = ("simulate", "ode", "value", "payoff-n", "solve", "converge", "hawkdove-report")
MODELS = ("hawk-dove-2", "hawk-dove-3")


class ConfigError(ValueError):
    pass


_NUM = (int, float)
SCHEMA: dict[str, Any] = {
    "command": str, "model": str, "params": dict, "strategy": (dict, str), "u2": _NUM, "v1": _NUM,
    "u1": (dict, str, int, float), "m0": (list, int, float), "s0": (int, str), "N": (int, str),
    "horizon": _NUM, "seed": int, "seeds": list, "replications": int, "delta": _NUM,
    "tolerance": _NUM, "N_list": list, "eps_grid": list, "full_record": bool, "event_log": bool,
    "init": (str, list), "kind": str, "max_iters": int, "damping": _NUM, "out": str,
    "step": _NUM, "tagged_linear": bool, "probe_N": list, "times": list,
}
PARAMS = {"v_bar": _NUM, "c": _NUM, "beta": _NUM, "mu1": _NUM, "mu2": _NUM, "dynamics": str}
DEFAULTS = {"beta": 1.0, "delta": 0.05, "tolerance": 1e-6, "seeds": list(range(1, 11))}


@dataclass
class ExperimentConfig:
    command: str | None
    model: str
    params: dict
    options: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.options.get(key, default)

    def echo(self) -> dict:
        out = dict(self.options)
        out.update({"command": self.command, "model": self.model, "params": self.params})
        return out


def _type_name(t) -> str:
    if t == _NUM:
        return "number"
    if isinstance(t, tuple):
        return " or ".join(_type_name(x) for x in t)
    return {int: "integer", float: "number", str: "string", dict: "object", list: "array",
            bool: "boolean"}[t]


def _check_type(path: str, val, t) -> None:
    types = t if isinstance(t, tuple) else (t,)
    if isinstance(val, bool) and bool not in types:
        raise ConfigError(f"type mismatch at {path}: expected {_type_name(t)}, got boolean")
    if not isinstance(val, types):
        raise ConfigError(f"type mismatch at {path}: expected {_type_name(t)}, got {type(val).__name__}")


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key, val in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown field {key}")
        _check_type(key, val, SCHEMA[key])
    params = dict(raw.get("params", {}))
    for key, val in params.items():
        if key not in PARAMS:
            raise ConfigError(f"unknown field params.{key}")
        _check_type(f"params.{key}", val, PARAMS[key])
    model = raw.get("model", "hawk-dove-2")
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; registered: {', '.join(MODELS)}")
    command = raw.get("command")
    if command is not None and command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    params.setdefault("beta", DEFAULTS["beta"])
    opts = {k: v for k, v in raw.items() if k not in ("command", "model", "params")}
    if "horizon" in opts and not opts["horizon"] > 0:
        raise ConfigError("horizon must be positive")
    for key in ("delta", "tolerance"):
        opts.setdefault(key, DEFAULTS[key])
        if not opts[key] > 0:
            raise ConfigError(f"{key} must be positive")
    opts.setdefault("seeds", list(DEFAULTS["seeds"]))
    for i, s in enumerate(opts["seeds"]):
        _check_type(f"seeds[{i}]", s, int)
    for key in ("N_list", "probe_N"):
        for i, n in enumerate(opts.get(key, [])):
            _check_type(f"{key}[{i}]", n, int)
            if n < 2:
                raise ConfigError(f"{key}[{i}] must be >= 2")
    if "N" in opts and not (opts["N"] == "limit" or (isinstance(opts["N"], int) and opts["N"] >= 1)):
        raise ConfigError('N must be a positive integer or "limit"')
    for key in ("u2", "v1", "damping"):
        if key in opts and not 0 <= opts[key] <= 1:
            raise ConfigError(f"{key} must lie in [0, 1]")
    cfg = ExperimentConfig(command, model, params, opts)
    build_spec(cfg)
    return cfg


# ----------------------------------------------------------------- resolution

def build_spec(cfg: ExperimentConfig) -> ModelSpec:
    levels = 2 if cfg.model == "hawk-dove-2" else 3
    p = {k: float(v) if k != "dynamics" else v for k, v in cfg.params.items()}
    try:
        return hd.build_model(hd.HawkDoveParams(levels=levels, **p))
    except ModelError as exc:
        raise ConfigError(f"params: {exc}") from None


def _named(spec: ModelSpec, name: str) -> StationaryStrategy:
    if name in ("all-hawk", "hawk-at-top"):
        return hd.strategy(spec, 1.0, 1.0 if name == "all-hawk" else 0.0)
    if name == "all-dove":
        return hd.strategy(spec, 0.0, 0.0)
    raise ConfigError(f"unknown strategy name {name!r}")


def _explicit(spec: ModelSpec, block: dict, path: str) -> StationaryStrategy:
    policy = {}
    labels = {str(s): s for s in spec.space.internal_states}
    for key, val in block.items():
        if key not in labels:
            raise ConfigError(f"unknown field {path}.{key}")
        s = labels[key]
        acts = spec.space.actions_at(1, s)
        if isinstance(val, str):
            if val not in acts:
                raise ConfigError(f"{path}.{key}: action {val!r} not in {list(acts)}")
            policy[s] = val
        elif isinstance(val, list):
            policy[s] = tuple(float(x) for x in val)
        else:
            raise ConfigError(f"type mismatch at {path}.{key}: expected array or string")
    try:
        return StationaryStrategy.from_mapping(spec.space, policy)
    except ModelError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def field_strategy(cfg: ExperimentConfig, spec: ModelSpec) -> StationaryStrategy:
    st = cfg.get("strategy")
    if isinstance(st, str):
        return _named(spec, st)
    if isinstance(st, dict):
        return _explicit(spec, st, "strategy")
    return hd.strategy(spec, float(cfg.get("u2", 1.0)), float(cfg.get("v1", 0.0)))


def tagged_strategy(cfg: ExperimentConfig, spec: ModelSpec, u2: StationaryStrategy) -> StationaryStrategy:
    u1 = cfg.get("u1")
    if u1 is None:
        return u2
    if isinstance(u1, str):
        return _named(spec, u1)
    if isinstance(u1, dict):
        return _explicit(spec, u1, "u1")
    if not 0 <= u1 <= 1:
        raise ConfigError("u1 must lie in [0, 1]")
    return hd.strategy(spec, float(u1), float(cfg.get("v1", 0.0)))


def initial_mass(cfg: ExperimentConfig, spec: ModelSpec) -> np.ndarray:
    m0 = cfg.get("m0")
    X = spec.space.size
    if m0 is None:
        return np.full(X, 1.0 / X)
    if isinstance(m0, list):
        arr = np.array(m0, dtype=float)
        if arr.shape != (X,):
            raise ConfigError(f"m0 must have {X} entries")
    else:
        if not 0 <= m0 <= 1:
            raise ConfigError("m0 must lie in [0, 1]")
        arr = np.zeros(X)
        arr[spec.space.index(1, 2)] = m0
        arr[spec.space.index(1, 1)] = 1.0 - m0
    try:
        PopulationProfile(spec.space, arr)
    except ModelError as exc:
        raise ConfigError(f"m0: {exc}") from None
    return arr


def _s0(cfg: ExperimentConfig, spec: ModelSpec):
    s0 = cfg.get("s0", spec.space.internal_states[-1])
    labels = {str(s): s for s in spec.space.internal_states}
    if str(s0) not in labels:
        raise ConfigError(f"unknown s0 {s0!r}")
    return labels[str(s0)]


def _need(cfg: ExperimentConfig, key: str):
    if key not in cfg.options:
        raise ConfigError(f"missing field {key}")
    return cfg.options[key]


# ------------------------------------------------------------------- emission

def _finite(obj):
    # non-finite floats become null so every output is strict JSON
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _dumps(obj) -> str:
    return json.dumps(_finite(obj), sort_keys=True, allow_nan=False)


class Emitter:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.files: list[str] = []

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.files.append(name)
        return path

    def json(self, name: str, obj) -> str:
        return self.write(name, _dumps(obj) + "\n")

    def manifest(self, cfg: ExperimentConfig, started: float) -> dict:
        inv = []
        for name in self.files:
            with open(os.path.join(self.out_dir, name), "rb") as fh:
                data = fh.read()
            inv.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        man = {"config": cfg.echo(), "version": __version__,
               "wall_clock_seconds": time.time() - started, "files": inv}
        with open(os.path.join(self.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(_dumps(man) + "\n")
        return man


def _traj_csv(traj) -> str:
    return CSV_HEADER + "\n" + "".join(line + "\n" for line in traj.csv_rows())


# ------------------------------------------------------------------- commands

def cmd_simulate(cfg, spec, em, seed):
    N = _need(cfg, "N")
    if N == "limit":
        raise ConfigError('simulate needs an integer N; use the ode command for "limit"')
    T = _need(cfg, "horizon")
    u = field_strategy(cfg, spec)
    state = ms.MicroState.from_profile(spec, initial_mass(cfg, spec), N)
    traj = ms.simulate(spec, u, state, T, seed, full_record=cfg.get("full_record", False))
    em.write("trajectory.csv", _traj_csv(traj))
    if cfg.get("event_log", False):
        rng = ms.stream(seed, 0)
        lines = []
        st = state
        for _ in range(math.ceil(N * T - 1e-9)):
            st, rec = ms.step(spec, u, st, rng)
            lines.append(_dumps(rec.to_json()))
        em.write("events.jsonl", "\n".join(lines) + "\n")


def cmd_ode(cfg, spec, em, seed):
    T = _need(cfg, "horizon")
    u = field_strategy(cfg, spec)
    traj = mf.integrate_ode(spec, u, initial_mass(cfg, spec), T, h=cfg.get("step", mf.DEFAULT_STEP))
    em.write("trajectory.csv", _traj_csv(traj))
    em.json("ode.json", {"error_estimate": traj.meta.get("error_estimate"), "step": traj.meta["step"],
                         "final": [float(v) for v in traj.mass[-1]]})


def cmd_value(cfg, spec, em, seed):
    u2 = field_strategy(cfg, spec)
    u1 = tagged_strategy(cfg, spec, u2)
    vt = mf.tagged_value(spec, u1, u2, _s0(cfg, spec), initial_mass(cfg, spec), cfg.get("tolerance"))
    em.json("value.json", {"values": {str(s): v for s, v in vt.values.items()}, "horizon": vt.horizon,
                           "tolerance": vt.tolerance, "s0": str(vt.meta["s0"]), "value": vt.meta["value"]})


def cmd_payoff_n(cfg, spec, em, seed):
    N = _need(cfg, "N")
    if not isinstance(N, int):
        raise ConfigError("payoff-n needs an integer N")
    u2 = field_strategy(cfg, spec)
    u1 = tagged_strategy(cfg, spec, u2)
    est = ms.estimate_discounted_payoff(spec, u1, u2, _s0(cfg, spec), initial_mass(cfg, spec), N,
                                        cfg.get("replications", 1000), seed)
    em.json("estimate.json", est.to_json())


def cmd_solve(cfg, spec, em, seed):
    grid = so.StrategyGrid(spec.space, cfg.get("delta"))
    s0 = _s0(cfg, spec)
    m0 = initial_mass(cfg, spec)
    kind = cfg.get("kind", "equilibrium")
    if kind == "equilibrium":
        init = cfg.get("init", "all-dove")
        starts = init if isinstance(init, list) else [init]
        certs = []
        for name in starts:
            u0 = _named(spec, name)
            c = so.fixed_point_iterate(spec, u0, s0, m0, grid, cfg.get("max_iters", 200),
                                       cfg.get("damping", 0.5), cfg.get("tolerance"),
                                       tagged_linear=cfg.get("tagged_linear", False))
            c.extra["init"] = name
            certs.append(c.to_json())
        em.json("certificate.json", certs[0] if len(certs) == 1 else certs)
    elif kind == "team-optimal":
        em.json("certificate.json", so.optimize_team(spec, s0, m0, grid, cfg.get("tolerance")).to_json())
    else:
        raise ConfigError(f"unknown kind {kind!r}")


def cmd_converge(cfg, spec, em, seed):
    T = _need(cfg, "horizon")
    N_list = _need(cfg, "N_list")
    u = field_strategy(cfg, spec)
    eps = cfg.get("eps_grid", [0.01, 0.02, 0.05, 0.1])
    tab = ms.convergence_study(spec, u, initial_mass(cfg, spec), T, N_list, cfg.get("seeds"), eps)
    em.write("converge.csv", tab.csv())
    em.json("converge_summary.json", {"mean_sup_dev": {str(k): v for k, v in tab.mean_sup.items()},
                                      "exceedance": {str(k): {repr(e): f for e, f in v.items()}
                                                     for k, v in tab.exceedance.items()}})


def cmd_hawkdove_report(cfg, spec, em, seed):
    p = spec.meta["params"]
    m0 = initial_mass(cfg, spec)
    report: dict[str, Any] = {"model": cfg.model}
    if p.levels == 2:
        u2 = float(cfg.get("u2", 1.0))
        T = cfg.get("horizon", 10.0)
        m2_0 = float(m0[spec.space.index(1, 2)])
        traj = mf.integrate_ode(spec, hd.strategy(spec, u2), m0, T)
        closed = hd.closed_form_m2(u2, m2_0, traj.times)
        rk4 = traj.component(1, 2)
        stride = max(1, len(traj.times) // 200)
        lines = ["t,m2_closed_form,m2_rk4,abs_diff"]
        for t, a, b in zip(traj.times[::stride], closed[::stride], rk4[::stride]):
            lines.append(f"{float(t)!r},{float(a)!r},{float(b)!r},{float(abs(a - b))!r}")
        em.write("closed_vs_rk4.csv", "\n".join(lines) + "\n")
        b = hd.beta2_and_best_response(p, u2, m2_0, 0.0)
        c = hd.closed_form_constants(u2, m2_0)
        report.update({
            "u2": u2, "m2_0": m2_0, "max_abs_diff": float(np.max(np.abs(closed - rk4))),
            "gamma_minus": c.gamma_minus, "gamma_plus": c.gamma_plus, "lambda": c.lam,
            "beta2_at_start": b.beta2, "best_response_at_start": b.action,
            "beta2_crossing_time": b.crossing_time, "best_response_at_infinity": b.sign_at_infinity,
        })
        if u2 < 1.0:
            report["uncorrected_logistic_m2_at_0"] = hd.logistic_m2_uncorrected(u2, m2_0, 0.0)
        th = hd.equilibrium_threshold_check(p, cfg.get("delta"), tolerance=cfg.get("tolerance"))
        report["threshold"] = {"ratio": th.ratio, "holds": th.threshold_holds, "message": th.message,
                               "boundary_sensitive": th.boundary_sensitive,
                               "certificate_epsilon": th.certificate.epsilon, "agrees": th.agrees}
        table = hd.build_model(hd.HawkDoveParams(p.v_bar, p.c, p.beta, dynamics="table"))
        q = m2_0
        report["drift_comparison"] = {
            "model": float(mf.drift(spec, hd.strategy(spec, u2), m0)[1]),
            "table": float(mf.drift(table, hd.strategy(table, u2), m0)[1]),
            "quadratic_formula": hd.field_m2(u2, q)}
    else:
        u = field_strategy(cfg, spec)
        v1 = u.prob(1, 1, hd.HAWK)
        v2 = u.prob(1, 2, hd.HAWK)
        mech = mf.drift(spec, u, m0)
        closed = hd.rate_expressions_field_3(v1, v2, m0, p.mu1, p.mu2)
        report.update({"v1": v1, "v2": v2, "m0": [float(x) for x in m0],
                       "drift_mechanistic": [float(x) for x in mech],
                       "drift_rate_expressions": [float(x) for x in closed],
                       "rate_expressions": hd.rate_expressions_3(v1, v2, m0)})
    em.json("hawkdove_report.json", report)


HANDLERS = {"simulate": cmd_simulate, "ode": cmd_ode, "value": cmd_value, "payoff-n": cmd_payoff_n,
            "solve": cmd_solve, "converge": cmd_converge, "hawkdove-report": cmd_hawkdove_report}


def run(cfg: ExperimentConfig, out_dir: str | None = None, seed: int | None = None) -> dict:
    started = time.time()
    if cfg.command is None:
        raise ConfigError("missing field command")
    if seed is not None:
        cfg.options["seed"] = seed
    seed = cfg.get("seed", cfg.get("seeds")[0])
    out_dir = out_dir or cfg.get("out", "out")
    cfg.options["out"] = out_dir
    spec = build_spec(cfg)
    em = Emitter(out_dir)
    HANDLERS[cfg.command](cfg, spec, em, seed)
    return em.manifest(cfg, started)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mfmdeg", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
        cfg.command = args.command
        run(cfg, args.out, args.seed)
    except Exception as exc:  # noqa: BLE001 - single-line machine-readable error
        kind = "config" if isinstance(exc, ConfigError) else type(exc).__name__
        sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
