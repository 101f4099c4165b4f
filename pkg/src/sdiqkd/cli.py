"""Command-line front end: ``sdiqkd COMMAND --config PATH [--out DIR] [--seed U64]``.

Configs are line-oriented ``section.key = value`` text; ``#`` starts a comment.
Every key is validated before any computation and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .channel import MAX_SEED, ChannelModel, blinding_scenario, simulate
from .moments import LEVELS
from .optimize import DEFAULT_MU_GRID, keyrate_at, optimize_mu, sweep, sweep_csv
from .protocol import ProtocolSpec, StatTable
from .security import certify_counts

EXIT_CONFIG = 2
EXIT_SOLVER = 3


class ConfigError(ValueError):
    pass


def _float(v):
    return float(v)


def _nonneg_int(v):
    i = int(v)
    if i < 0:
        raise ValueError("must be >= 0")
    return i


def _floats(v):
    return tuple(float(t) for t in v.split(",") if t.strip())


def _mu(v):
    return "optimize" if v.strip() == "optimize" else float(v)


def _level(v):
    if v not in LEVELS:
        raise ValueError(f"expected one of {', '.join(LEVELS)}")
    return v


def _seed(v):
    s = int(v)
    if not 0 <= s <= MAX_SEED:
        raise ValueError("must be an unsigned 64-bit integer")
    return s


def _schedule(v):
    out = []
    for item in v.split(","):
        if not item.strip():
            continue
        rounds, scale = item.split(":")
        out.append((int(rounds), float(scale)))
    if not out or any(r < 1 or s < 0 for r, s in out):
        raise ValueError("expected 'rounds:scale, ...' with rounds >= 1 and scale >= 0")
    return tuple(out)


def _name(v):
    v = v.strip()
    if not v or "/" in v or v in (".", ".."):
        raise ValueError("expected a plain file name")
    return v


# key -> (parser, default); None default means required where used
SCHEMA = {
    "protocol.n": (int, 2),
    "protocol.theta": (_float, 0.2),
    "protocol.mu": (_mu, "optimize"),
    "protocol.phase_step": (_float, None),
    "protocol.p_k": (_floats, None),
    "protocol.p_y": (_floats, None),
    "protocol.p_r": (_floats, None),
    "channel.eta": (_float, 1.0),
    "channel.p_dc": (_float, 0.0),
    "channel.sigma": (_float, 0.0),
    "channel.delta_theta": (_float, 0.0),
    "channel.delta_xy": (_float, 0.0),
    "analysis.level": (_level, "S1+AB"),
    "analysis.tol": (_float, 1e-8),
    "analysis.epsilon": (_float, 0.0),
    "analysis.a1": (_float, 1e-9),
    "analysis.a2": (_float, 1e-9),
    "simulation.N": (_nonneg_int, 1_800_000),
    "simulation.seed": (_seed, 0),
    "simulation.schedule": (_schedule, None),
    "sweep.etas": (_floats, None),
    "sweep.mu_grid": (_floats, None),
    "sweep.mu_eta_product": (_float, None),
    "io.input": (str, None),
    "io.report": (_name, "report.txt"),
    "io.rounds": (_name, "rounds.csv"),
    "io.stats": (_name, "stats.csv"),
    "io.sweep": (_name, "sweep.csv"),
    "io.selftest": (_name, "selftest.csv"),
}


def parse_config(text: str) -> dict:
    """Parse and validate; returns the resolved config (defaults filled in)."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            # an empty value leaves the key unset, as in the config echo
            raw[key] = SCHEMA[key][1]
            continue
        try:
            raw[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = {k: raw.get(k, default) for k, (_, default) in SCHEMA.items()}
    # object-level validation (ranges, distributions) before any computation
    try:
        _spec(cfg, 1.0 if cfg["protocol.mu"] == "optimize" else cfg["protocol.mu"])
        _channel(cfg)
        for key in ("analysis.a1", "analysis.a2"):
            if not 0 < cfg[key] < 1:
                raise ValueError(f"{key} must lie in (0, 1)")
        if cfg["analysis.tol"] <= 0 or cfg["analysis.epsilon"] < 0:
            raise ValueError("analysis.tol must be > 0 and analysis.epsilon >= 0")
        if cfg["sweep.etas"] is not None and any(not 0 <= e <= 1 for e in cfg["sweep.etas"]):
            raise ValueError("sweep.etas must lie in [0, 1]")
        if cfg["sweep.mu_grid"] is not None and any(m <= 0 for m in cfg["sweep.mu_grid"]):
            raise ValueError("sweep.mu_grid must be positive")
        if cfg["simulation.N"] < 1:
            raise ValueError("simulation.N must be >= 1")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ", ".join(f"{r}:{s!r}" for r, s in v)
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_text(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.items())


def _spec(cfg, mu) -> ProtocolSpec:
    return ProtocolSpec(
        cfg["protocol.n"], cfg["protocol.theta"], mu, cfg["protocol.phase_step"],
        cfg["protocol.p_k"], cfg["protocol.p_y"], cfg["protocol.p_r"],
    )  # fmt: skip


def _channel(cfg) -> ChannelModel:
    return ChannelModel(
        cfg["channel.eta"], cfg["channel.p_dc"], cfg["channel.sigma"],
        cfg["channel.delta_theta"], cfg["channel.delta_xy"],
    )  # fmt: skip


def _mu_grid(cfg):
    return cfg["sweep.mu_grid"] or DEFAULT_MU_GRID


def _mu_of_eta(cfg):
    prod = cfg["sweep.mu_eta_product"]
    return None if prod is None else (lambda eta: prod / eta)


def _resolve_mu(cfg) -> float:
    """Configured mu, or the asymptotic optimum under the configured channel."""
    if cfg["protocol.mu"] != "optimize":
        return cfg["protocol.mu"]
    spec, channel = _spec(cfg, 1.0), _channel(cfg)
    opt = optimize_mu(spec, channel, _mu_grid(cfg), cfg["analysis.level"], cfg["analysis.epsilon"],
                      cfg["analysis.tol"], mu_of_eta=_mu_of_eta(cfg))  # fmt: skip
    if opt.mu is not None:
        return opt.mu
    return max(opt.grid, key=lambda row: row[1])[0]


def _params(cfg, mu) -> dict:
    params = {k: _fmt(v) for k, v in cfg.items()}
    params["resolved.mu"] = repr(float(mu))
    return params


def cmd_keyrate(cfg) -> dict[str, str]:
    mu = _resolve_mu(cfg)
    rep = keyrate_at(_spec(cfg, mu), _channel(cfg), cfg["analysis.level"], cfg["analysis.epsilon"], cfg["analysis.tol"])
    rep = dataclasses.replace(rep, params=_params(cfg, mu))
    return {cfg["io.report"]: rep.to_text()}


def cmd_simulate(cfg) -> dict[str, str]:
    mu = _resolve_mu(cfg)
    log, stats = simulate(_spec(cfg, mu), _channel(cfg), cfg["simulation.N"], cfg["simulation.seed"])
    return {cfg["io.rounds"]: log.to_csv(), cfg["io.stats"]: stats.to_csv()}


def cmd_certify(cfg) -> dict[str, str]:
    if cfg["io.input"] is None:
        raise ConfigError("certify needs io.input (a stats CSV)")
    path = Path(cfg["io.input"])
    try:
        counts = StatTable.read(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if counts.n != cfg["protocol.n"]:
        raise ConfigError(f"stats file has n={counts.n}, config has protocol.n={cfg['protocol.n']}")
    mu = _resolve_mu(cfg)
    rep = certify_counts(
        _spec(cfg, mu), counts, cfg["analysis.level"], cfg["analysis.epsilon"],
        cfg["analysis.a1"], cfg["analysis.a2"], cfg["analysis.tol"], _params(cfg, mu),
    )  # fmt: skip
    return {cfg["io.report"]: rep.to_text()}


def cmd_sweep(cfg) -> dict[str, str]:
    etas = cfg["sweep.etas"] or tuple(np.round(np.linspace(0.05, 1.0, 20), 10))
    rows = sweep(
        _spec(cfg, 1.0), _channel(cfg), etas, _mu_grid(cfg), cfg["analysis.level"],
        cfg["analysis.epsilon"], cfg["analysis.tol"], mu_of_eta=_mu_of_eta(cfg),
    )  # fmt: skip
    return {cfg["io.sweep"]: sweep_csv(rows)}


SELFTEST_HEADER = "block,first_round,rounds,scale,N,p_g_joint,p_g_conditional,p_succ,qber,R,status,verified"


def cmd_selftest(cfg) -> dict[str, str]:
    schedule = cfg["simulation.schedule"]
    if schedule is None:
        raise ConfigError("selftest needs simulation.schedule")
    mu = _resolve_mu(cfg)
    spec = _spec(cfg, mu)
    blocks = blinding_scenario(spec, _channel(cfg), schedule, cfg["simulation.seed"])
    lines, start = [SELFTEST_HEADER], 0
    for i, ((rounds, scale), counts) in enumerate(zip(schedule, blocks)):
        rep = certify_counts(
            spec, counts, cfg["analysis.level"], cfg["analysis.epsilon"],
            cfg["analysis.a1"], cfg["analysis.a2"], cfg["analysis.tol"],
        )  # fmt: skip
        vals = (rep.p_g_joint, rep.p_g_conditional, rep.p_succ, rep.qber, rep.R)
        lines.append(",".join([str(i), str(start), str(rounds), repr(scale), str(rep.N)]
                              + [repr(float(v)) for v in vals] + [rep.status, str(rep.verified)]))  # fmt: skip
        start += rounds
    lines.append("# " + config_text(cfg).rstrip("\n").replace("\n", "\n# ") + f"\n# resolved.mu = {mu!r}")
    return {cfg["io.selftest"]: "\n".join(lines) + "\n"}


COMMANDS = {
    "keyrate": cmd_keyrate,
    "simulate": cmd_simulate,
    "certify": cmd_certify,
    "sweep": cmd_sweep,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sdiqkd", description="Overlap-bounded semi-DI QKD key-rate certification")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--out", type=Path, default=Path("."))
    ap.add_argument("--seed", type=str, default=None, help="unsigned 64-bit seed (overrides simulation.seed)")
    args = ap.parse_args(argv)
    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
        if args.seed is not None:
            try:
                cfg["simulation.seed"] = _seed(args.seed)
            except ValueError as exc:
                raise ConfigError(f"--seed: {exc}") from None
        outputs = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    # nothing is written unless the whole command succeeded
    args.out.mkdir(parents=True, exist_ok=True)
    for name, content in outputs.items():
        (args.out / name).write_text(content)
        print(args.out / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
