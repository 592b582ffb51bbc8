"""Command-line entry points: configuration, suite orchestration, reports.

JSON config files hold nested blocks (gas, grid, ode, solver, norms,
output, seed); command-line flags override file values, file values
override defaults.  Unknown keys are rejected with their dotted
location.  Exit codes: 0 all checks pass, 1 at least one check failed,
2 configuration or runtime error.  Identical configuration (including
seed) produces byte-identical series files on the same platform.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import geometry, norms, params, radial, theta

_SCHEMA = {
    "gas": {"gamma": float, "mass": float},
    "grid": {"resolution": int, "n_mu": int, "n_psi": int},
    "ode": {"rtol": float, "atol": float, "t_end": float},
    "solver": {"cfl": float, "eps": float, "family": str,
               "family_exponent": int, "eps0": float},
    "norms": {"J_max": int, "m_max": int, "nl_max": int},
    "output": {"directory": str, "format": str, "records": int},
    "seed": int,
}

_FLAT_KEYS = {
    ("gas", "gamma"): "gamma",
    ("gas", "mass"): "mass",
    ("grid", "resolution"): "resolution",
    ("grid", "n_mu"): "n_mu",
    ("grid", "n_psi"): "n_psi",
    ("ode", "rtol"): "rtol",
    ("ode", "atol"): "atol",
    ("ode", "t_end"): "t_end",
    ("solver", "cfl"): "cfl",
    ("solver", "eps"): "eps",
    ("solver", "family"): "family",
    ("solver", "family_exponent"): "family_exponent",
    ("solver", "eps0"): "eps0",
    ("norms", "J_max"): "J_max",
    ("norms", "m_max"): "m_max",
    ("norms", "nl_max"): "nl_max",
    ("output", "directory"): "out_dir",
    ("output", "format"): "fmt",
    ("output", "records"): "records",
    ("seed",): "seed",
}


class ConfigError(ValueError):
    """Configuration file or flag rejected."""


@dataclass(frozen=True)
class Config:
    """Effective run configuration after defaults, file, and flags."""

    gamma: float = 2.0
    mass: float = 1.0
    resolution: int = 64
    n_mu: int = 8
    n_psi: int = 8
    rtol: float = 1e-10
    atol: float = 1e-12
    t_end: float | None = None
    cfl: float = 0.3
    eps: float = 1e-3
    family: str = "poly"
    family_exponent: int = 2
    eps0: float = 0.1
    J_max: int = 2
    m_max: int = 2
    nl_max: int = 2
    out_dir: str | None = None
    fmt: str = "csv"
    records: int = 120
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ConfigError("gamma must exceed 1")
        if not self.mass > 0.0:
            raise ConfigError("mass must be positive")
        if self.resolution < 4:
            raise ConfigError("resolution must be at least 4")
        if self.n_mu < 4 or self.n_psi < 4:
            raise ConfigError("angular resolutions must be at least 4")
        if self.t_end is not None and not self.t_end > 0.0:
            raise ConfigError("t_end must be positive")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigError("cfl must lie in (0, 1]")
        if self.eps < 0.0:
            raise ConfigError("eps must be nonnegative")
        if self.family not in radial.FAMILIES:
            raise ConfigError(f"family must be one of {radial.FAMILIES}")
        if not self.eps0 > 0.0:
            raise ConfigError("eps0 must be positive")
        if self.J_max < 0 or self.m_max < 0 or self.nl_max < 0:
            raise ConfigError("norm orders must be nonnegative")
        if self.fmt not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if self.records < 2:
            raise ConfigError("records must be at least 2")
        if not (self.rtol > 0.0 and self.atol > 0.0):
            raise ConfigError("ode tolerances must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


def _coerce(value, want, where):
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def parse_config(path=None, overrides=None) -> Config:
    """Load a JSON config file and apply flag overrides on top."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config parse error at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        for key, block in raw.items():
            if key == "seed":
                values["seed"] = _coerce(block, int, "seed")
                continue
            schema = _SCHEMA.get(key)
            if schema is None:
                raise ConfigError(f"unknown key '{key}'")
            if not isinstance(block, dict):
                raise ConfigError(f"'{key}' must be an object")
            for sub, val in block.items():
                want = schema.get(sub)
                if want is None:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
                values[_FLAT_KEYS[(key, sub)]] = _coerce(
                    val, want, f"{key}.{sub}")
    try:
        config = Config(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if overrides:
        config = replace(config, **overrides)
    return config


def _out_dir(config: Config) -> str:
    out = config.out_dir or os.environ.get("VEL_OUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _dump_json(obj, dest_path):
    text = json.dumps(obj, sort_keys=True, indent=2)
    with open(dest_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text + "\n")
    return text


class _Checks:
    """Collects named pass/fail lines and the overall exit code."""

    def __init__(self):
        self.lines = []
        self.failed = False

    def record(self, name, ok, detail):
        tag = "PASS" if ok else "FAIL"
        self.lines.append(f"{tag} {name}: {detail}")
        if not ok:
            self.failed = True

    def emit(self, stream):
        for line in self.lines:
            print(line, file=stream)

    @property
    def exit_code(self):
        return 1 if self.failed else 0


# ---------------------------------------------------------------------------
# subcommands


def _cmd_constants(config: Config, out):
    c = params.derive_constants(
        params.GasParams(gamma=config.gamma, mass=config.mass))
    payload = {
        "gamma": config.gamma,
        "mass": config.mass,
        "a_bar": c.a_bar,
        "b_bar": c.b_bar,
        "iota": c.iota,
        "r0": c.r0,
    }
    text = _dump_json(payload, os.path.join(out, "constants.json"))
    print(text)
    return 0


def _cmd_barenblatt_check(config: Config, out):
    checks = _Checks()
    gamma, mass = config.gamma, config.mass
    c = params.derive_constants(params.GasParams(gamma=gamma, mass=mass))
    rng = np.random.default_rng(config.seed)
    t_ref = 1.0
    rad = params.boundary_radius(c, gamma, t_ref)
    radii = rng.uniform(0.05, 0.75, size=20) * rad
    dirs = rng.standard_normal((20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    points = radii[:, None] * dirs
    h0 = 1e-3 * rad
    orders = []
    for x in points:
        res_h = params.pme_darcy_residual(c, gamma, t_ref, x, h0)
        res_h2 = params.pme_darcy_residual(c, gamma, t_ref, x, h0 / 2.0)
        for a, b in zip(res_h, res_h2):
            if b > 1e-14:
                orders.append(math.log2(a / b))
    min_order = min(orders)
    checks.record("residual-order", min_order >= 1.7,
                  f"centered residuals converge at order {min_order:.2f} "
                  f"(need >= 1.7) over 20 interior points")
    worst = 0.0
    for t in (0.0, 1.0, 10.0, 100.0):
        m = params.mass_check(c, gamma, t)
        worst = max(worst, abs(m - mass) / mass)
    checks.record("mass", worst <= 1e-7,
                  f"max relative mass defect {worst:.2e} (budget 1e-07)")
    _dump_json({"gamma": gamma, "min_order": min_order,
                "mass_defect": worst,
                "passed": not checks.failed},
               os.path.join(out, "barenblatt_check.json"))
    checks.emit(sys.stdout)
    return checks.exit_code


def _cmd_theta(config: Config, out):
    checks = _Checks()
    t_end = config.t_end if config.t_end is not None else 1e4
    path = theta.integrate_h(config.gamma, t_end, rtol=config.rtol,
                             atol=config.atol)
    series_path = os.path.join(out, "theta_path.csv")
    with open(series_path, "w", encoding="utf-8", newline="") as fh:
        theta.write_csv(path, fh)
    rep = theta.verify_decay(path, n=2)
    checks.record(
        "decay-bounds", rep.passed,
        f"lower-bound violation {rep.max_violation['lower']:.2e}, "
        f"monotone violation {rep.max_violation['monotone']:.2e}, "
        f"K_fit={rep.K_fit:.6f}")
    _dump_json({"gamma": config.gamma, "t_end": t_end, "K_fit": rep.K_fit,
                "Cn_fit": {str(k): v for k, v in rep.Cn_fit.items()},
                "max_violation": rep.max_violation, "passed": rep.passed,
                "series": os.path.basename(series_path)},
               os.path.join(out, "theta_decay.json"))
    checks.emit(sys.stdout)
    return checks.exit_code


def _cmd_liu(config: Config, out):
    checks = _Checks()
    t_end = config.t_end if config.t_end is not None else 1e5
    rep = theta.liu_vs_barenblatt(config.gamma, config.mass, t_end,
                                  rtol=config.rtol, atol=config.atol)
    series_path = os.path.join(out, "liu_deviation.csv")
    with open(series_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,deviation\n")
        for t, d in zip(rep.times, rep.deviation):
            fh.write(f"{t!r},{d!r}\n")
    checks.record(
        "asymptotic-equivalence", rep.passed,
        f"last-decade slope {rep.slope:.3f} (ceiling +0.05), "
        f"bound_fit={rep.bound_fit:.3e}")
    checks.record("mass-drift", rep.mass_drift <= 1e-6,
                  f"relative drift {rep.mass_drift:.2e} (budget 1e-06)")
    _dump_json({"gamma": config.gamma, "t_end": t_end, "slope": rep.slope,
                "bound_fit": rep.bound_fit, "mass_drift": rep.mass_drift,
                "passed": not checks.failed,
                "series": os.path.basename(series_path)},
               os.path.join(out, "liu.json"))
    checks.emit(sys.stdout)
    return checks.exit_code


def _poly_displacement(grid, scale=0.05):
    y = grid.y
    vals = np.stack([
        scale * (0.3 * y[0] + 0.2 * y[1] * y[2] - 0.1 * y[0] ** 2),
        scale * (0.25 * y[1] - 0.15 * y[0] * y[2] + 0.05 * y[2] ** 2),
        scale * (0.2 * y[2] + 0.1 * y[0] * y[1] - 0.2 * y[1] ** 2),
    ])
    return geometry.VectorField(grid, vals)


def _cmd_identities(config: Config, out):
    checks = _Checks()
    c = params.derive_constants(
        params.GasParams(gamma=config.gamma, mass=config.mass))
    grid = geometry.BallGrid(c, n_r=config.resolution, n_mu=config.n_mu,
                             n_psi=config.n_psi)
    omega = _poly_displacement(grid)
    state = geometry.deformation(omega)
    checks.record(
        "determinant-reconstruction", state.det_defect <= 1e-12,
        f"defect {state.det_defect:.2e} (budget 1e-12)")
    checks.record(
        "volume-expansion", state.expansion_defect <= 1e-12,
        f"defect {state.expansion_defect:.2e} (budget 1e-12)")
    piola = geometry.piola_residual(state).values.max()
    checks.record("piola", piola <= 1e-10,
                  f"max row-divergence {piola:.2e} (budget 1e-10)")

    r0 = c.r0

    def disp(tau, y):
        base = np.exp(-tau) * 0.04
        return np.stack([
            base * (y[0] + 0.5 * y[1] * y[2]),
            base * (y[1] - 0.3 * y[0] * y[2]),
            base * (y[2] + 0.2 * y[0] * y[1]),
        ])

    def disp_t(tau, y):
        return -disp(tau, y)

    def test_field(tau, y):
        base = np.cos(tau) * 0.03
        return np.stack([
            base * y[1] * (r0**2 - y[0] ** 2),
            base * y[2],
            base * y[0] * y[1],
        ])

    def test_field_t(tau, y):
        return np.stack([
            -np.sin(tau) * 0.03 * y[1] * (r0**2 - y[0] ** 2),
            -np.sin(tau) * 0.03 * y[2],
            -np.sin(tau) * 0.03 * y[0] * y[1],
        ])

    d1, d2 = geometry.identity_nabt_nab(grid, disp, disp_t, test_field,
                                        test_field_t, 0.3)
    checks.record("flow-contraction-time", d1 <= 1e-8,
                  f"defect {d1:.2e} (budget 1e-08)")
    checks.record("flow-contraction", d2 <= 1e-8,
                  f"defect {d2:.2e} (budget 1e-08)")

    sig = geometry.ScalarField(grid, grid.sigma**2)
    rep = geometry.commutator_defect(sig, (1, 0, 0), (0, 1, 0))
    closed = np.abs(4.0 * c.b_bar * grid.sigma * grid.y[2]).max()
    comm_ok = (abs(rep.max_commutator - closed) <= 1e-6 * closed
               and np.isfinite(rep.C_fit))
    checks.record(
        "commutator-base", comm_ok,
        f"measured {rep.max_commutator:.6e} vs closed form {closed:.6e}")

    eta = geometry.VectorField(grid, grid.y.copy())
    _, _, curl_eta = geometry.flow_ops(geometry.deformation(eta), eta)
    curl_def = np.abs(curl_eta).max()
    checks.record("flow-curl-identity", curl_def <= 1e-9,
                  f"curl of the identity map {curl_def:.2e} (budget 1e-09)")

    _dump_json({"gamma": config.gamma,
                "resolution": [config.resolution, config.n_mu, config.n_psi],
                "det_defect": state.det_defect,
                "expansion_defect": state.expansion_defect,
                "piola": piola, "nabt": d1, "nab": d2,
                "commutator": rep.max_commutator,
                "flow_curl": curl_def,
                "passed": not checks.failed},
               os.path.join(out, "identities.json"))
    checks.emit(sys.stdout)
    return checks.exit_code


def _cmd_hardy(config: Config, out):
    checks = _Checks()
    iota = 1.0 / (config.gamma - 1.0)
    rng = np.random.default_rng(config.seed)
    delta = 1.0
    ceiling = 10.0
    rows = []
    worst = 0.0
    all_ok = True
    for trial in range(20):
        a, b_, cc, d = rng.uniform(-1.0, 1.0, size=4)
        b_ = 1.0 + 2.0 * abs(b_)

        def f(r, a=a, b_=b_, cc=cc, d=d):
            return a * np.cos(b_ * r) + cc * r**2 + d + 2.0

        for k in (0.0, iota, iota + 1.0):
            rep = norms.hardy_check(f, k, delta, constant=ceiling)
            rows.append((trial, k, rep.ratio, rep.passed))
            all_ok = all_ok and rep.passed
            worst = max(worst, rep.ratio)
    checks.record(
        "hardy-random", all_ok,
        f"60 profile/weight combinations, max ratio {worst:.3f} "
        f"(ceiling {ceiling})")

    c = params.derive_constants(
        params.GasParams(gamma=config.gamma, mass=config.mass))
    grid = geometry.BallGrid(c, n_r=max(config.resolution, 24),
                             n_mu=config.n_mu, n_psi=config.n_psi)
    emb_worst = 0.0
    emb_ok = True
    emb_rows = []
    for freq in range(1, 11):
        fld = geometry.ScalarField(grid, np.cos(freq * grid.s)[:, None, None]
                                   * np.ones(grid.shape))
        rep = norms.embedding_check(fld, a=1.0, b=1)
        emb_rows.append((freq, rep.ratio))
        emb_ok = emb_ok and np.isfinite(rep.ratio)
        emb_worst = max(emb_worst, rep.ratio)
    checks.record(
        "embedding-oscillatory", emb_ok and emb_worst <= 2.5,
        f"10 frequencies, max fractional/weighted ratio {emb_worst:.3f} "
        f"(ceiling 2.5)")

    with open(os.path.join(out, "hardy.csv"), "w", encoding="utf-8",
              newline="") as fh:
        fh.write("trial,k,ratio,passed\n")
        for trial, k, ratio, ok in rows:
            fh.write(f"{trial},{k!r},{ratio!r},{int(ok)}\n")
    _dump_json({"gamma": config.gamma, "seed": config.seed,
                "hardy_max_ratio": worst, "hardy_ceiling": ceiling,
                "embedding_max_ratio": emb_worst,
                "embedding": [{"frequency": fq, "ratio": r}
                              for fq, r in emb_rows],
                "passed": not checks.failed},
               os.path.join(out, "hardy.json"))
    checks.emit(sys.stdout)
    return checks.exit_code


def _cmd_radial(config: Config, out):
    checks = _Checks()
    t_end = config.t_end if config.t_end is not None else 1e3
    truncation = norms.Truncation(m_max=config.m_max, nl_max=config.nl_max)
    run_cfg = radial.RunConfig(
        gamma=config.gamma, mass=config.mass, resolution=config.resolution,
        cfl=config.cfl, t_end=t_end, family=config.family,
        family_exponent=config.family_exponent, amplitude=config.eps,
        records=config.records, eps0=config.eps0, J_max=config.J_max,
        truncation=truncation,
        report_angles=(config.n_mu, config.n_psi))
    result = radial.run(run_cfg)
    series_path = os.path.join(out, "radial_trajectory.csv")
    radial.result_to_csv(result, series_path)
    if config.fmt == "json":
        norms.energy_reports_to_json(
            result.reports, os.path.join(out, "radial_reports.json"))

    checks.record(
        "run-outcome", result.stop_reason == "completed",
        f"stop reason '{result.stop_reason}' at t={result.stop_time:.6g}")
    mass_worst = float(result.mass_error.max())
    checks.record("mass-conservation", mass_worst <= 1e-6,
                  f"max relative defect {mass_worst:.2e} (budget 1e-06)")
    vadd_worst = float(result.v_add().max()) if result.reports else 0.0
    checks.record("vorticity-free", vadd_worst <= 1e-16,
                  f"max additional curl norm {vadd_worst:.2e} (budget 1e-16)")

    fit_payload = None
    span = (1.0 + result.times.max()) / (1.0 + result.times.min())
    if config.eps > 0.0 and span >= 10.0:
        fit = radial.fit_growth(result.times, result.radii)
        target = 1.0 / (3.0 * config.gamma - 1.0)
        dev = abs(fit.exponent - target)
        checks.record(
            "boundary-growth", dev <= 0.05 * target,
            f"exponent {fit.exponent:.5f} vs {target:.5f} "
            f"(|dev| {dev:.4f}, budget {0.05 * target:.4f}), "
            f"stderr {fit.stderr:.1e}")
        fit_payload = {"exponent": fit.exponent, "stderr": fit.stderr,
                       "target": target, "window": list(fit.window),
                       "n_points": fit.n_points}
    _dump_json({"gamma": config.gamma, "eps": config.eps, "t_end": t_end,
                "resolution": config.resolution,
                "truncation": {"m_max": config.m_max,
                               "nl_max": config.nl_max},
                "J_max": config.J_max,
                "stop_reason": result.stop_reason,
                "stop_time": result.stop_time,
                "steps": result.steps,
                "sup_energy": result.sup_energy,
                "mass_defect": mass_worst,
                "v_add_max": vadd_worst,
                "boundary_monotone": result.boundary_monotone,
                "growth_fit": fit_payload,
                "series": os.path.basename(series_path),
                "passed": not checks.failed},
               os.path.join(out, "radial_fit.json"))
    checks.emit(sys.stdout)
    return checks.exit_code


def _cmd_report(config: Config, out):
    codes = {}
    blocks = (
        ("constants", _cmd_constants),
        ("barenblatt-check", _cmd_barenblatt_check),
        ("theta", lambda cfg, o: _cmd_theta(
            replace(cfg, t_end=cfg.t_end or 1e3), o)),
        ("liu", lambda cfg, o: _cmd_liu(
            replace(cfg, t_end=cfg.t_end or 1e4), o)),
        ("identities", _cmd_identities),
        ("hardy", _cmd_hardy),
    )
    for name, fn in blocks:
        print(f"== {name} ==")
        codes[name] = fn(config, out)
    payload = {name: ("pass" if code == 0 else "fail")
               for name, code in codes.items()}
    payload["gamma"] = config.gamma
    payload["seed"] = config.seed
    _dump_json(payload, os.path.join(out, "report.json"))
    return 1 if any(codes.values()) else 0


_COMMANDS = {
    "constants": _cmd_constants,
    "barenblatt-check": _cmd_barenblatt_check,
    "theta": _cmd_theta,
    "liu": _cmd_liu,
    "identities": _cmd_identities,
    "hardy": _cmd_hardy,
    "radial": _cmd_radial,
    "report": _cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vel",
        description="self-similar expanding gas: verification suites and runs")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", metavar="PATH")
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--mass", type=float)
    parser.add_argument("--t-end", dest="t_end", type=float)
    parser.add_argument("--eps", type=float)
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--out", dest="out_dir", metavar="DIR")
    parser.add_argument("--format", dest="fmt", choices=("csv", "json"))
    parser.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    overrides = {}
    for field in fields(Config):
        val = getattr(args, field.name, None)
        if val is not None:
            overrides[field.name] = val
    try:
        config = parse_config(args.config, overrides)
        out = _out_dir(config)
        return _COMMANDS[args.command](config, out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
