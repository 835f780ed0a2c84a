"""Command-line front end: fixtures, reduce, dress, flow, vhs, verify.

Every command reads one :class:`RunConfig` (defaults, then an optional JSON
config file, then flags -- later layers win), validates it, writes its
outputs plus a ``manifest.json`` into the output directory, and prints a
short summary.  All JSON and CSV payloads are byte-identical across reruns
and thread counts; the manifest's wall time is the single exempt value.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure (the failing condition is named on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models, output, reduction
from . import verify as verify_mod
from .dressing import (
    ConsistencyViolation,
    MonodromyMismatch,
    dress_loop,
    dress_multivariable,
    verify_loop_dressing,
    verify_uframe_dressing,
)
from .flows import (
    FlowAborted,
    FlowGenerator,
    LoopState,
    conserved_table,
    integrate_flow,
    max_relative_drift,
    spectral_drift,
)
from .hodge import (
    check_eqprfrob,
    fundamental_solution,
    isotropy_report,
    symbol_map,
)
from .reduction import (
    EigenvalueCollision,
    NormalizationSingular,
    PathInconsistency,
)

__all__ = ["ConfigError", "RunConfig", "main"]

NUMERICAL_ERRORS = (
    EigenvalueCollision,
    NormalizationSingular,
    PathInconsistency,
    ConsistencyViolation,
    MonodromyMismatch,
    FlowAborted,
)

_TOL_NAMES = {
    "collision": "collision_tol",
    "consistency": "consistency_tol",
    "path": "path_tol",
}


class ConfigError(ValueError):
    """Configuration rejected before any computation started."""


# --------------------------------------------------------------------- #
# configuration


@dataclass
class RunConfig:
    """One run: fixture, geometry, truncation depths, flow and tolerances."""

    fixture: str = "qh_p1"
    out_dir: str = ""                      # empty: runs/<command>
    K: int = 4
    K_vhs: int = 4
    N: int = 128
    shape: tuple = (33, 33)
    vhs_shape: tuple = (65, 65)
    bounds: tuple | None = None            # grid box; None: fixture domain
    radii: tuple = (0.1, 0.16)             # loop semi-axes
    center: tuple | None = None            # loop center; None: basepoint
    dt: float = 1e-3
    steps: int = 200
    record_every: int = 10
    b: tuple = ("2:1,0",)                  # generator rows "j:d1,...,dn"
    collision_tol: float = 1e-8
    consistency_tol: float = 1e-3
    path_tol: float = 1e-5
    quadrature: str = "spline"
    suite: str = "fixture"
    threads: int = 1
    seed: int = 0
    plot: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(data: dict) -> dict:
    """JSON arrays arrive as lists; the config stores tuples."""
    out = dict(data)
    for key in ("shape", "vhs_shape", "radii", "b"):
        if out.get(key) is not None:
            out[key] = tuple(tuple(v) if isinstance(v, list) else v
                             for v in out[key])
    for key in ("bounds", "center"):
        if out.get(key) is not None:
            out[key] = tuple(tuple(v) if isinstance(v, list) else v
                             for v in out[key])
    return out


def load_config(args: argparse.Namespace) -> RunConfig:
    data = RunConfig().as_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_data) - set(data))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data.update(file_data)
    for key in data:
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    for spec in getattr(args, "tol", None) or ():
        name, _, value = str(spec).partition("=")
        if name not in _TOL_NAMES:
            raise ConfigError(
                f"unknown tolerance '{name}' (expected one of: "
                f"{', '.join(sorted(_TOL_NAMES))})")
        try:
            data[_TOL_NAMES[name]] = float(value)
        except ValueError:
            raise ConfigError(f"tolerance '{name}' needs a numeric value")
    try:
        cfg = RunConfig(**_coerce(data))
    except TypeError as exc:
        raise ConfigError(str(exc))
    validate(cfg)
    return cfg


def _model_of(cfg: RunConfig):
    try:
        return models.fixture(cfg.fixture)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"unknown fixture '{cfg.fixture}': {exc}")


def validate(cfg: RunConfig) -> None:
    model = _model_of(cfg)
    for name in ("collision_tol", "consistency_tol", "path_tol", "dt"):
        if not getattr(cfg, name) > 0.0:
            raise ConfigError(f"{name} must be positive")
    if cfg.N < 8 or (cfg.N & (cfg.N - 1)) != 0:
        raise ConfigError(f"N must be a power of two >= 8, got {cfg.N}")
    for name in ("K", "K_vhs", "steps", "record_every", "threads"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    for name in ("shape", "vhs_shape"):
        shape = getattr(cfg, name)
        if any(int(s) < 5 for s in shape):
            raise ConfigError(f"every {name} entry must be at least 5")
    if cfg.quadrature not in ("spline", "trapezoid"):
        raise ConfigError(f"unknown quadrature '{cfg.quadrature}'")
    if cfg.suite not in ("fixture", "acceptance"):
        raise ConfigError(f"unknown suite '{cfg.suite}'")
    if cfg.bounds is not None:
        # exploratory grids may leave the recommended box (caustic probes
        # rely on it); degeneracies inside the box surface as exit 3.
        if len(cfg.bounds) != model.n:
            raise ConfigError(
                f"bounds must give {model.n} intervals for {model.name}")
        for lo, hi in cfg.bounds:
            if not (lo < hi):
                raise ConfigError("each bounds interval needs lo < hi")
    center = cfg.center if cfg.center is not None else tuple(model.basepoint)
    if len(center) != model.n:
        raise ConfigError(f"center must have {model.n} components")
    if model.n == 2:
        for c, r, (dlo, dhi) in zip(center, cfg.radii, model.domain):
            if c - r < dlo or c + r > dhi:
                raise ConfigError(
                    f"loop of radius {r} around {c} leaves the fixture "
                    f"domain [{dlo}, {dhi}]")
    for spec in cfg.b:
        _parse_b_row(spec, model.n)


def _parse_b_row(spec: str, n: int):
    head, sep, tail = str(spec).partition(":")
    try:
        j = int(head)
        vals = [float(tok) for tok in tail.split(",")]
    except ValueError:
        raise ConfigError(
            f"generator row '{spec}' must look like 'j:d1,...,d{n}'")
    if not sep or j < 1:
        raise ConfigError(f"generator row '{spec}' needs a pole order j >= 1")
    if len(vals) != n:
        raise ConfigError(
            f"generator row '{spec}' needs {n} diagonal entries")
    return j, vals


def generator_from_config(cfg: RunConfig, n: int) -> FlowGenerator:
    rows: dict[int, list[float]] = {}
    for spec in cfg.b:
        j, vals = _parse_b_row(spec, n)
        if j in rows:
            raise ConfigError(f"generator pole order {j} given twice")
        rows[j] = vals
    entries = np.zeros((max(rows), n))
    for j, vals in rows.items():
        entries[j - 1] = vals
    return FlowGenerator(entries)


# --------------------------------------------------------------------- #
# commands


def _outdir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out_dir) if cfg.out_dir else Path("runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _loop_state(cfg: RunConfig, model) -> LoopState:
    if model.n != 2:
        raise ConfigError(
            f"loop commands support n = 2 fixtures; {model.name} has "
            f"n = {model.n}")
    return LoopState.from_model(model, N=cfg.N, radii=cfg.radii,
                                center=cfg.center)


def cmd_fixtures(cfg: RunConfig, out: Path) -> int:
    names = []
    for name in models.available_fixtures():
        names.extend(("trivial_diag(2)", "trivial_diag(3)")
                     if name == "trivial_diag(n)" else (name,))
    rows = []
    for name in names:
        m = models.fixture(name)
        rows.append({
            "name": name,
            "n": m.n,
            "domain": [list(iv) for iv in m.domain],
            "basepoint": np.asarray(m.basepoint),
            "unit": np.asarray(m.unit),
        })
        print(f"{name:18s} n={m.n}  domain={m.domain}  "
              f"basepoint={tuple(np.asarray(m.basepoint).tolist())}")
    output.write_json(out / "fixtures.json", rows)
    return 0


def cmd_reduce(cfg: RunConfig, out: Path) -> int:
    model = _model_of(cfg)
    if model.n != 2:
        raise ConfigError(
            f"reduce supports n = 2 fixtures; {model.name} has n = {model.n}")
    frame = reduction.build_frame(model, bounds=cfg.bounds, shape=cfg.shape,
                                  collision_tol=cfg.collision_tol,
                                  path_tol=cfg.path_tol)
    rep = frame.report.as_dict()
    output.write_json(out / "frame.json", {
        "fixture": model.name,
        "shape": list(frame.shape),
        "axes": [[float(ax[0]), float(ax[-1])] for ax in frame.axes],
        "report": rep,
    })
    header = ["x1", "x2", "u1", "u2"]
    rows = []
    pts = frame.pts.reshape(-1, model.n)
    u = frame.u.reshape(-1, model.n)
    for p, v in zip(pts, u):
        rows.append([p[0], p[1], v[0].real, v[1].real])
    output.write_csv(out / "u.csv", header, rows)
    for key, val in rep.items():
        print(f"{key:24s} {val:.3e}")
    return 0


def cmd_dress(cfg: RunConfig, out: Path) -> int:
    model = _model_of(cfg)
    loop = _loop_state(cfg, model)
    ld = dress_loop(loop.C, eta=loop.eta, K=cfg.K, s=loop.s,
                    collision_tol=cfg.collision_tol,
                    consistency_tol=cfg.consistency_tol)
    lrep = verify_loop_dressing(ld)
    frame = reduction.build_frame(model, bounds=cfg.bounds, shape=cfg.shape,
                                  collision_tol=cfg.collision_tol,
                                  path_tol=cfg.path_tol)
    uf = reduction.to_u_frame(frame, shape=cfg.shape)
    ds = dress_multivariable(uf, K=cfg.K,
                             consistency_tol=cfg.consistency_tol)
    grep = verify_uframe_dressing(uf, ds)
    output.write_json(out / "dress.json", {
        "fixture": model.name,
        "K": cfg.K,
        "loop": lrep.as_dict(),
        "grid": grep.as_dict(),
    })
    header = ["s"] + [f"h({k})_{i + 1}" for k in range(-1, cfg.K)
                      for i in range(model.n)]
    rows = []
    for idx, s_val in enumerate(loop.s):
        row = [s_val]
        for k in range(-1, cfg.K):
            row.extend(np.real(ld.h_k(k)[idx, i]) for i in range(model.n))
        rows.append(row)
    output.write_csv(out / "h.csv", header, rows)
    print(f"loop normal form: max off-diagonal {lrep.max_offdiag:.3e}")
    print(f"grid normal form: max off-diagonal {grep.max_offdiag:.3e}")
    return 0


def _drift_column(table: np.ndarray) -> list[float]:
    return [0.0 if i == 0 else max_relative_drift(table[: i + 1])
            for i in range(table.shape[0])]


def cmd_flow(cfg: RunConfig, out: Path) -> int:
    model = _model_of(cfg)
    gen = generator_from_config(cfg, model.n)
    loop = _loop_state(cfg, model)
    traj = integrate_flow(loop, gen, dt=cfg.dt, steps=cfg.steps,
                          record_every=cfg.record_every,
                          collision_tol=cfg.collision_tol,
                          consistency_tol=cfg.consistency_tol)
    table = conserved_table(traj, K=cfg.K,
                            collision_tol=cfg.collision_tol,
                            consistency_tol=cfg.consistency_tol)
    drift = _drift_column(table)
    header = ["t"] + [f"I({k})_{j + 1}" for k in range(-1, cfg.K)
                      for j in range(model.n)] + ["drift"]
    rows = []
    for i, t in enumerate(traj.times):
        row = [float(t)]
        row.extend(np.real(table[i]).reshape(-1).tolist())
        row.append(drift[i])
        rows.append(row)
    output.write_csv(out / "flow.csv", header, rows)
    summary = {
        "fixture": model.name,
        "generator": np.real(gen.entries),
        "dt": cfg.dt,
        "steps": cfg.steps,
        "records": len(traj.times),
        "drift_final": drift[-1],
        "spectral_drift": spectral_drift(traj),
    }
    output.write_json(out / "flow.json", summary)
    if cfg.plot:
        _plot_flow(out, traj.times, header, table, drift)
    print(f"integrated {cfg.steps} steps of dt={cfg.dt:g}; "
          f"{len(traj.times)} records")
    print(f"conserved-quantity drift {drift[-1]:.3e}; "
          f"eigenvalue drift {summary['spectral_drift']:.3e}")
    return 0


def _plot_flow(out: Path, times, header, table, drift) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    flat = np.abs(table.reshape(table.shape[0], -1))
    dev = np.abs(flat - flat[0])
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    labels = header[1:-1]
    for col in range(dev.shape[1]):
        ax0.semilogy(times, np.maximum(dev[:, col], 1e-18),
                     label=labels[col], lw=1)
    ax0.set_ylabel("|I(t) - I(0)|")
    ax0.legend(fontsize=6, ncol=2)
    ax1.semilogy(times, np.maximum(drift, 1e-18), lw=1.2, color="k")
    ax1.set_xlabel("t")
    ax1.set_ylabel("relative drift")
    fig.tight_layout()
    fig.savefig(out / "conserved.png", dpi=150)
    plt.close(fig)


def cmd_vhs(cfg: RunConfig, out: Path) -> int:
    model = _model_of(cfg)
    if model.n != 2:
        raise ConfigError(
            f"vhs supports n = 2 fixtures; {model.name} has n = {model.n}")
    fs = fundamental_solution(model, shape=cfg.vhs_shape, K_vhs=cfg.K_vhs,
                              bounds=cfg.bounds, path_tol=cfg.path_tol,
                              quadrature=cfg.quadrature)
    eq = check_eqprfrob(fs, model)
    iso = isotropy_report(fs)
    sym = symbol_map(fs, model)
    payload = {
        "fixture": model.name,
        "K_vhs": cfg.K_vhs,
        "shape": list(cfg.vhs_shape),
        "path_consistency": fs.path_consistency,
        "residual_interior": fs.residual_interior,
        "flat_identities": eq,
        "isotropy": iso,
        "symbol": sym,
    }
    output.write_json(out / "vhs.json", payload)
    print(f"fundamental solution residual {fs.residual_interior:.3e} "
          f"(paths agree to {fs.path_consistency:.3e})")
    for group, vals in (("identity", eq), ("isotropy", iso), ("symbol", sym)):
        for key, val in vals.items():
            print(f"{group}.{key:24s} {val:.3e}")
    return 0


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    if cfg.suite == "acceptance":
        results = verify_mod.run_acceptance(threads=cfg.threads)
    else:
        results = verify_mod.fixture_suite(cfg.fixture, shape=cfg.shape,
                                           N=cfg.N, threads=cfg.threads)
    for r in results:
        print(r.line())
    output.write_json(out / "verify.json", [r.as_dict() for r in results])
    failed = [r for r in results if r.status == "fail"]
    counts = (f"{sum(r.status == 'pass' for r in results)} passed, "
              f"{sum(r.status == 'skip' for r in results)} skipped, "
              f"{len(failed)} failed")
    print(counts)
    if failed:
        print("verification failed: " + "; ".join(r.name for r in failed),
              file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "fixtures": cmd_fixtures,
    "reduce": cmd_reduce,
    "dress": cmd_dress,
    "flow": cmd_flow,
    "vhs": cmd_vhs,
    "verify": cmd_verify,
}


# --------------------------------------------------------------------- #
# argument parsing


def _int_pair(text: str) -> tuple:
    try:
        parts = tuple(int(tok) for tok in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected axbxc... grid shape, got '{text}'")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--fixture", help="model fixture name")
    common.add_argument("--config", help="JSON file of RunConfig fields")
    common.add_argument("--out-dir", dest="out_dir",
                        help="output directory (default runs/<command>)")
    common.add_argument("--K", type=int, help="dressing truncation depth")
    common.add_argument("--K-vhs", dest="K_vhs", type=int,
                        help="fundamental-solution truncation depth")
    common.add_argument("--N", type=int, help="loop sample count (power of 2)")
    common.add_argument("--shape", type=_int_pair,
                        help="grid resolution, e.g. 33x33")
    common.add_argument("--vhs-shape", dest="vhs_shape", type=_int_pair,
                        help="fundamental-solution grid resolution")
    common.add_argument("--dt", type=float, help="integration step")
    common.add_argument("--steps", type=int, help="integration step count")
    common.add_argument("--record-every", dest="record_every", type=int,
                        help="snapshot cadence in steps")
    common.add_argument("--b", action="append",
                        help="generator row 'j:d1,...,dn' -- the diagonal of "
                             "the 1/hbar^j coefficient; repeat for more rows")
    common.add_argument("--tol", action="append", metavar="NAME=VALUE",
                        help="override a tolerance: collision, consistency "
                             "or path")
    common.add_argument("--threads", type=int,
                        help="worker threads for independent checks "
                             "(results are identical for any value)")
    common.add_argument("--seed", type=int,
                        help="seed echoed into the manifest; bundled "
                             "commands are fully deterministic")

    parser = argparse.ArgumentParser(
        prog="froblax",
        description="Dressing, flows and verification for semisimple "
                    "multiplication pencils.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fixtures", parents=[common],
                   help="list bundled model fixtures")
    sub.add_parser("reduce", parents=[common],
                   help="build the canonical eigenframe on a grid")
    sub.add_parser("dress", parents=[common],
                   help="run the normal-form recursion on a loop and a grid")
    flow = sub.add_parser("flow", parents=[common],
                          help="integrate one flow and tabulate its "
                               "conserved quantities")
    flow.add_argument("--plot", action="store_true", default=None,
                      help="also render conserved-quantity figures (PNG)")
    vhs = sub.add_parser("vhs", parents=[common],
                         help="fundamental solution, pairing and symbol "
                              "checks")
    vhs.add_argument("--quadrature", choices=("spline", "trapezoid"),
                     help="path-integration rule")
    verify = sub.add_parser("verify", parents=[common],
                            help="run invariant checks and exit 0 iff all "
                                 "pass")
    verify.add_argument("--suite", choices=("fixture", "acceptance"),
                        help="fixture: every module on the configured "
                             "fixture; acceptance: the full criteria "
                             "registry")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_config(args)
        out = _outdir(cfg, args.command)
        code = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3
    output.write_manifest(out / "manifest.json", cfg.as_dict(), started)
    return code


if __name__ == "__main__":
    sys.exit(main())
