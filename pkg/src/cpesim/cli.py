"""Command-line entry point: ``cpesim {run,mms,stability,fb,check} --config PATH``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure (CFL, Picard divergence, negative density, interface collapse),
3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from cpesim import diagnostics as dg
from cpesim import io
from cpesim.core import CPEError, NumericalError, PrimState, Regime, check_compatibility

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpesim", description="Compressible primitive equations solver")
    parser.add_argument("command", choices=io.MODES)
    parser.add_argument("--config", required=True, help="key = value configuration file")
    parser.add_argument("--steps", type=int, default=None, help="number of time steps")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--resume", default=None, help="snapshot to continue from")
    return parser


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _steps(args, cfg) -> int:
    n = cfg.n_steps if args.steps is None else args.steps
    if n < 0:
        raise UsageError("--steps must be >= 0")
    return n


def _initial(args, cfg):
    if args.resume:
        return io.read_snapshot(args.resume, expect=(cfg.regime, cfg.grid()))
    return io.initial_state(cfg)


def cmd_run(args, cfg) -> int:
    from cpesim.stepper import Stepper

    if cfg.regime is Regime.FREE_BOUNDARY:
        return cmd_fb(args, cfg)
    params, grid = cfg.params(), cfg.grid()
    out = _out_dir(args, cfg)
    state = _initial(args, cfg)
    n = _steps(args, cfg)
    stepper = Stepper(params, grid)
    records = [dg.record(state, params, grid, 0)]
    for k in range(1, n + 1):
        state, report = stepper.advance(state)
        records.append(dg.record(state, params, grid, report.iterations))
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            io.write_snapshot(state, out / f"snapshot_{k:06d}.bin", cfg.regime)
    io.export_diagnostics(records, out / "diagnostics.csv")
    io.write_snapshot(state, out / "snapshot.bin", cfg.regime)
    drift = dg.relative_mass_drift(records)
    resid = dg.energy_balance_residual(records)
    print(f"steps={n} t={state.time:.6g} mass_drift={drift:.3e} "
          f"energy_residual={resid[-1] if resid.size else 0.0:.3e} "
          f"min_density={min(r.min_density for r in records):.6g}")
    return EXIT_OK


def cmd_mms(args, cfg) -> int:
    from cpesim import verification as vf

    if cfg.regime is Regime.FREE_BOUNDARY:
        raise UsageError("mms covers the gravity and vacuum regimes")
    params = cfg.params()
    out = _out_dir(args, cfg)
    rows = []
    for name, study in (("vertical", vf.vertical_order_study), ("temporal", vf.temporal_order_study)):
        res = study(params)
        for h, e, p in res.as_rows():
            rows.append((name, h, e, p))
        print(f"{name}: errors={np.array2string(res.errors, precision=3)} order={res.order:.3f}"
              + ("" if res.monotone else " (non-monotone)"))
    io.write_csv(out / "mms.csv", ("study", "step", "error", "pairwise_order"), rows)
    return EXIT_OK


def cmd_stability(args, cfg) -> int:
    if cfg.regime is Regime.FREE_BOUNDARY:
        raise UsageError("stability covers the gravity and vacuum regimes")
    params, grid = cfg.params(), cfg.grid()
    out = _out_dir(args, cfg)
    state_a = _initial(args, cfg)
    state_b = perturbed(state_a, cfg, grid)
    series = dg.stability_experiment(state_a, state_b, params, grid, _steps(args, cfg))
    io.write_csv(
        out / "stability.csv",
        ("time", "surface_distance", "weighted_v_distance_a", "weighted_v_distance_b", "grad_v_time_l2"),
        zip(series.time, series.surface, series.weighted_v_a, series.weighted_v_b, series.grad_v),
    )
    print(f"final distances: surface={series.surface[-1]:.6e} "
          f"weighted_v={series.weighted_v_a[-1]:.6e} grad_v={series.grad_v[-1]:.6e} "
          f"growth_rate={series.growth_rate:.4g}")
    return EXIT_OK


def perturbed(state: PrimState, cfg, grid, scale: float | None = None) -> PrimState:
    """Seeded band-limited perturbation of both unknowns, scaled by ``cfg.perturbation``."""
    from cpesim.core import neumann_project

    scale = cfg.perturbation if scale is None else scale
    rng = np.random.default_rng(cfg.seed + 1)
    ds, dv = io.random_fields(grid, rng, 1.0)
    surface = state.surface_var + scale * ds
    if cfg.regime is Regime.VACUUM_NO_GRAVITY:
        surface = state.surface_var * (1 + scale * ds)  # keeps the vacuum set
    return PrimState(surface, neumann_project(state.v + scale * dv, grid), state.time)


def cmd_fb(args, cfg) -> int:
    from cpesim import free_boundary as fb

    if cfg.regime is not Regime.FREE_BOUNDARY:
        raise UsageError("fb needs regime = free_boundary")
    params, grid = cfg.params(), cfg.grid()
    out = _out_dir(args, cfg)
    state = _initial(args, cfg)
    n = _steps(args, cfg)
    m0 = fb.column_mass(state.Z, params)
    rows = []

    def row(s):
        W = fb.fb_recover_W(s.Z, s.v, params, grid)
        return (s.time, fb.column_mass(s.Z, params), float(np.min(s.Z)),
                float(np.max(np.abs(W[..., 0]))), float(np.max(np.abs(W[..., -1]))))

    rows.append(row(state))
    for k in range(1, n + 1):
        state = fb.fb_advance(state, params, grid)
        rows.append(row(state))
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            io.write_snapshot(state, out / f"snapshot_{k:06d}.bin", cfg.regime)
    io.write_csv(out / "fb.csv", ("time", "column_mass", "min_Z", "W_top", "W_ground"), rows)
    io.write_snapshot(state, out / "snapshot.bin", cfg.regime)
    print(f"steps={n} t={state.time:.6g} column_mass_drift={abs(rows[-1][1] - m0) / m0:.3e}")
    return EXIT_OK


def cmd_check(args, cfg) -> int:
    if cfg.regime is Regime.FREE_BOUNDARY:
        raise UsageError("check covers the gravity and vacuum regimes")
    state = _initial(args, cfg)
    rep = check_compatibility(state, cfg.params(), cfg.grid())
    label = "V1" if cfg.regime is Regime.GRAVITY_GAMMA2 else "h1"
    print(f"{label}_l2 = {rep.v1_l2:.17g}")
    print(f"neumann_bottom = {rep.neumann_bottom:.17g}")
    print(f"neumann_top = {rep.neumann_top:.17g}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "mms": cmd_mms, "stability": cmd_stability, "fb": cmd_fb, "check": cmd_check}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = io.load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, io.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, io.SnapshotError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CPEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
