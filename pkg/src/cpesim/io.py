"""Run configuration, initial-condition presets, snapshots and CSV export."""

from __future__ import annotations

import csv
import dataclasses
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from cpesim.core import (
    CPEError,
    DiagnosticsRecord,
    Grid,
    ParameterError,
    PrimState,
    Regime,
    SimParams,
    make_state,
)

MAGIC = b"CPESIM01-f64-LE\x00"
MAGIC_BE = b"CPESIM01-f64-BE\x00"
HEADER = struct.Struct("<16sB3Id")

MODES = ("run", "mms", "stability", "fb", "check")
PRESETS = ("rest", "gravity_wave", "vacuum_bump", "random", "fb_bump")


class ConfigError(CPEError, ValueError):
    pass


class SnapshotError(CPEError, OSError):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    regime: Regime
    mu: float = 1.0
    lam: float = 0.0
    gamma: float = 2.0
    g: float = 0.0
    dt: float = 1e-3
    t_end: float = 0.1
    picard_tol: float = 1e-10
    picard_max_iter: int = 20
    iota: float = 0.0
    rho_floor: float = 0.0
    transport_scheme: Optional[str] = None
    nx: int = 32
    ny: int = 32
    nz: int = 9
    init: str = "gravity_wave"
    seed: int = 0
    amplitude: float = 0.1
    perturbation: float = 1e-3
    output_dir: str = "."
    snapshot_every: int = 0
    mode: str = "run"

    def params(self) -> SimParams:
        return SimParams(
            regime=self.regime,
            mu=self.mu,
            lam=self.lam,
            gamma=self.gamma,
            g=self.g,
            dt=self.dt,
            t_end=self.t_end,
            picard_tol=self.picard_tol,
            picard_max_iter=self.picard_max_iter,
            iota=self.iota,
            rho_floor=self.rho_floor,
            transport_scheme=self.transport_scheme,
        )

    def grid(self) -> Grid:
        return Grid(self.nx, self.ny, self.nz)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_end / self.dt)))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_INTS = {"picard_max_iter", "nx", "ny", "nz", "seed", "snapshot_every"}
_STRS = {"init", "output_dir", "mode", "transport_scheme"}


def _convert(key: str, raw: str):
    if key == "regime":
        try:
            return Regime(raw)
        except ValueError:
            names = ", ".join(r.value for r in Regime)
            raise ValueError(f"unknown regime {raw!r} (expected one of {names})") from None
    if key in _INTS:
        return int(raw)
    if key in _STRS:
        if key == "transport_scheme" and raw in ("", "default"):
            return None
        return raw
    return float(raw)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) and validate the result."""
    values: dict = {}
    where: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key == "lambda":
            key = "lam"
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {where[key]})")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        where[key] = lineno

    if "regime" not in values:
        raise ConfigError("regime missing: set regime = gravity_gamma2 | vacuum_no_gravity | free_boundary")
    regime = values["regime"]
    if regime is Regime.FREE_BOUNDARY:
        values.setdefault("mu", 0.0)
        values.setdefault("lam", 0.0)
        values.setdefault("init", "fb_bump")
        values.setdefault("mode", "fb")
    elif regime is Regime.VACUUM_NO_GRAVITY:
        values.setdefault("init", "vacuum_bump")

    cfg = RunConfig(**values)
    _validate(cfg, where)
    return cfg


def _validate(cfg: RunConfig, where: dict) -> None:
    def loc(key):
        return f"line {where[key]}: " if key in where else ""

    if cfg.regime is Regime.GRAVITY_GAMMA2 and cfg.gamma != 2:
        raise ConfigError(
            f"{loc('gamma')}gamma = {cfg.gamma} rejected: the gravity regime is only "
            "formulated for gamma = 2"
        )
    if cfg.mode not in MODES:
        raise ConfigError(f"{loc('mode')}mode must be one of {', '.join(MODES)}")
    if not (cfg.init in PRESETS or cfg.init.startswith("file:")):
        raise ConfigError(f"{loc('init')}init must be one of {', '.join(PRESETS)} or file:PATH")
    if cfg.snapshot_every < 0:
        raise ConfigError(f"{loc('snapshot_every')}snapshot_every must be >= 0")
    if not cfg.t_end > 0:
        raise ConfigError(f"{loc('t_end')}t_end must be > 0")
    try:
        cfg.params()
        cfg.grid()
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if name == "regime":
            value = value.value
        elif name == "transport_scheme" and value is None:
            value = "default"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------ presets


def _band_limited(rng, shape2d, modes: int = 3) -> np.ndarray:
    nx, ny = shape2d
    x = np.arange(nx) / nx
    y = np.arange(ny) / ny
    X, Y = np.meshgrid(x, y, indexing="ij")
    out = np.zeros(shape2d)
    for mx in range(-modes, modes + 1):
        for my in range(0, modes + 1):
            a, b = rng.standard_normal(2)
            phase = 2 * np.pi * (mx * X + my * Y)
            out += a * np.cos(phase) + b * np.sin(phase)
    return out / np.max(np.abs(out))


def random_fields(grid: Grid, rng, amplitude: float = 0.1, modes: int = 3):
    """Band-limited surface perturbation and velocity with Neumann-compatible cos(k pi z) profiles."""
    surface = amplitude * _band_limited(rng, grid.shape2d, modes)
    z = grid.z_levels
    v = np.zeros(grid.vshape)
    for c in range(2):
        for k in range(3):
            v[c] += (
                amplitude
                / (1 + k)
                * _band_limited(rng, grid.shape2d, modes)[..., None]
                * np.cos(k * np.pi * z)
            )
    return surface, v


def initial_fields(cfg: RunConfig, grid: Grid):
    """Surface variable (or Z for the free boundary) and velocity for a preset."""
    X, Y = grid.mesh2d()
    x, y, z = grid.mesh3d()
    amp = cfg.amplitude
    name = cfg.init
    if name == "rest":
        return np.ones(grid.shape2d), np.zeros(grid.vshape)
    if name == "gravity_wave":
        s = 1 + amp * np.cos(2 * np.pi * X)
        v = np.stack([amp * np.sin(2 * np.pi * y) * np.cos(np.pi * z), np.zeros_like(z)])
        return s, v
    if name == "vacuum_bump":
        return vacuum_bump(X), np.zeros(grid.vshape)
    if name == "random":
        rng = np.random.default_rng(cfg.seed)
        s, v = random_fields(grid, rng, amp)
        return 1 + s, v
    if name == "fb_bump":
        return 1 + amp * np.cos(2 * np.pi * X), np.zeros(grid.vshape)
    raise ConfigError(f"unknown preset {name!r}")


def vacuum_bump(X) -> np.ndarray:
    """sigma_0 = max(0, cos 2 pi x)^2: C^1, vanishing on the whole band 1/4 <= x <= 3/4."""
    return np.maximum(0.0, np.cos(2 * np.pi * X)) ** 2


def initial_state(cfg: RunConfig):
    grid = cfg.grid()
    params = cfg.params()
    if cfg.init.startswith("file:"):
        return read_snapshot(cfg.init[5:], expect=(cfg.regime, grid))
    s, v = initial_fields(cfg, grid)
    if cfg.regime is Regime.FREE_BOUNDARY:
        from cpesim.free_boundary import FbState

        return FbState(s, v, 0.0)
    return make_state(grid, s, v, params)


# ------------------------------------------------------------ snapshots


def write_snapshot(state, path, regime: Regime) -> None:
    """Binary snapshot: header then row-major little-endian float64 fields."""
    from cpesim.free_boundary import FbState

    if isinstance(state, FbState):
        if regime is not Regime.FREE_BOUNDARY:
            raise ValueError("free-boundary state needs the free_boundary regime")
        fields = [state.v, state.Z]
    else:
        if regime is Regime.FREE_BOUNDARY:
            raise ValueError("primitive state cannot be stored under the free_boundary regime")
        fields = [state.surface_var, state.v]
    nx, ny, nz = state.v.shape[1:]
    header = HEADER.pack(MAGIC, regime.tag, nx, ny, nz, float(state.time))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for f in fields:
            fh.write(np.ascontiguousarray(f, dtype="<f8").tobytes())
    tmp.replace(path)


def read_snapshot(path, expect=None):
    """Read a snapshot; ``expect=(regime, grid)`` checks the header against a run config."""
    from cpesim.free_boundary import FbState

    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise SnapshotError(f"{path}: truncated header at byte offset {len(data)} (need {HEADER.size})")
    magic, tag, nx, ny, nz, time = HEADER.unpack_from(data)
    if magic == MAGIC_BE:
        raise SnapshotError(f"{path}: big-endian snapshot variant is not supported")
    if magic != MAGIC:
        raise SnapshotError(f"{path}: bad magic {magic!r}")
    try:
        regime = Regime.from_tag(tag)
    except ValueError:
        raise SnapshotError(f"{path}: unknown regime tag {tag}") from None
    if expect is not None:
        e_regime, e_grid = expect
        if regime is not e_regime:
            raise SnapshotError(f"{path}: regime {regime.value} does not match {e_regime.value}")
        if (nx, ny, nz) != (e_grid.nx, e_grid.ny, e_grid.nz):
            raise SnapshotError(
                f"{path}: dims {(nx, ny, nz)} do not match grid {(e_grid.nx, e_grid.ny, e_grid.nz)}"
            )

    offset = HEADER.size
    shapes = {"v": (2, nx, ny, nz), "s": (nx, ny)}
    order = ["v", "s"] if regime is Regime.FREE_BOUNDARY else ["s", "v"]
    out = {}
    for key in order:
        shape = shapes[key]
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise SnapshotError(
                f"{path}: truncated at byte offset {len(data)}; field needs bytes {offset}..{offset + nbytes}"
            )
        out[key] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise SnapshotError(f"{path}: {len(data) - offset} trailing bytes after offset {offset}")
    if regime is Regime.FREE_BOUNDARY:
        return FbState(out["s"], out["v"], time)
    return PrimState(out["s"], out["v"], time)


# ------------------------------------------------------------ CSV


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) if not isinstance(x, str) else x for x in row])


def export_diagnostics(records: Iterable[DiagnosticsRecord], path) -> None:
    write_csv(path, DiagnosticsRecord.FIELDS, ([getattr(r, f) for f in DiagnosticsRecord.FIELDS] for r in records))


def read_diagnostics(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            kw = {f: (int(row[f]) if f == "picard_iters" else float(row[f])) for f in DiagnosticsRecord.FIELDS}
            out.append(DiagnosticsRecord(**kw))
    return out

