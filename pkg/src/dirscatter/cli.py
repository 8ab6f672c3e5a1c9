"""Experiment driver: configuration, solve/verify/bench/ablate runs and CSV output.

Configuration files are plain ``key = value`` lines (``#`` starts a comment).
Command-line flags override the file.  Lists are comma separated, shape
parameters use dotted keys such as ``shape.a = 1.0``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
import time
import warnings
from contextlib import nullcontext
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import assembly
from .compression import build_directional_approx
from .geometry import build_curve, discretize
from .krylov import gmres
from .preconditioner import build_preconditioner
from .segmentation import build_segments

__all__ = [
    "BENCH_HEADER",
    "BenchRow",
    "ConfigError",
    "RunConfig",
    "SolveOutput",
    "VerifyResult",
    "load_config",
    "main",
    "parse_config_text",
    "run_ablate",
    "run_bench",
    "run_solve",
    "run_verify",
    "write_bench_csv",
]

log = logging.getLogger(__name__)

BENCH_HEADER = ("omega", "n", "Ts", "Ta", "Tm", "np", "nn")
WORKERS_ENV = "DIRSCATTER_WORKERS"
DENSE_WARN_N = 140_000
EXIT_OK, EXIT_CONFIG, EXIT_NOCONV = 0, 2, 3

MODES = ("solve", "verify", "bench", "ablate")
PRECOND = ("on", "off", "both")
SHAPES = ("circle", "ellipse", "kite")


class ConfigError(ValueError):
    """Invalid configuration; ``where`` names the offending line or field."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """One experiment.  Defaults reproduce the reference benchmark protocol."""

    shape: tuple = ("ellipse",)
    shape_params: dict = field(default_factory=dict)
    q: tuple = (4,)
    p: int = 8
    bc: tuple = ("dirichlet",)
    eta: float | None = None  # None: eta = omega
    m_leaf: int = 4
    m_c: int = 10
    tau: float = 4.0
    taus: tuple = (2.0, 4.0, 8.0)  # ablation sweep
    tol: float = 1e-6
    restart: int = 80
    maxit: int = 500
    precond: str | None = None  # None: "both" for bench, "on" otherwise
    mode: str = "solve"
    out: str | None = None
    seed: int = 0
    probes: int = 4  # random vectors per ablation variant
    field_points: int = 0  # solve: evaluate the scattered field on a ring of this many points
    direction: tuple = (1.0, 0.0)
    workers: int | None = None

    def single(self, name):
        vals = getattr(self, name)
        if len(vals) != 1:
            raise ConfigError(f"mode {self.mode!r} takes a single value, got {len(vals)}", name)
        return vals[0]

    def cases(self):
        return list(product(self.shape, self.bc, self.q))


def _split(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _as_int(v):
    f = float(v)
    if not f.is_integer():
        raise ValueError(f"expected an integer, got {v!r}")
    return int(f)


def _as_eta(v):
    if v.strip().lower() in ("omega", "none", ""):
        return None
    return float(v)


def _as_choice(choices):
    def conv(v):
        v = v.strip().lower()
        if v not in choices:
            raise ValueError(f"expected one of {choices}, got {v!r}")
        return v

    return conv


def _as_tuple(conv):
    def convert(v):
        items = tuple(conv(x) for x in _split(v))
        if not items:
            raise ValueError("empty list")
        return items

    return convert


def _as_direction(v):
    d = np.array([float(x) for x in _split(v)])
    if d.shape != (2,) or not np.all(np.isfinite(d)) or np.hypot(*d) == 0:
        raise ValueError("direction needs two finite components, not both zero")
    d = d / np.hypot(*d)
    return (float(d[0]), float(d[1]))


def _optional(conv):
    return lambda v: None if v.strip().lower() in ("none", "") else conv(v)


_CONVERTERS = {
    "shape": _as_tuple(_as_choice(SHAPES)),
    "q": _as_tuple(_as_int),
    "p": _as_int,
    "bc": _as_tuple(_as_choice(("dirichlet", "neumann"))),
    "eta": _as_eta,
    "m_leaf": _as_int,
    "m_c": _as_int,
    "tau": float,
    "taus": _as_tuple(float),
    "tol": float,
    "restart": _as_int,
    "maxit": _as_int,
    "precond": _optional(_as_choice(PRECOND)),
    "mode": _as_choice(MODES),
    "out": _optional(str),
    "seed": _as_int,
    "probes": _as_int,
    "field_points": _as_int,
    "direction": _as_direction,
    "workers": _optional(_as_int),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a raw string mapping.

    Unknown keys, duplicates and malformed lines raise ConfigError naming the line.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", where)
        key, value = (part.strip() for part in body.split("=", 1))
        if not _known_key(key):
            raise ConfigError(f"unknown key {key!r}", where)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", where)
        raw[key] = (value, where)
    return raw


def _known_key(key):
    return key in _CONVERTERS or (key.startswith("shape.") and len(key) > 6)


def build_config(raw: dict) -> RunConfig:
    """Validate a raw mapping (key -> value or (value, where)) into a RunConfig."""
    kwargs, params = {}, {}
    for key, entry in raw.items():
        value, where = entry if isinstance(entry, tuple) else (entry, key)
        if not _known_key(key):
            raise ConfigError(f"unknown key {key!r}", where)
        try:
            if key.startswith("shape."):
                params[key[6:]] = float(value)
            else:
                kwargs[key] = _CONVERTERS[key](str(value))
        except ValueError as exc:
            raise ConfigError(str(exc), where) from None
    cfg = RunConfig(shape_params=params, **kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    checks = [
        ("q", all(q >= 2 for q in cfg.q), "q must be >= 2"),
        ("p", cfg.p >= 4, "p must be >= 4"),
        ("m_leaf", cfg.m_leaf in (2, 4), "m_leaf must be 2 or 4"),
        ("m_c", cfg.m_c >= 2, "m_c must be >= 2"),
        ("tau", cfg.tau >= 1, "tau must be >= 1"),
        ("taus", all(t >= 1 for t in cfg.taus), "every tau must be >= 1"),
        ("tol", 0 < cfg.tol < 1, "tol must lie in (0, 1)"),
        ("restart", cfg.restart >= 1, "restart must be positive"),
        ("maxit", cfg.maxit >= 1, "maxit must be positive"),
        ("eta", cfg.eta is None or cfg.eta > 0, "eta must be positive"),
        ("probes", cfg.probes >= 0, "probes must be >= 0"),
        ("field_points", cfg.field_points >= 0, "field_points must be >= 0"),
        ("workers", cfg.workers is None or cfg.workers >= 1, "workers must be positive"),
    ]
    for name, ok, msg in checks:
        if not ok:
            raise ConfigError(msg, name)
    for shape in cfg.shape:
        try:
            build_curve(shape, cfg.shape_params or None)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), "shape") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (optional) and apply overrides on top."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", str(path)) from None
        raw = parse_config_text(text, str(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = (str(value), f"--{key}")
    return build_config(raw)


# --------------------------------------------------------------------------
# shared pieces


def _workers(cfg):
    n = cfg.workers
    if n is None and os.environ.get(WORKERS_ENV):
        try:
            n = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigError(f"expected an integer, got {os.environ[WORKERS_ENV]!r}", WORKERS_ENV) from None
        if n < 1:
            raise ConfigError("worker count must be positive", WORKERS_ENV)
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _discretization(cfg, shape, q):
    return discretize(build_curve(shape, cfg.shape_params or None), q, cfg.p)


def _solve_options(cfg):
    return dict(tol=cfg.tol, restart=cfg.restart, maxit=cfg.maxit)


def _setup_preconditioner(cfg, disc, bc, eta, *, tau=None, exact_diagonal=None, zero_E=False):
    segs = build_segments(disc, cfg.m_leaf)
    approx = build_directional_approx(disc, segs, bc, eta, cfg.m_c, exact_diagonal=exact_diagonal)
    if zero_E:
        approx = dataclasses.replace(approx, E=sp.csr_matrix(approx.E.shape, dtype=complex))
    return build_preconditioner(approx, cfg.tau if tau is None else tau)


def _paths(cfg, default="on"):
    mode = cfg.precond or default
    return {"on": ("on",), "off": ("off",), "both": ("on", "off")}[mode]


def _ring(disc, count):
    """Exterior ring around the centroid, at least max(4 lambda, 0.2 diam) from the boundary."""
    c = disc.interior_point()
    radii = np.hypot(*(disc.points - c).T)
    sub = disc.points[:: max(1, disc.n // 512)]
    diam = float(np.sqrt(((sub[:, None, :] - sub[None, :, :]) ** 2).sum(-1)).max())
    R = radii.max() + max(4 * disc.wavelength, 0.2 * diam)
    th = 2 * np.pi * np.arange(count) / count
    return c + R * np.column_stack([np.cos(th), np.sin(th)])


def _solve_paths(cfg, disc, M, f, bc, eta):
    reports, precond = {}, None
    for path in _paths(cfg):
        apply_M = None
        if path == "on":
            precond = _setup_preconditioner(cfg, disc, bc, eta)
            apply_M = precond.apply
        reports[path] = gmres(M.matvec, f, apply_M, **_solve_options(cfg))
        log.info(
            "%s q=%d %s precond=%s: %d iterations, residual %.2e",
            disc.curve.shape_id if disc.curve else "?",
            disc.q,
            bc,
            path,
            reports[path].iterations,
            reports[path].relative_residual,
        )
    return reports, precond


def _relative_diff(reports):
    if len(reports) < 2:
        return None
    a, b = reports["on"].x, reports["off"].x
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# --------------------------------------------------------------------------
# solve


@dataclass
class SolveOutput:
    reports: dict  # "on"/"off" -> SolveReport
    omega: float
    n: int
    solution_diff: float | None = None
    field: np.ndarray | None = None
    field_points: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.reports.values())

    def residual_csv(self) -> str:
        paths = list(self.reports)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", *(f"residual_{p}" for p in paths)])
        longest = max(len(r.residuals) for r in self.reports.values())
        for k in range(longest):
            row = [k]
            for p in paths:
                res = self.reports[p].residuals
                row.append(f"{res[k]:.17g}" if k < len(res) else "")
            w.writerow(row)
        return buf.getvalue()


def run_solve(cfg: RunConfig) -> SolveOutput:
    """Plane-wave scattering solve for a single shape, bc and q."""
    shape, bc, q = cfg.single("shape"), cfg.single("bc"), cfg.single("q")
    with _workers(cfg):
        disc = _discretization(cfg, shape, q)
        M = assembly.assemble_cfie(disc, bc, cfg.eta)
        try:
            f = assembly.plane_wave_rhs(disc, cfg.direction, bc).values
            reports, _ = _solve_paths(cfg, disc, M, f, bc, M.eta)
        finally:
            M.release()
        out = SolveOutput(reports, disc.omega, disc.n, _relative_diff(reports))
        if cfg.field_points:
            pts = _ring(disc, cfg.field_points)
            x = next(iter(reports.values())).x
            out.field = assembly.evaluate_field(disc, x, bc, cfg.eta, pts).values
            out.field_points = pts
    if cfg.out:
        Path(cfg.out).write_text(out.residual_csv())
    return out


# --------------------------------------------------------------------------
# verify


@dataclass
class VerifyResult:
    error: float  # worst over the solve paths
    errors: dict  # path -> max relative exterior error
    reports: dict
    omega: float
    n: int

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.reports.values())


def run_verify(cfg: RunConfig, ring_points: int = 64) -> VerifyResult:
    """Point-source test: the exterior field of a source inside the obstacle is known exactly."""
    shape, bc, q = cfg.single("shape"), cfg.single("bc"), cfg.single("q")
    with _workers(cfg):
        disc = _discretization(cfg, shape, q)
        x0 = disc.interior_point()
        M = assembly.assemble_cfie(disc, bc, cfg.eta)
        try:
            f = assembly.point_source_rhs(disc, x0, bc).values
            reports, _ = _solve_paths(cfg, disc, M, f, bc, M.eta)
        finally:
            M.release()
        pts = _ring(disc, ring_points)
        exact = assembly.green(disc.omega, pts, x0)
        errors = {}
        for path, rep in reports.items():
            u = assembly.evaluate_field(disc, rep.x, bc, cfg.eta, pts).values
            errors[path] = float(np.abs(u - exact).max() / np.abs(exact).max())
    res = VerifyResult(max(errors.values()), errors, reports, disc.omega, disc.n)
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["shape", "bc", "q", "path", "iterations", "error"])
            for path, rep in reports.items():
                w.writerow([shape, bc, q, path, rep.iterations, f"{errors[path]:.6e}"])
    return res


# --------------------------------------------------------------------------
# bench


@dataclass
class BenchRow:
    omega: float
    n: int
    Ts: float  # preconditioner setup, seconds
    Ta: float  # preconditioner application, seconds per call
    Tm: float  # dense matvec, seconds per call
    np: int | None  # preconditioned GMRES iterations
    nn: int | None  # unpreconditioned GMRES iterations
    residual_p: float | None = None
    residual_n: float | None = None
    shape: str = ""
    bc: str = ""
    q: int = 0
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def cells(self):
        def num(v, fmt):
            return "" if v is None else format(v, fmt)

        return [
            f"{self.omega:.6e}",
            str(self.n),
            num(self.Ts, ".4e"),
            num(self.Ta, ".4e"),
            num(self.Tm, ".4e"),
            num(self.np, "d"),
            num(self.nn, "d"),
        ]


def _time_matvec(M, v, repeats=5):
    t0 = time.perf_counter()
    for _ in range(repeats):
        M.matvec(v)
    return (time.perf_counter() - t0) / repeats


def bench_case(cfg: RunConfig, shape: str, bc: str, q: int) -> BenchRow:
    disc = _discretization(cfg, shape, q)
    if disc.n > DENSE_WARN_N:
        warnings.warn(f"n = {disc.n} is beyond the dense-matvec desk budget", RuntimeWarning, stacklevel=2)
    t0 = time.perf_counter()
    M = assembly.assemble_cfie(disc, bc, cfg.eta)
    t_asm = time.perf_counter() - t0
    row = BenchRow(disc.omega, disc.n, None, None, None, None, None, shape=shape, bc=bc, q=q)
    row.extra["assembly"] = t_asm
    try:
        f = assembly.plane_wave_rhs(disc, cfg.direction, bc).values
        row.Tm = _time_matvec(M, f)
        if "on" in _paths(cfg, "both"):
            t0 = time.perf_counter()
            P = _setup_preconditioner(cfg, disc, bc, M.eta)
            row.Ts = time.perf_counter() - t0
            rep = gmres(M.matvec, f, P.apply, **_solve_options(cfg))
            row.np, row.residual_p = rep.iterations, rep.relative_residual
            row.Ta = rep.precond_time / max(rep.n_precond, 1)
            row.converged &= rep.converged
            diag = P.diagnostics()
            row.extra.update(nnz_W=diag["nnz_W"], dim_W=diag["dim_W"], nnz_E=int(P.approx.E.nnz), m=P.approx.segments.m)
            del P
        if "off" in _paths(cfg, "both"):
            rep = gmres(M.matvec, f, None, **_solve_options(cfg))
            row.nn, row.residual_n = rep.iterations, rep.relative_residual
            row.converged &= rep.converged
    finally:
        M.release()
    log.info(
        "bench %s %s q=%d: n=%d np=%s nn=%s Ts=%s Ta=%s Tm=%.3g (assembly %.1fs)",
        shape, bc, q, disc.n, row.np, row.nn, row.Ts, row.Ta, row.Tm, t_asm,
    )
    return row


def bench_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def write_bench_csv(rows, out) -> list:
    """One table per (shape, bc); returns the paths written.

    With several tables the file stem gets a ``_<shape>_<bc>`` suffix.  Final
    residuals go to a ``<stem>_residuals.csv`` sidecar so the table schema
    stays fixed.
    """
    out = Path(out)
    groups = {}
    for r in rows:
        groups.setdefault((r.shape, r.bc), []).append(r)
    written = []
    for (shape, bc), grp in groups.items():
        path = out if len(groups) == 1 else out.with_name(f"{out.stem}_{shape}_{bc}{out.suffix}")
        path.write_text(bench_csv_text(grp))
        written.append(path)
    side = out.with_name(f"{out.stem}_residuals.csv")
    with open(side, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shape", "bc", "q", "residual_p", "residual_n"])
        for r in rows:
            w.writerow([r.shape, r.bc, r.q, r.residual_p if r.residual_p is not None else "",
                        r.residual_n if r.residual_n is not None else ""])
    written.append(side)
    return written


def run_bench(cfg: RunConfig) -> list:
    """Iteration counts and timings for every (shape, bc, q) of the config."""
    with _workers(cfg):
        rows = [bench_case(cfg, shape, bc, q) for shape, bc, q in cfg.cases()]
    if cfg.out:
        write_bench_csv(rows, cfg.out)
    return rows


# --------------------------------------------------------------------------
# ablation

ABLATE_HEADER = ("shape", "bc", "q", "variant", "tau", "np", "residual", "probe_err")


def _probe_error(M, P, rng, count):
    """Mean of ||P M x - x|| / ||x|| over random complex Gaussian x."""
    if count == 0:
        return float("nan")
    errs = []
    for _ in range(count):
        x = rng.standard_normal(M.n) + 1j * rng.standard_normal(M.n)
        errs.append(np.linalg.norm(P.apply(M.matvec(x)) - x) / np.linalg.norm(x))
    return float(np.mean(errs))


def run_ablate(cfg: RunConfig) -> list:
    """Compare flat versus exact diagonal blocks, a tau sweep and the E = 0 variant.

    Returns dict rows with the ABLATE_HEADER keys.
    """
    rng = np.random.default_rng(cfg.seed)
    rows = []
    with _workers(cfg):
        for shape, bc, q in cfg.cases():
            disc = _discretization(cfg, shape, q)
            M = assembly.assemble_cfie(disc, bc, cfg.eta)
            try:
                f = assembly.plane_wave_rhs(disc, cfg.direction, bc).values
                A = M.array
                variants = [("flat", cfg.tau, {})]
                variants.append(("exact_diagonal", cfg.tau, {"exact_diagonal": lambda a, b, A=A: np.array(A[a:b, a:b])}))
                variants += [("tau_sweep", t, {}) for t in cfg.taus]
                variants.append(("zero_E", cfg.tau, {"zero_E": True}))
                for name, tau, kw in variants:
                    P = _setup_preconditioner(cfg, disc, bc, M.eta, tau=tau, **kw)
                    rep = gmres(M.matvec, f, P.apply, **_solve_options(cfg))
                    rows.append(
                        dict(
                            shape=shape,
                            bc=bc,
                            q=q,
                            variant=name,
                            tau=tau,
                            np=rep.iterations,
                            residual=rep.relative_residual,
                            probe_err=_probe_error(M, P, rng, cfg.probes),
                            converged=rep.converged,
                        )
                    )
                    log.info("ablate %s %s q=%d %s tau=%g: np=%d", shape, bc, q, name, tau, rep.iterations)
            finally:
                M.release()
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATE_HEADER)
            for r in rows:
                w.writerow([r["shape"], r["bc"], r["q"], r["variant"], f"{r['tau']:g}", r["np"],
                            f"{r['residual']:.6e}", f"{r['probe_err']:.6e}"])
    return rows


# --------------------------------------------------------------------------
# command line

_FLAGS = ("shape", "q", "bc", "precond", "out", "seed", "tau", "tol", "restart", "maxit", "p", "eta", "workers")


def _parser():
    ap = argparse.ArgumentParser(prog="dirscatter", description=__doc__.splitlines()[0])
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", help="key = value configuration file")
    for name in _FLAGS:
        ap.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(args):
    over = {name: getattr(args, name) for name in _FLAGS}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}", "--set")
        key, value = (part.strip() for part in item.split("=", 1))
        over[key] = value
    over["mode"] = args.mode
    return over


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if cfg.mode == "solve":
            out = run_solve(cfg)
            for path, rep in out.reports.items():
                print(f"precond={path}: iterations={rep.iterations} residual={rep.relative_residual:.3e}")
            ok = out.converged
        elif cfg.mode == "verify":
            res = run_verify(cfg)
            for path, err in res.errors.items():
                print(f"precond={path}: iterations={res.reports[path].iterations} max relative error={err:.3e}")
            ok = res.converged
        elif cfg.mode == "bench":
            rows = run_bench(cfg)
            sys.stdout.write(bench_csv_text(rows) if not cfg.out else "")
            ok = all(r.converged for r in rows)
        else:
            rows = run_ablate(cfg)
            if not cfg.out:
                for r in rows:
                    print(f"{r['shape']} {r['bc']} q={r['q']} {r['variant']} tau={r['tau']:g}: np={r['np']}")
            ok = all(r["converged"] for r in rows)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not ok:
        print("GMRES did not converge", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK
