"""``zoge-sim``: sweep orchestration for the single-body and many-body experiments.

Every run expands its grids into independent tasks ordered by
(W, U, realization, seed), executes them in a process pool, gathers the
results in that fixed order and writes CSV files plus a JSON manifest into
``<output root>/<run id>``. The run id embeds a hash of the configuration;
finished task results are cached in ``tasks/`` so an interrupted run resumes
without recomputation, and a finished run is never overwritten.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, onebody
from .manybody import (ExactPlan, TrotterPlan, random_sector_state, sector_dimension,
                       state_rng)
from .model import GOLDEN_RATIO, ChainSpec, make_realizations, shift_origin
from .zoge import (default_n_phi, echo_series, ensemble_echo_spectrum, ensemble_polarization,
                   polarization_trace)

log = logging.getLogger("zoge-sim")

EXPERIMENTS = ("onebody-sweep", "zoge", "s2-dynamics", "phase-diagram",
               "fit-critical", "fit-alpha", "ldos")
MANYBODY = ("zoge", "s2-dynamics", "phase-diagram")
OUTPUT_ENV = "ZOGE_SIM_OUTPUT"
EXACT_PLAN_MAX_N = 14

EXIT_OK, EXIT_TASKS, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# --- grids and configuration ------------------------------------------------

def parse_grid(text, field_name: str = "grid") -> tuple[float, ...]:
    """``start:stop:step`` (stop included), a comma list, or a single value."""
    if isinstance(text, (int, float)):
        return (float(text),)
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    text = str(text).strip()
    if not text:
        return ()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ConfigError(field_name, f"expected start:stop:step, got {text!r}")
            start, stop, step = parts
            if step <= 0:
                raise ConfigError(field_name, "step must be > 0")
            if stop < start:
                raise ConfigError(field_name, f"stop {stop} < start {start}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return tuple(round(start + i * step, 12) for i in range(count))
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(field_name, f"cannot parse {text!r}") from None


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines the numbers a run produces.

    ``output`` and ``workers`` are excluded from the run id; they do not change
    results.
    """

    kind: str
    N: int = 13
    W: tuple = (0.0,)
    U: tuple = (0.0,)
    J: float = 1.0
    q: float = GOLDEN_RATIO
    excite: str = "middle"
    realizations: int = 1
    seeds: int = 4
    seed: int = 0
    phases: tuple | None = None
    phase_origin: int = 0
    plan: str = "auto"
    dt: float = 0.01
    t_min: float = 0.5
    t_max: float = 500.0
    t_count: int = 24
    echo_count: int = 24
    n_phi: int | None = None
    ups: int | None = None
    points: int = 2001
    eta: float | None = None
    span: float = 10.0
    smooth: int = 5
    window: tuple = (10.0, 500.0)
    inputs: tuple = ()
    edge_report: bool = False
    output: str = field(default="", compare=False)
    workers: int = field(default=0, compare=False)

    # -- derived values
    @property
    def site(self) -> int:
        e = str(self.excite)
        if e == "middle":
            return self.N // 2
        if e == "left":
            return 0
        if e == "right":
            return self.N - 1
        return int(e)

    @property
    def sector(self) -> int:
        """Up spins after the excitation; (N+1)/2 (M = 1/2) for odd N."""
        return self.ups if self.ups is not None else (self.N + 1) // 2

    def resolved_plan(self) -> str:
        if self.plan != "auto":
            return self.plan
        return "exact" if self.N <= EXACT_PLAN_MAX_N else "trotter"

    def evolution_plan(self):
        return ExactPlan() if self.resolved_plan() in ("exact", "ensemble") else TrotterPlan(self.dt)

    def n_phi_value(self) -> int:
        return self.n_phi if self.n_phi is not None else default_n_phi(self.N)

    def hashed_fields(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.compare:
                v = getattr(self, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @property
    def run_id(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True, default=str).encode()
        return f"{self.kind}-{hashlib.sha256(blob).hexdigest()[:12]}"

    def output_root(self) -> Path:
        return Path(self.output or os.environ.get(OUTPUT_ENV) or "zoge_runs")

    def realization_phases(self) -> tuple[float, ...]:
        base = ChainSpec(self.N, J=self.J, q=self.q)
        if self.phases:
            ph = [shift_origin(p, self.q, self.phase_origin) if self.phase_origin else p
                  for p in self.phases]
            return make_realizations(base, phases=ph).phases
        return make_realizations(base, self.realizations, seed=self.seed).phases

    def spec(self, w: float, u: float, realization: int) -> ChainSpec:
        return ChainSpec(self.N, J=self.J, W=w, U=u, q=self.q,
                         phi=self.realization_phases()[realization])

    @property
    def n_realizations(self) -> int:
        return len(self.phases) if self.phases else self.realizations

    def echo_times(self) -> np.ndarray:
        return np.geomspace(self.t_min, self.t_max, self.echo_count)

    def dense_times(self) -> np.ndarray:
        return np.geomspace(self.t_min, self.t_max, self.t_count)

    def validate(self) -> "RunConfig":
        if self.kind not in EXPERIMENTS:
            raise ConfigError("kind", f"unknown experiment {self.kind!r}")
        if self.kind in ("fit-critical", "fit-alpha"):
            if not self.inputs:
                raise ConfigError("input", "at least one CSV file is required")
            for p in self.inputs:
                if not Path(p).is_file():
                    raise ConfigError("input", f"no such file {p}")
            if self.window[0] >= self.window[1]:
                raise ConfigError("window", "lower end must be below the upper end")
            return self
        if not self.W:
            raise ConfigError("w", "empty grid")
        if not self.U:
            raise ConfigError("u", "empty grid")
        if any(w < 0 for w in self.W):
            raise ConfigError("w", "values must be >= 0")
        if any(u < 0 for u in self.U):
            raise ConfigError("u", "values must be >= 0")
        if len(set(self.W)) != len(self.W) or len(set(self.U)) != len(self.U):
            raise ConfigError("w" if len(set(self.W)) != len(self.W) else "u", "duplicate grid values")
        if self.N < 2:
            raise ConfigError("n", "need at least 2 sites")
        if not self.J > 0:
            raise ConfigError("j", "must be > 0")
        try:
            site = self.site
        except ValueError:
            raise ConfigError("excite", f"expected middle, left, right or a site index, got {self.excite!r}") from None
        if not 0 <= site < self.N:
            raise ConfigError("excite", f"site {site} outside 0..{self.N - 1}")
        if self.phases is None and self.realizations < 1:
            raise ConfigError("realizations", "must be >= 1")
        if self.phases is not None and len(set(self.phases)) != len(self.phases):
            raise ConfigError("phi", "phases must be distinct")
        if self.seeds < 1:
            raise ConfigError("seeds", "must be >= 1")
        if self.kind == "onebody-sweep" and any(u != 0 for u in self.U):
            raise ConfigError("u", "the one-body sweep is defined at U=0 only")
        if self.kind in ("onebody-sweep", "ldos") and self.span <= 0:
            raise ConfigError("span", "must be > 0")
        if self.kind == "ldos" and (self.points < 2 or (self.eta is not None and self.eta <= 0)):
            raise ConfigError("eta" if self.points >= 2 else "points", "invalid LDOS grid")
        if self.kind in MANYBODY:
            if self.N > 20:
                raise ConfigError("n", f"many-body runs support N <= 20, got {self.N}")
            if self.plan not in ("auto", "exact", "trotter", "ensemble"):
                raise ConfigError("plan", f"unknown plan {self.plan!r}")
            if self.resolved_plan() in ("exact", "ensemble") and self.N > 16:
                raise ConfigError("plan", "exact sector propagation is limited to N <= 16")
            if not 0 < self.dt <= 0.05:
                raise ConfigError("dt", "must be in (0, 0.05]")
            if not 1 <= self.sector <= self.N:
                raise ConfigError("ups", f"sector with {self.sector} up spins impossible on {self.N} sites")
            if not 0 < self.t_min < self.t_max:
                raise ConfigError("t_min", "need 0 < t_min < t_max")
            if self.n_phi is not None and (self.n_phi < 1 or self.n_phi % 2 == 0):
                raise ConfigError("n_phi", "must be a positive odd integer")
            if self.kind == "phase-diagram" and self.t_max < 3 * self.N / self.J:
                raise ConfigError("t_max", "equilibrium window needs t_max >= 3 N/J")
        return self


KIND_DEFAULTS = {
    "onebody-sweep": dict(N=201, W=parse_grid("0:2:0.05"), realizations=10, seeds=1),
    "zoge": dict(N=13, W=(1.0,), seeds=4),
    "s2-dynamics": dict(N=13, W=(1.2,), seeds=4, t_min=0.1, t_count=200),
    "phase-diagram": dict(N=13, W=parse_grid("0.5:1.6:0.05"), U=(0.0, 0.02, 0.05, 0.1, 0.2),
                          realizations=5, seeds=4, t_count=101),
    "ldos": dict(N=201, W=(0.5,), seeds=1),
    "fit-critical": {},
    "fit-alpha": {},
}

# config-file key -> (RunConfig field, converter)
_KEYS = {
    "n": ("N", int), "n_sites": ("N", int),
    "w": ("W", lambda v: parse_grid(v, "w")), "u": ("U", lambda v: parse_grid(v, "u")),
    "j": ("J", float), "q": ("q", float), "excite": ("excite", str),
    "realizations": ("realizations", int), "seeds": ("seeds", int), "seed": ("seed", int),
    "phi": ("phases", lambda v: parse_grid(v, "phi")), "phase_origin": ("phase_origin", int),
    "plan": ("plan", str), "dt": ("dt", float), "t_min": ("t_min", float),
    "t_max": ("t_max", float), "t_count": ("t_count", int), "echo_count": ("echo_count", int),
    "n_phi": ("n_phi", int), "ups": ("ups", int), "points": ("points", int),
    "eta": ("eta", float), "span": ("span", float), "smooth": ("smooth", int),
    "window": ("window", lambda v: parse_grid(v, "window")),
    "input": ("inputs", lambda v: tuple(p.strip() for p in str(v).split(",") if p.strip())),
    "edge_report": ("edge_report", lambda v: str(v).lower() in ("1", "true", "yes", "on")),
    "output": ("output", str), "workers": ("workers", int),
}


def make_config(kind: str, values: dict) -> RunConfig:
    """Build a validated config from ``KIND_DEFAULTS`` overlaid with ``values``."""
    if kind not in EXPERIMENTS:
        raise ConfigError("kind", f"unknown experiment {kind!r}")
    merged = dict(KIND_DEFAULTS[kind])
    for key, raw in values.items():
        if raw is None:
            continue
        if key not in _KEYS:
            raise ConfigError(key, "unknown key")
        name, conv = _KEYS[key]
        try:
            merged[name] = conv(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError):
            raise ConfigError(key, f"invalid value {raw!r}") from None
    if "window" in merged and len(merged["window"]) != 2:
        raise ConfigError("window", "expected two values")
    return RunConfig(kind=kind, **merged).validate()


def read_config_file(path) -> list[RunConfig]:
    """One RunConfig per section named after an experiment; ``[defaults]`` is shared."""
    parser = configparser.ConfigParser(default_section="defaults")
    if not parser.read(path):
        raise ConfigError("config", f"cannot read {path}")
    out = []
    for section in parser.sections():
        kind = section.split(":", 1)[0].strip()
        if kind not in EXPERIMENTS:
            raise ConfigError(f"[{section}]", "section must be named after an experiment")
        out.append(make_config(kind, dict(parser[section])))
    if not out:
        raise ConfigError("config", "no experiment sections")
    return out


# --- tasks --------------------------------------------------------------------

def task_keys(cfg: RunConfig) -> list[tuple]:
    """Tasks in the fixed reduction order (W, U, realization, seed)."""
    R = cfg.n_realizations
    if cfg.kind == "onebody-sweep":
        return [(w, 0.0, r, 0) for w in cfg.W for r in range(R)]
    if cfg.kind == "ldos":
        return [(w, 0.0, r, 0) for w in cfg.W for r in range(R)]
    if cfg.kind == "phase-diagram" or cfg.resolved_plan() == "ensemble":
        return [(w, u, r, 0) for w in cfg.W for u in cfg.U for r in range(R)]
    if cfg.kind in MANYBODY:
        return [(w, u, r, s) for w in cfg.W for u in cfg.U for r in range(R)
                for s in range(cfg.seeds)]
    return []


def _key_name(key) -> str:
    w, u, r, s = key
    return f"W{w!r}_U{u!r}_r{r}_s{s}"


def _psi0(cfg: RunConfig, r: int, s: int):
    return random_sector_state(cfg.N, cfg.sector, cfg.site, state_rng(cfg.seed, r, s), packed=True)


def run_task(cfg: RunConfig, key) -> dict:
    w, u, r, s = key
    spec = cfg.spec(w, u, r)
    if cfg.kind == "onebody-sweep":
        sol = onebody.solve(spec)
        out = {"Q0": onebody.equilibrium_ipr(sol, cfg.site, spec.J, span=cfg.span),
               "phi": spec.phi}
        if cfg.edge_report:
            out["edges"] = [dataclasses.astuple(e) for e in onebody.edge_state_report(sol)]
            ipr = onebody.ipr_eigenstates(sol)
            out["eigen"] = [sol.energies.tolist(), ipr.tolist(),
                            (sol.vectors ** 2 @ np.arange(cfg.N)).tolist()]
        return out
    if cfg.kind == "ldos":
        grid, eta = onebody.default_ldos_grid(spec, cfg.points)
        eta = cfg.eta if cfg.eta is not None else eta
        rho = onebody.ldos_decimation(spec, cfg.site, grid, eta)
        return {"E": grid.tolist(), "rho": rho.tolist(), "eta": eta, "phi": spec.phi}
    if cfg.kind == "phase-diagram":
        T = cfg.t_max
        times = np.linspace(T / 2, T, cfg.t_count)
        values = []
        for seed in range(cfg.seeds):
            if cfg.resolved_plan() == "ensemble":
                if seed:
                    break
                trace = ensemble_polarization(spec, cfg.sector, cfg.site, times)
            else:
                trace = polarization_trace(spec, _psi0(cfg, r, seed), times, cfg.evolution_plan())
            m, _ = analysis.time_average_equilibrium(times, [p.S2 for p in trace],
                                                     traversal_time=cfg.N / cfg.J)
            values.append(m)
        return {"S2": values}
    if cfg.kind in ("zoge", "s2-dynamics"):
        out = {}
        ens = cfg.resolved_plan() == "ensemble"
        if cfg.kind == "s2-dynamics":
            times = cfg.dense_times()
            if ens:
                trace = ensemble_polarization(spec, cfg.sector, cfg.site, times)
            else:
                trace = polarization_trace(spec, _psi0(cfg, r, s), times, cfg.evolution_plan())
            out["t"] = times.tolist()
            out["p"] = [p.p.tolist() for p in trace]
        et = cfg.echo_times()
        if ens:
            recs = [ensemble_echo_spectrum(spec, cfg.sector, cfg.site, t, cfg.n_phi_value()) for t in et]
        else:
            recs = echo_series(spec, _psi0(cfg, r, s), et, cfg.n_phi_value(), cfg.evolution_plan())
        out["echo_t"] = et.tolist()
        out["n"] = recs[0].n.tolist()
        out["Q"] = [rec.Q.tolist() for rec in recs]
        out["imag"] = [rec.imag_residual for rec in recs]
        out["alias"] = [rec.alias_mass for rec in recs]
        return out
    raise ConfigError("kind", f"{cfg.kind} has no tasks")


def _worker(payload):
    cfg, key = payload
    t0 = time.perf_counter()
    try:
        return key, run_task(cfg, key), None, time.perf_counter() - t0
    except Exception:  # reported per task, the run continues
        return key, None, traceback.format_exc(), time.perf_counter() - t0


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def execute(cfg: RunConfig, run_dir: Path, workers: int) -> tuple[dict, dict, dict]:
    """Run (or load from cache) every task; return results, errors and timings by key."""
    cache = run_dir / "tasks"
    cache.mkdir(parents=True, exist_ok=True)
    keys = task_keys(cfg)
    results, errors, timings = {}, {}, {}
    pending = []
    for key in keys:
        f = cache / f"{_key_name(key)}.json"
        if f.exists():
            results[key] = json.loads(f.read_text())
        else:
            pending.append(key)
    if pending:
        log.info("%s: %d tasks (%d cached)", cfg.run_id, len(keys), len(keys) - len(pending))

    def collect(item):
        key, res, err, dt = item
        timings[key] = dt
        if err is not None:
            errors[key] = err
            return
        results[key] = res
        _atomic_write(cache / f"{_key_name(key)}.json", json.dumps(res))

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for item in ex.map(_worker, [(cfg, k) for k in pending]):
                collect(item)
    else:
        for k in pending:
            collect(_worker((cfg, k)))
    return results, errors, timings


# --- reduction and output -----------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    """Write once; an existing file is left untouched."""
    if path.exists():
        return path
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)
    return path


def _mean_err(samples) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(samples, dtype=float)
    if a.shape[0] < 2:
        return a.mean(axis=0), np.zeros(a.shape[1:])
    return a.mean(axis=0), a.std(axis=0, ddof=1) / math.sqrt(a.shape[0])


def bounds_row(u, b: analysis.CriticalBounds):
    return [u, b.w_lower, b.w_upper, b.err_lower, b.err_upper, b.argmax_lower, b.argmax_upper, b.found]


BOUNDS_HEADER = ["U", "w_lower", "w_upper", "err_lower", "err_upper",
                 "argmax_lower", "argmax_upper", "converged"]


def _bounds(W, y, smooth) -> analysis.CriticalBounds:
    if len(W) < 7:
        return analysis.CriticalBounds.none("grid too short")
    return analysis.critical_bounds(np.asarray(W), np.asarray(y), smooth_window=smooth or None)


def reduce_run(cfg: RunConfig, results: dict, run_dir: Path, plot: bool) -> list[Path]:
    rid = cfg.run_id
    files = []
    R = cfg.n_realizations
    if cfg.kind == "onebody-sweep":
        rows, summary = [], []
        for w in cfg.W:
            vals = []
            for r in range(R):
                res = results[(w, 0.0, r, 0)]
                rows.append([w, res["Q0"], r, res["phi"]])
                vals.append(res["Q0"])
            m, e = _mean_err(np.array(vals)[:, None])
            summary.append([w, m[0], e[0], R])
        files.append(write_csv(run_dir / f"onebody_{rid}.csv",
                               ["W", "time_averaged_Q0", "realization", "phi"], rows))
        files.append(write_csv(run_dir / f"sweep_{rid}.csv",
                               ["W", "Q0_mean", "Q0_err", "realizations"], summary))
        W = [s[0] for s in summary]
        b = _bounds(W, [s[1] for s in summary], cfg.smooth)
        files.append(write_csv(run_dir / "critical_bounds.csv", BOUNDS_HEADER, [bounds_row(0.0, b)]))
        if cfg.edge_report:
            for w in cfg.W:
                for r in range(R):
                    E, ipr, center = results[(w, 0.0, r, 0)]["eigen"]
                    edges = {e[0]: e[4] for e in results[(w, 0.0, r, 0)]["edges"]}
                    files.append(write_csv(
                        run_dir / f"eigen_{rid}_W{w!r}_r{r}.csv",
                        ["k", "energy", "ipr_k", "center", "edge_flag"],
                        [[k, E[k], ipr[k], center[k], edges.get(k, False)] for k in range(len(E))]))
        if plot:
            from . import plotting
            files.append(plotting.plot_sweep(W, [s[1] for s in summary], [s[2] for s in summary],
                                             run_dir / f"sweep_{rid}.png", bounds=b))
        return files

    if cfg.kind == "ldos":
        rows = []
        for w in cfg.W:
            for r in range(R):
                res = results[(w, 0.0, r, 0)]
                rows += [[w, r, e, rho] for e, rho in zip(res["E"], res["rho"])]
        files.append(write_csv(run_dir / f"ldos_{rid}.csv", ["W", "realization", "E", "rho"], rows))
        if plot:
            from . import plotting
            res = results[(cfg.W[0], 0.0, 0, 0)]
            files.append(plotting.plot_ldos(res["E"], res["rho"], run_dir / f"ldos_{rid}.png", cfg.site))
        return files

    if cfg.kind == "phase-diagram":
        S2 = np.full((len(cfg.U), len(cfg.W)), np.nan)
        err = np.full_like(S2, np.nan)
        for i, w in enumerate(cfg.W):
            for j, u in enumerate(cfg.U):
                per_r = [results[(w, u, r, 0)]["S2"] for r in range(R)]
                real_means = [float(np.mean(v)) for v in per_r]
                m, e = _mean_err(np.array(real_means)[:, None])
                S2[j, i], err[j, i] = m[0], e[0]
        pd = analysis.phase_diagram(cfg.W, cfg.U, S2, err, smooth_window=cfg.smooth or None)
        files.append(write_csv(run_dir / "phase_diagram.csv", ["W", "U", "S2_mean", "S2_err"], pd.rows()))
        files.append(write_csv(run_dir / "contour.csv", ["U", "W_contour", "level", "partial"],
                               [[u, c, pd.level, pd.partial] for u, c in zip(cfg.U, pd.contour)]))
        files.append(write_csv(run_dir / "critical_bounds.csv", BOUNDS_HEADER,
                               [bounds_row(u, b) for u, b in zip(cfg.U, pd.bounds)]))
        if plot:
            from . import plotting
            files.append(plotting.plot_phase_diagram(cfg.W, cfg.U, S2, run_dir / f"phase_diagram_{rid}.png",
                                                     pd.contour))
        return files

    # zoge / s2-dynamics
    seeds = 1 if cfg.resolved_plan() == "ensemble" else cfg.seeds
    zrows, srows = [], []
    plots = {}
    for w in cfg.W:
        for u in cfg.U:
            group = [results[(w, u, r, s)] for r in range(R) for s in range(seeds)]
            n = group[0]["n"]
            Qm, Qe = _mean_err([g["Q"] for g in group])
            imag = np.max([g["imag"] for g in group], axis=0)
            for i, t in enumerate(group[0]["echo_t"]):
                for k, nn in enumerate(n):
                    zrows.append([w, u, t, nn, Qm[i, k], Qe[i, k], imag[i]])
            q0 = Qm[:, n.index(0)]
            if cfg.kind == "s2-dynamics":
                P = np.array([g["p"] for g in group])
                pm = P.mean(axis=0)
                S2 = (P ** 2).sum(axis=2)
                P00 = P[:, :, cfg.site]
                s2m, s2e = _mean_err(S2)
                p0m, p0e = _mean_err(P00)
                for i, t in enumerate(group[0]["t"]):
                    srows.append([w, u, t, s2m[i], p0m[i], *pm[i], s2e[i], p0e[i]])
                plots[(w, u)] = (group[0]["t"], s2m, p0m, group[0]["echo_t"], q0)
    files.append(write_csv(run_dir / f"zoge_{rid}.csv",
                           ["W", "U", "t", "n", "Q_n", "Q_err", "imag_residual"], zrows))
    if cfg.kind == "s2-dynamics":
        header = ["W", "U", "t", "S2", "P00"] + [f"p_{i}" for i in range(cfg.N)] + ["S2_err", "P00_err"]
        files.append(write_csv(run_dir / f"s2_{rid}.csv", header, srows))
    if plot:
        from . import plotting
        w, u = cfg.W[0], cfg.U[0]
        group = [results[(w, u, r, s)] for r in range(R) for s in range(seeds)]
        Qm, _ = _mean_err([g["Q"] for g in group])
        files.append(plotting.plot_spectrum(group[0]["echo_t"], group[0]["n"], Qm,
                                            run_dir / f"zoge_{rid}.png"))
        for (w, u), (t, s2, p00, et, q0) in plots.items():
            files.append(plotting.plot_dynamics(t, {"$S^2$": s2, "$P_{00}$": p00},
                                                run_dir / f"s2_{rid}_W{w!r}_U{u!r}.png"))
    return files


# --- fitting subcommands --------------------------------------------------------

def _read_table(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError("input", f"{path} has no data rows")
    header = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return {h: data[:, i] for i, h in enumerate(header)}


def fit_critical(cfg: RunConfig, run_dir: Path, plot: bool) -> list[Path]:
    rows = []
    for path in cfg.inputs:
        tab = _read_table(path)
        ycol = next((c for c in ("Q0_mean", "S2_mean", "time_averaged_Q0") if c in tab), None)
        if ycol is None or "W" not in tab:
            raise ConfigError("input", f"{path} needs a W column and Q0_mean or S2_mean")
        U = tab.get("U", np.zeros_like(tab["W"]))
        for u in np.unique(U):
            sel = U == u
            W = tab["W"][sel]
            # a per-realization table is averaged first
            Wu = np.unique(W)
            y = np.array([tab[ycol][sel][W == w].mean() for w in Wu])
            rows.append(bounds_row(float(u), _bounds(Wu, y, cfg.smooth)))
    return [write_csv(run_dir / "critical_bounds.csv", BOUNDS_HEADER, rows)]


def fit_alpha(cfg: RunConfig, run_dir: Path, plot: bool) -> list[Path]:
    rows = []
    for path in cfg.inputs:
        tab = _read_table(path)
        if not {"t", "S2", "P00"} <= set(tab):
            raise ConfigError("input", f"{path} needs t, S2 and P00 columns")
        W = tab.get("W", np.zeros_like(tab["t"]))
        U = tab.get("U", np.zeros_like(tab["t"]))
        for u in np.unique(U):
            for w in np.unique(W[U == u]):
                sel = (U == u) & (W == w)
                t = tab["t"][sel]
                fs = analysis.fit_power_law(t, tab["S2"][sel], tuple(cfg.window))
                fp = analysis.fit_power_law(t, tab["P00"][sel], tuple(cfg.window))
                spread = lambda f: max((abs(a - f.alpha) for a in f.sensitivity.values()), default=float("nan"))
                rows.append([float(u), float(w), fs.alpha, fp.alpha, fs.stderr, fp.stderr,
                             spread(fs), spread(fp), fs.fractal_dimension, fp.fractal_dimension])
    header = ["U", "W", "alpha_S2", "alpha_P00", "err_S2", "err_P00",
              "window_shift_S2", "window_shift_P00", "dstar_S2", "dstar_P00"]
    return [write_csv(run_dir / "alpha.csv", header, rows)]


# --- cost estimate ----------------------------------------------------------------

def estimate_cost(cfg: RunConfig, calibrate: bool = True) -> dict:
    """Task count, evolution count and a calibration-scaled wall-time estimate."""
    keys = task_keys(cfg)
    info = {"kind": cfg.kind, "tasks": len(keys), "workers": cfg.workers or os.cpu_count() or 1}
    per_task = 0.0
    if cfg.kind in ("onebody-sweep", "ldos"):
        if calibrate and keys:
            t0 = time.perf_counter()
            run_task(cfg, keys[0])
            per_task = time.perf_counter() - t0
    elif cfg.kind in MANYBODY:
        D = sector_dimension(cfg.N, cfg.sector)
        n_phi = cfg.n_phi_value()
        seeds_in_task = cfg.seeds if cfg.kind == "phase-diagram" else 1
        echo = cfg.kind in ("zoge", "s2-dynamics")
        n_echo = cfg.echo_count if echo else 0
        per_spec = cfg.seeds * cfg.n_realizations * len(cfg.W) * len(cfg.U)
        info["sector_dimension"] = D
        info["evolutions"] = n_echo * n_phi * per_spec * 2 if echo else per_spec
        info["evolutions_formula"] = (f"{n_echo}*{n_phi}*{cfg.seeds}*2" if echo and cfg.n_realizations == 1
                                      and len(cfg.W) * len(cfg.U) == 1 else None)
        if calibrate:
            per_task = _calibrate_manybody(cfg, D, n_phi, n_echo, seeds_in_task)
    info["per_task_seconds"] = per_task
    info["total_seconds"] = per_task * len(keys) / max(1, min(info["workers"], len(keys) or 1))
    return info


def _calibrate_manybody(cfg, D, n_phi, n_echo, seeds_in_task) -> float:
    rng = np.random.default_rng(0)
    if cfg.resolved_plan() in ("exact", "ensemble"):
        d0 = min(D, 400)
        a = rng.standard_normal((d0, d0))
        t0 = time.perf_counter()
        np.linalg.eigh(a + a.T)
        diag = (time.perf_counter() - t0) * (D / d0) ** 3
        b = rng.standard_normal((d0, n_phi)) + 0j
        t0 = time.perf_counter()
        a @ b
        mat = (time.perf_counter() - t0) * (D / d0) ** 2 * 4
        return diag + seeds_in_task * n_echo * mat
    from .manybody import _trotter
    N0 = min(cfg.N, 12)
    amp = np.zeros(1 << N0, dtype=complex)
    amp[0] = 1
    spec = ChainSpec(N0, W=1.0, U=0.1)
    plan = TrotterPlan(cfg.dt)
    steps = 20
    t0 = time.perf_counter()
    _trotter(amp, spec, steps * cfg.dt, plan, 1.0)
    per_step = (time.perf_counter() - t0) / steps * 2 ** (cfg.N - N0) * (cfg.N - 1) / (N0 - 1)
    fwd = cfg.t_max / cfg.dt
    back = n_phi * float(np.sum(cfg.echo_times())) / cfg.dt if n_echo else 0.0
    return seeds_in_task * per_step * (fwd + back)


# --- driver -----------------------------------------------------------------------

def _manifest(cfg: RunConfig, files, timings: dict, wall: float) -> dict:
    import scipy
    return {
        "run_id": cfg.run_id,
        "kind": cfg.kind,
        "config": cfg.hashed_fields(),
        "seeds": {"base_seed": cfg.seed, "seeds_per_realization": cfg.seeds,
                  "phases": list(cfg.realization_phases()) if cfg.kind not in ("fit-critical", "fit-alpha") else []},
        "plan": cfg.resolved_plan() if cfg.kind in MANYBODY else None,
        "n_phi": cfg.n_phi_value() if cfg.kind in ("zoge", "s2-dynamics") else None,
        "p_normalization": "p_n = (<Sz_n> - b) / (1/2 - b), b the background polarization",
        "files": [Path(f).name for f in files],
        "timings": {"wall_seconds": wall, "task_seconds": {_key_name(k): v for k, v in timings.items()}},
        "code_version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def run(cfg: RunConfig, workers: int | None = None, plot: bool = False) -> int:
    """Execute one configured experiment; returns the process exit status."""
    t0 = time.perf_counter()
    run_dir = cfg.output_root() / cfg.run_id
    if (run_dir / "manifest.json").exists():
        print(f"{cfg.run_id}: already complete in {run_dir}")
        return EXIT_OK
    run_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or cfg.workers or os.cpu_count() or 1
    timings: dict = {}
    if cfg.kind == "fit-critical":
        files = fit_critical(cfg, run_dir, plot)
    elif cfg.kind == "fit-alpha":
        files = fit_alpha(cfg, run_dir, plot)
    else:
        results, errors, timings = execute(cfg, run_dir, workers)
        if errors:
            with open(run_dir / "errors.log", "a") as fh:
                for key, tb in errors.items():
                    fh.write(f"--- {_key_name(key)}\n{tb}\n")
            print(f"{cfg.run_id}: {len(errors)} of {len(task_keys(cfg))} tasks failed; "
                  f"see {run_dir / 'errors.log'}", file=sys.stderr)
            return EXIT_TASKS
        files = reduce_run(cfg, results, run_dir, plot)
    manifest = _manifest(cfg, files, timings, time.perf_counter() - t0)
    _atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=2, default=str))
    print(f"{cfg.run_id}: wrote {len(files)} files to {run_dir}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, kind: str) -> None:
    p.add_argument("--config", help="INI file; the section named after the experiment supplies defaults")
    p.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./zoge_runs)")
    p.add_argument("--workers", type=int, help="process pool size (default: all cores)")
    p.add_argument("--plot", action="store_true", help="also render PNG figures")
    if kind in ("fit-critical", "fit-alpha"):
        p.add_argument("--input", action="append", help="input CSV (repeatable)")
        p.add_argument("--smooth", type=int, help="Savitzky-Golay window for derivatives (0: none)")
        p.add_argument("--window", help="power-law fit window tmin,tmax")
        return
    p.add_argument("--n", type=int, help="number of sites")
    p.add_argument("--w", help="disorder grid, start:stop:step or a,b,c")
    p.add_argument("--j", type=float)
    p.add_argument("--q", type=float, help="incommensuration ratio (default golden ratio)")
    p.add_argument("--excite", help="middle, left, right or a site index")
    p.add_argument("--realizations", type=int)
    p.add_argument("--phi", help="explicit phases instead of random realizations")
    p.add_argument("--phase-origin", type=int, help="label of the first site the --phi values refer to")
    p.add_argument("--seed", type=int)
    if kind in ("onebody-sweep", "ldos"):
        p.add_argument("--span", type=float, help="equilibrium window end in units of N/J")
        p.add_argument("--points", type=int, help="LDOS energy grid size")
        p.add_argument("--eta", type=float, help="LDOS broadening")
        p.add_argument("--smooth", type=int)
        p.add_argument("--edge-report", action="store_const", const="true")
        return
    p.add_argument("--u", help="interaction grid")
    p.add_argument("--seeds", type=int, help="random states per realization")
    p.add_argument("--ups", type=int, help="up spins including the excitation (default (N+1)/2)")
    p.add_argument("--plan", choices=["auto", "exact", "trotter", "ensemble"])
    p.add_argument("--dt", type=float)
    p.add_argument("--t-min", type=float)
    p.add_argument("--t-max", type=float)
    p.add_argument("--t-count", type=int, help="dense time samples")
    p.add_argument("--echo-count", type=int, help="echo time samples")
    p.add_argument("--n-phi", type=int)
    p.add_argument("--smooth", type=int)


_NOT_CONFIG = {"config", "command", "kind", "plot", "verbose"}


def _values_from_args(args) -> dict:
    vals = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if vals.get("input"):
        vals["input"] = ",".join(vals["input"])
    return vals


def _config_from_args(kind: str, args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser(default_section="defaults")
        if not parser.read(args.config):
            raise ConfigError("config", f"cannot read {args.config}")
        if parser.has_section(kind):
            values.update(parser[kind])
        else:
            values.update(parser.defaults())
    values.update({k: v for k, v in _values_from_args(args).items() if v is not None})
    return make_config(kind, values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zoge-sim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENTS:
        _add_common(sub.add_parser(kind), kind)
    est = sub.add_parser("estimate", help="print task decomposition and predicted wall time")
    est_sub = est.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENTS:
        if kind not in ("fit-critical", "fit-alpha"):
            _add_common(est_sub.add_parser(kind), kind)
    cfg = sub.add_parser("run", help="run every experiment section of an INI file")
    cfg.add_argument("config_file")
    cfg.add_argument("--workers", type=int)
    cfg.add_argument("--plot", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            configs = read_config_file(args.config_file)
            status = EXIT_OK
            for cfg in configs:
                status = max(status, run(cfg, args.workers, args.plot))
            return status
        if args.command == "estimate":
            cfg = _config_from_args(args.kind, args)
            info = estimate_cost(cfg)
            for k, v in info.items():
                if v is not None:
                    print(f"{k}: {v:.3g}" if isinstance(v, float) else f"{k}: {v}")
            return EXIT_OK
        cfg = _config_from_args(args.command, args)
        return run(cfg, args.workers, args.plot)
    except ConfigError as exc:
        print(f"zoge-sim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
