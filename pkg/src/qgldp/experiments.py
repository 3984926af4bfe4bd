"""Monte Carlo, importance sampling and the numerical studies.

Ensembles are split into fixed blocks of trajectory ids. Each block depends
only on its ids (the noise is a pure function of seed, id and step), blocks
are concatenated in id order, and every statistic is reduced from the full
per-path arrays. Results are therefore identical for any worker count.
"""

from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from statistics import NormalDist

import numpy as np

from . import __version__
from . import spectral as sp
from .action import ControlPath, LevelTarget, MinimizerReport
from .model import ModelParams, NumericalInstability, QGModel
from .noise import NoiseSpec, validate_assumptions
from .rng import Stream
from .spectral import GridSpec

__all__ = [
    "Setup",
    "EventSpec",
    "Estimate",
    "StudyReport",
    "run_ensemble",
    "mc_probability",
    "is_probability",
    "ldp_scaling_study",
    "weak_convergence_study",
    "time_increment_study",
    "energy_bound_study",
    "run_suite",
    "SUITES",
    "random_field",
]

Z95 = NormalDist().inv_cdf(0.975)
BLOCK = 2000


# --- configuration ----------------------------------------------------------


@dataclass
class Setup:
    """Everything needed to simulate an ensemble of stochastic paths."""

    model: QGModel
    noise: NoiseSpec
    xi: np.ndarray
    T: float
    n_steps: int
    seed: int = 0
    stream: str = "noise"

    def __post_init__(self):
        self.xi = self.model.grid.check(np.asarray(self.xi, dtype=float))
        if not self.T > 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")

    @property
    def grid(self) -> GridSpec:
        return self.model.grid

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def basis(self):
        return self.noise.basis(self.grid)

    def per_step(self, h: ControlPath | None) -> np.ndarray | None:
        """Control averaged over each simulation step, ``(n_steps, 2, m)``."""
        if h is None:
            return None
        if not math.isclose(h.T, self.T, rel_tol=1e-12):
            raise ValueError(f"control horizon {h.T} differs from T={self.T}")
        if h.values.shape[-1] != self.basis.m:
            raise ValueError("control does not match the retained noise modes")
        if h.n_t == self.n_steps + 1:
            return h.midpoints()
        t = np.linspace(0.0, self.T, self.n_steps + 1)
        flat = h.values.reshape(h.n_t, -1)
        nodes = np.stack([np.interp(t, h.times, flat[:, j]) for j in range(flat.shape[1])], axis=1)
        nodes = nodes.reshape((self.n_steps + 1,) + h.values.shape[1:])
        return 0.5 * (nodes[1:] + nodes[:-1])


@dataclass(frozen=True)
class EventSpec:
    """``{observable >= tau}`` or ``{observable <= tau}``."""

    observable: object
    tau: float
    direction: str = ">="

    def __post_init__(self):
        if self.direction not in (">=", "<="):
            raise ValueError("direction must be '>=' or '<='")

    def occurs(self, values) -> np.ndarray:
        values = np.asarray(values)
        return values >= self.tau if self.direction == ">=" else values <= self.tau

    def target(self) -> LevelTarget:
        return LevelTarget(self.observable, self.tau, self.direction)


# --- ensemble engine --------------------------------------------------------


def _paths(setup: Setup, eps: float, ids, hbar=None, shift=None):
    """Step a batch of paths; yields ``(step, q, Z)`` after every step.

    ``hbar`` is a controlled drift ``sigma_tilde(q) h dt``; ``shift`` adds
    ``shift * dt / sqrt(eps)`` to the noise (a change of measure).
    """
    model, basis = setup.model, setup.basis
    stream = Stream(setup.seed, setup.stream)
    dt = setup.dt
    root = math.sqrt(eps)
    std = np.sqrt(basis.eig * dt)
    q = np.broadcast_to(setup.xi, (len(ids),) + setup.xi.shape).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(setup.n_steps):
            Z = None
            kick = None
            if eps > 0:
                Z = std * stream.normals(ids, n, 2 * basis.m).reshape(-1, 2, basis.m)
                dW = Z if shift is None else Z + shift[n] * (dt / root)
                kick = root * basis.apply(q, dW)
            extra = None
            if hbar is not None and np.any(hbar[n] != 0):
                def extra(x, hn=hbar[n]):
                    return basis.apply(x, hn, tilde=True)
            q = model.advance(q, dt, extra=extra, kick=kick)
            if not np.all(np.isfinite(q)):
                raise NumericalInstability(n + 1)
            yield n, q, Z


class _XNormAccumulator:
    """Online ``sup ||d||^2 + weight * int sup_{s<=t} ||grad d||^2`` (trapezoid)."""

    def __init__(self, grid, d0, dt, weight=1.0, running_sup=True):
        self.grid, self.dt, self.weight, self.running_sup = grid, dt, weight, running_sup
        q2, g2 = self._sq(d0)
        self.sup = q2
        self.gsup = g2
        self.prev = g2
        self.integral = np.zeros_like(g2)

    def _sq(self, d):
        return sp.l2_sq(self.grid, d).sum(-1), sp.grad_sq(self.grid, d).sum(-1)

    def update(self, d):
        q2, g2 = self._sq(d)
        self.sup = np.maximum(self.sup, q2)
        cur = np.maximum(self.gsup, g2) if self.running_sup else g2
        self.integral = self.integral + 0.5 * self.dt * (self.prev + cur)
        self.gsup = np.maximum(self.gsup, g2)
        self.prev = cur

    def value(self):
        return self.sup + self.weight * self.integral


@dataclass
class _EventTask:
    setup: Setup
    eps: float
    event: EventSpec
    shift: np.ndarray | None = None

    def __call__(self, ids):
        s = self.setup
        obs = self.event.observable
        grid, basis = s.grid, s.basis
        running = getattr(obs, "reduce", "terminal") == "max"
        best = obs.sample(np.broadcast_to(s.xi, (len(ids),) + s.xi.shape), grid) if running else None
        logw = np.zeros(len(ids))
        root = math.sqrt(self.eps)
        inv = basis.inv_eig
        q = None
        for n, q, Z in _paths(s, self.eps, ids, shift=self.shift):
            if running:
                best = np.maximum(best, obs.sample(q, grid))
            if self.shift is not None:
                h = self.shift[n]
                logw -= np.sum(h * inv * Z, axis=(-2, -1)) / root
                logw -= 0.5 * s.dt * float(np.sum(h * h * inv)) / self.eps
        values = best if running else obs.sample(q, grid)
        return {"value": np.asarray(values, dtype=float), "logw": logw}


def _run_block(args):
    task, ids = args
    return task(ids)


def run_ensemble(task, n_paths: int, workers: int = 1, block: int = BLOCK) -> dict:
    """Evaluate ``task`` on trajectory ids ``0..n_paths-1`` in fixed blocks."""
    chunks = [np.arange(a, min(a + block, n_paths)) for a in range(0, n_paths, block)]
    if workers <= 1 or len(chunks) == 1:
        parts = [task(ids) for ids in chunks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks)), mp_context=get_context("spawn")) as pool:
            parts = list(pool.map(_run_block, [(task, ids) for ids in chunks]))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# --- probability estimators ------------------------------------------------


@dataclass
class Estimate:
    p: float
    lo: float
    hi: float
    n_paths: int
    hits: int
    method: str
    variance: float
    ess: float
    floor: bool = False
    seed: int = 0
    stream: str = "noise"

    @property
    def ci(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def overlaps(self, other: "Estimate") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi


def _wilson(hits: int, n: int) -> tuple[float, float]:
    p = hits / n
    z2 = Z95**2
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    half = Z95 * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n)
    return max(0.0, centre - half), min(1.0, centre + half)


def mc_probability(event: EventSpec, eps: float, n_paths: int, setup: Setup, workers: int = 1) -> Estimate:
    """Crude Monte Carlo with a Wilson interval.

    With no hits the estimate is 0 with the one-sided 95% upper bound
    ``1 - 0.05^(1/n)`` and the resolution-floor flag set.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    out = run_ensemble(_EventTask(setup, eps, event), n_paths, workers)
    hit = event.occurs(out["value"])
    hits = int(hit.sum())
    p = hits / n_paths
    if hits == 0:
        lo, hi = 0.0, 1.0 - 0.05 ** (1.0 / n_paths)
    else:
        lo, hi = _wilson(hits, n_paths)
    return Estimate(p, lo, hi, n_paths, hits, "mc", p * (1 - p), float(n_paths), hits == 0, setup.seed, setup.stream)


def is_probability(event: EventSpec, eps: float, n_paths: int, shift: ControlPath | None, setup: Setup, workers: int = 1) -> Estimate:
    """Importance sampling with the noise shifted by ``h dt / sqrt(eps)``.

    Log-weights are accumulated per path; the interval is normal-theory and
    the effective sample size of the hitting paths is reported.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    if not eps > 0:
        raise ValueError("importance sampling needs eps > 0")
    hbar = setup.per_step(shift)
    if hbar is not None:
        outside = np.any(hbar[..., ~setup.basis.mask] != 0)
        if outside:
            raise ValueError("shift has support outside the retained noise modes")
    out = run_ensemble(_EventTask(setup, eps, event, hbar), n_paths, workers)
    hit = event.occurs(out["value"])
    hits = int(hit.sum())
    logw = np.where(hit, out["logw"], -np.inf)
    top = float(logw.max()) if hits else 0.0
    scaled = np.exp(logw - top) if hits else np.zeros(n_paths)
    p = float(np.exp(top) * scaled.mean()) if hits else 0.0
    var = float(np.exp(2 * top) * scaled.var(ddof=1)) if hits else 0.0
    se = math.sqrt(var / n_paths)
    ess = float(scaled.sum() ** 2 / np.sum(scaled**2)) if hits else 0.0
    if hits == 0:
        lo, hi = 0.0, 1.0 - 0.05 ** (1.0 / n_paths)
    else:
        lo, hi = max(0.0, p - Z95 * se), p + Z95 * se
    return Estimate(p, lo, hi, n_paths, hits, "is", var, ess, hits == 0, setup.seed, setup.stream)


# --- study reports ----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(__file__), capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class StudyReport:
    name: str
    params: dict
    rows: list
    passed: bool
    runtime: float = 0.0
    seeds: dict = field(default_factory=dict)
    failing_seeds: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        cols = list(self.rows[0]) if self.rows else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in cols])

    def manifest(self) -> dict:
        return {
            "study": self.name,
            "params": self.params,
            "seeds": self.seeds,
            "passed": self.passed,
            "failing_seeds": self.failing_seeds,
            "flags": self.flags,
            "version": __version__,
            "git_describe": _git_describe(),
            "wall_time": self.runtime,
        }

    def write(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        self.write_csv(os.path.join(outdir, f"{self.name}.csv"))
        with open(os.path.join(outdir, f"{self.name}_manifest.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=2, default=_fmt)


def _seeds(setup: Setup) -> dict:
    return {"seed": setup.seed, "stream": setup.stream}


# --- studies -----------------------------------------------------------------


def ldp_scaling_study(
    event: EventSpec,
    eps_grid,
    report: MinimizerReport,
    setup: Setup,
    n_paths: int,
    method: str = "is",
    tol: float | None = None,
    workers: int = 1,
) -> StudyReport:
    """``-eps log p(eps)`` against the certified minimum action ``I*``.

    Passes when the gap to ``I*`` shrinks monotonically along the decreasing
    ``eps_grid`` (and, with ``tol``, the last relative gap is within ``tol``).
    """
    t0 = time.perf_counter()
    eps_grid = [float(e) for e in eps_grid]
    if any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps grid must be strictly decreasing")
    if method not in ("is", "mc"):
        raise ValueError("method must be 'is' or 'mc'")
    I_star = report.action
    rows, flags = [], []
    for eps in eps_grid:
        if method == "is":
            est = is_probability(event, eps, n_paths, report.control, setup, workers)
        else:
            est = mc_probability(event, eps, n_paths, setup, workers)
        rate = -eps * math.log(est.p) if est.p > 0 else math.inf
        gap = abs(rate - I_star) / I_star if I_star > 0 else abs(rate)
        if est.floor:
            flags.append(f"resolution floor at eps={eps}")
        rows.append({
            "eps": eps, "p": est.p, "ci_lo": est.lo, "ci_hi": est.hi, "hits": est.hits,
            "n_paths": n_paths, "ess": est.ess, "rate": rate, "I_star": I_star, "gap": gap,
            "floor": est.floor,
        })
    resolved = [r for r in rows if not r["floor"]]
    gaps = [r["gap"] for r in resolved]
    passed = len(gaps) >= 2 and all(b < a for a, b in zip(gaps, gaps[1:]))
    if tol is not None:
        passed = passed and bool(resolved) and resolved[-1]["gap"] <= tol
    params = {"eps_grid": eps_grid, "n_paths": n_paths, "method": method, "tau": event.tau, "tol": tol}
    return StudyReport("ldp_scaling", params, rows, passed, time.perf_counter() - t0, _seeds(setup), flags=flags)


@dataclass
class _DistanceTask:
    setup: Setup
    eps: float
    hbar: np.ndarray | None
    reference: np.ndarray
    running_sup: bool = True

    def __call__(self, ids):
        s = self.setup
        acc = _XNormAccumulator(s.grid, np.zeros((len(ids), 2) + s.grid.shape), s.dt, running_sup=self.running_sup)
        for n, q, _ in _paths(s, self.eps, ids, hbar=self.hbar):
            acc.update(q - self.reference[n + 1])
        return {"dist2": acc.value()}


def _loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def weak_convergence_study(
    h: ControlPath | None,
    eps_grid,
    setup: Setup,
    n_paths: int,
    workers: int = 1,
    conventional: bool = False,
) -> StudyReport:
    """Mean squared X-distance between the controlled SDE and its skeleton.

    Every eps uses the same noise stream (coupled paths). Additive noise
    passes when the log-log slope in eps lies in [0.8, 1.2]; otherwise the
    distance only has to decrease with eps.
    """
    t0 = time.perf_counter()
    eps_grid = [float(e) for e in eps_grid]
    hbar = setup.per_step(h)
    ref = run_ensemble(_ReferenceTask(setup, hbar), 1)["traj"][0]
    rows = []
    for eps in eps_grid:
        out = run_ensemble(_DistanceTask(setup, eps, hbar, ref, not conventional), n_paths, workers)
        d = out["dist2"]
        rows.append({
            "eps": eps, "mean_dist2": float(d.mean()),
            "stderr": float(d.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0,
            "n_paths": n_paths,
        })
    positive = [(r["eps"], r["mean_dist2"]) for r in rows if r["eps"] > 0]
    slope = _loglog_slope(*zip(*positive)) if len(positive) >= 2 else math.nan
    by_eps = sorted(rows, key=lambda r: r["eps"])
    monotone = all(a["mean_dist2"] <= b["mean_dist2"] for a, b in zip(by_eps, by_eps[1:]))
    if setup.noise.kind == "additive" and len(positive) >= 2:
        passed = 0.8 <= slope <= 1.2
    else:
        passed = monotone
    for r in rows:
        r["slope"] = slope
    params = {"eps_grid": eps_grid, "n_paths": n_paths, "kind": setup.noise.kind, "conventional": conventional}
    return StudyReport("weak_convergence", params, rows, passed, time.perf_counter() - t0, _seeds(setup))


@dataclass
class _ReferenceTask:
    """Noise-free controlled path through the ensemble stepper."""

    setup: Setup
    hbar: np.ndarray | None

    def __call__(self, ids):
        s = self.setup
        states = [np.broadcast_to(s.xi, (len(ids),) + s.xi.shape)]
        states += [q for _, q, _ in _paths(s, 0.0, ids, hbar=self.hbar)]
        return {"traj": np.stack(states, axis=1)}


@dataclass
class _IncrementTask:
    setup: Setup
    eps: float
    hbar: np.ndarray | None
    levels: tuple
    bound: float

    def __call__(self, ids):
        s = self.setup
        g = s.grid
        B = len(ids)
        q0 = np.broadcast_to(s.xi, (B,) + s.xi.shape)
        anchors = {n: q0.copy() for n in self.levels}
        sums = {n: np.zeros(B) for n in self.levels}
        prev = {n: np.zeros(B) for n in self.levels}
        sup_q = sp.l2_sq(g, q0).sum(-1)
        g_prev = sp.grad_sq(g, q0).sum(-1)
        g_int = np.zeros(B)
        for k, q, _ in _paths(s, self.eps, ids, hbar=self.hbar):
            step = k + 1
            for n in self.levels:
                cur = sp.l2_sq(g, q - anchors[n]).sum(-1)
                sums[n] += 0.5 * s.dt * (prev[n] + cur)
                stride = s.n_steps >> n
                if step % stride == 0:
                    anchors[n] = q.copy()
                    prev[n] = np.zeros(B)
                else:
                    prev[n] = cur
            sup_q = np.maximum(sup_q, sp.l2_sq(g, q).sum(-1))
            g_now = sp.grad_sq(g, q).sum(-1)
            g_int += 0.5 * s.dt * (g_prev + g_now)
            g_prev = g_now
        inside = (sup_q <= self.bound) & (g_int <= self.bound)
        out = {"inside": inside.astype(float)}
        for n in self.levels:
            out[f"I{n}"] = sums[n] * inside
        return out


def time_increment_study(
    h: ControlPath | None,
    eps: float,
    levels,
    bound: float,
    setup: Setup,
    n_paths: int,
    workers: int = 1,
) -> StudyReport:
    """``E[1_G int ||q(s) - q(s_n)||^2 ds]`` on dyadic grids ``s_n = floor(s 2^n / T) T 2^-n``.

    ``G`` requires ``sup ||q||^2 <= bound`` and ``int ||grad q||^2 <= bound``.
    ``C`` is fitted at the coarsest level; the study passes when every finer
    level satisfies ``I_n <= C 2^(-n/2)``.
    """
    t0 = time.perf_counter()
    levels = tuple(sorted(int(n) for n in levels))
    if setup.n_steps % (1 << levels[-1]):
        raise ValueError(f"n_steps={setup.n_steps} must be a multiple of 2^{levels[-1]}")
    hbar = setup.per_step(h)
    out = run_ensemble(_IncrementTask(setup, eps, hbar, levels, bound), n_paths, workers)
    frac = float(out["inside"].mean())
    flags = []
    if frac < 0.05:
        flags.append(f"indicator active on {frac:.3g} of paths: bound N too small")
    values = {n: float(out[f"I{n}"].mean()) for n in levels}
    C = values[levels[0]] * 2 ** (levels[0] / 2)
    rows = []
    for n in levels:
        rows.append({
            "n": n, "I_n": values[n], "bound": C * 2 ** (-n / 2),
            "within": values[n] <= C * 2 ** (-n / 2), "indicator_fraction": frac, "n_paths": n_paths,
        })
    pos = [(n, v) for n, v in values.items() if v > 0]
    exponent = -float(np.polyfit([p[0] for p in pos], np.log2([p[1] for p in pos]), 1)[0]) if len(pos) >= 2 else math.nan
    for r in rows:
        r["decay_exponent"] = exponent
    passed = all(r["within"] for r in rows) and not flags
    params = {"eps": eps, "levels": list(levels), "bound": bound, "n_paths": n_paths}
    return StudyReport("time_increments", params, rows, passed, time.perf_counter() - t0, _seeds(setup), flags=flags)


@dataclass
class _EnergyTask:
    setup: Setup
    eps: float

    def __call__(self, ids):
        s = self.setup
        q0 = np.broadcast_to(s.xi, (len(ids),) + s.xi.shape)
        acc = _XNormAccumulator(s.grid, q0, s.dt, weight=s.model.params.nu)
        for _, q, _ in _paths(s, self.eps, ids):
            acc.update(q)
        return {"stat": acc.value()}


def _affine_r2(x, y) -> tuple[float, float, float]:
    slope, icpt = np.polyfit(x, y, 1)
    resid = np.asarray(y) - (slope * np.asarray(x) + icpt)
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), r2


def energy_bound_study(
    setup: Setup,
    eps: float,
    amplitudes,
    n_paths: int,
    r2_min: float = 0.95,
    workers: int = 1,
) -> StudyReport:
    """``E[sup ||q||^2 + nu int sup ||grad q||^2]`` against ``||xi||^2``.

    ``setup.xi`` fixes the shape of the initial condition; it is rescaled to
    each L2 amplitude in ``amplitudes``.
    """
    t0 = time.perf_counter()
    shape_norm = math.sqrt(float(sp.l2_sq(setup.grid, setup.xi).sum()))
    if shape_norm == 0:
        raise ValueError("initial condition shape must be non-zero")
    rows = []
    for amp in amplitudes:
        s = Setup(setup.model, setup.noise, setup.xi * (amp / shape_norm), setup.T, setup.n_steps, setup.seed, setup.stream)
        stat = run_ensemble(_EnergyTask(s, eps), n_paths, workers)["stat"]
        rows.append({"xi_norm2": float(amp) ** 2, "stat": float(stat.mean()), "n_paths": n_paths})
    slope, icpt, r2 = _affine_r2([r["xi_norm2"] for r in rows], np.array([r["stat"] for r in rows]))
    for r in rows:
        r.update(slope=slope, intercept=icpt, r2=r2)
    params = {"eps": eps, "amplitudes": [float(a) for a in amplitudes], "n_paths": n_paths, "r2_min": r2_min}
    return StudyReport("energy_bound", params, rows, r2 >= r2_min, time.perf_counter() - t0, _seeds(setup))


# --- invariant suites ---------------------------------------------------------


def random_field(grid: GridSpec, rng, slope: float = 2.0, layers: int = 2) -> np.ndarray:
    """Random coefficients with amplitude ``lam^(-slope/2)``."""
    return rng.standard_normal((layers,) + grid.shape) * grid.lam ** (-slope / 2)


def _suite_jacobian(N=64, n_pairs=100, tol=1e-8, seed=0):
    grid = GridSpec(N)
    rows, failing = [], []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        u, v = random_field(grid, rng, rng.uniform(0, 4), 1)[0], random_field(grid, rng, rng.uniform(0, 4), 1)[0]
        juv, jvu = sp.jacobian(grid, u, v), sp.jacobian(grid, v, u)
        scale = math.sqrt(float(sp.l2_sq(grid, juv)))
        anti = math.sqrt(float(sp.l2_sq(grid, juv + jvu))) / scale
        orth_v = abs(float(sp.inner_product(grid, juv, v))) / (scale * math.sqrt(float(sp.l2_sq(grid, v))))
        orth_u = abs(float(sp.inner_product(grid, juv, u))) / (scale * math.sqrt(float(sp.l2_sq(grid, u))))
        worst = max(anti, orth_u, orth_v)
        if worst > tol:
            failing.append([seed, i])
        rows.append({"sample": i, "antisymmetry": anti, "orth_u": orth_u, "orth_v": orth_v})
    return rows, failing, {"N": N, "n_pairs": n_pairs, "tol": tol, "seed": seed}


def _elliptic_ratios(N, n_states, seed, F1, F2):
    grid = GridSpec(N)
    model = QGModel(grid, ModelParams(F1=F1, F2=F2, nu=1.0))
    out = []
    for i in range(n_states):
        rng = np.random.default_rng([seed, i])
        q = random_field(grid, rng, rng.uniform(0, 4))
        psi = model.invert(q)
        out.append(float(sp.h2_sq(grid, psi).sum() / sp.l2_sq(grid, q).sum()))
    return np.array(out), model.elliptic_ratio_bound()


def _suite_elliptic(N=32, n_states=1000, tol=0.05, seed=0, F1=1.0, F2=1.0):
    coarse, bound_c = _elliptic_ratios(N, n_states, seed, F1, F2)
    fine, bound_f = _elliptic_ratios(2 * N, n_states, seed, F1, F2)
    change = abs(fine.max() - coarse.max()) / coarse.max()
    rows = [
        {"N": N, "sup_ratio": float(coarse.max()), "mode_bound": bound_c, "rel_change": change},
        {"N": 2 * N, "sup_ratio": float(fine.max()), "mode_bound": bound_f, "rel_change": change},
    ]
    ok = np.isfinite(fine.max()) and change < tol and fine.max() <= bound_f * (1 + 1e-12)
    failing = [] if ok else [[seed, int(np.argmax(fine))]]
    return rows, failing, {"N": N, "n_states": n_states, "tol": tol, "seed": seed, "F1": F1, "F2": F2}


def _suite_energy(N=16, n_samples=20, T=1.0, dt=0.01, nu=0.05, seed=0):
    grid = GridSpec(N)
    model = QGModel(grid, ModelParams(F1=0.0, F2=0.0, nu=nu, barotropic_limit=True))
    rows, failing = [], []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        q0 = random_field(grid, rng, rng.uniform(1, 4))
        _, states = model.integrate(q0, T, dt)
        e = sp.l2_sq(grid, states).sum(-1)
        increase = float(np.max(np.diff(e) / e[:-1]))
        if increase > 1e-12:
            failing.append([seed, i])
        rows.append({"sample": i, "max_rel_increase": increase, "decay": float(e[-1] / e[0])})
    return rows, failing, {"N": N, "n_samples": n_samples, "T": T, "dt": dt, "nu": nu, "seed": seed}


def _suite_assumptions(N=16, n_samples=100, seed=0, s=1.5, m=None, a=1.0, b=0.5):
    grid = GridSpec(N)
    rows, failing = [], []
    for kind in ("additive", "multiplicative"):
        spec = NoiseSpec(c=1.0, s=s, m=m, kind=kind, a=a, b=b)
        r1 = validate_assumptions(spec, grid, n_samples, seed)
        r2 = validate_assumptions(spec, grid, 2 * n_samples, seed + 1)
        cap = r1.trace * ((a + b) ** 2 if kind == "multiplicative" else 1.0)
        stable = abs(r2.growth_K - r1.growth_K) <= 0.5 * r1.growth_K and (
            r1.lipschitz_L == 0 or abs(r2.lipschitz_L - r1.lipschitz_L) <= 0.5 * r1.lipschitz_L
        )
        ok = r1.ok and r2.ok and r1.growth_K <= cap * (1 + 1e-12) and stable
        if kind == "additive":
            ok = ok and r1.lipschitz_L == 0
        if not ok:
            failing.append([seed, kind])
        rows.append({
            "kind": kind, "trace": r1.trace, "growth_K": r1.growth_K, "growth_K_2x": r2.growth_K,
            "lipschitz_L": r1.lipschitz_L, "lipschitz_L_2x": r2.lipschitz_L,
            "growth_K_prime": r1.growth_K_prime, "growth_cap": cap,
        })
    return rows, failing, {"N": N, "n_samples": n_samples, "seed": seed, "s": s, "a": a, "b": b}


SUITES = {
    "jacobian": _suite_jacobian,
    "elliptic": _suite_elliptic,
    "energy": _suite_energy,
    "assumptions": _suite_assumptions,
}


def run_suite(name: str, **config) -> StudyReport:
    """Run one invariant suite; failures list the ``[seed, sample]`` to replay."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    t0 = time.perf_counter()
    rows, failing, params = SUITES[name](**config)
    return StudyReport(
        f"suite_{name}", params, rows, not failing, time.perf_counter() - t0,
        {"seed": params.get("seed", 0)}, failing,
    )
