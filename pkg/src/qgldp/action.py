"""Controls, the skeleton equation, the action functional and its minimisation.

A control path stores ``n_t`` nodes on a uniform grid over ``[0, T]`` in
noise eigen-coordinates, shape ``(n_t, 2, m)``. The skeleton takes
``n_t - 1`` IMEX steps and applies the interval average of neighbouring
nodes on each step; the action is the trapezoidal rule of
``0.5 * ||h(t)||_0^2``.

Gradients are the exact discrete adjoint of the stepper actually used, so
they agree with finite differences of the discretised objective.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import spectral as sp
from .model import NumericalInstability, QGModel
from .noise import NoiseBasis

__all__ = [
    "ControlPath",
    "TerminalMode",
    "TerminalL2",
    "RunningMax",
    "LevelTarget",
    "BallTarget",
    "ActionProblem",
    "MinimizerReport",
    "action",
    "skeleton_solve",
    "objective",
    "gradient",
    "minimize_action",
]


# --- control paths --------------------------------------------------------


def trapezoid_weights(n_t: int, dt: float) -> np.ndarray:
    w = np.full(n_t, dt)
    if n_t > 1:
        w[0] = w[-1] = 0.5 * dt
    else:
        w[0] = 0.0
    return w


@dataclass
class ControlPath:
    T: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[1] != 2 or self.values.shape[0] < 2:
            raise ValueError("control values need shape (n_t >= 2, 2, m)")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @classmethod
    def zeros(cls, T: float, n_t: int, basis: NoiseBasis) -> "ControlPath":
        return cls(T, np.zeros((n_t, 2, basis.m)))

    @property
    def n_t(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return self.T / (self.n_t - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t)

    def midpoints(self) -> np.ndarray:
        """Per-step control, the average of the two bounding nodes."""
        return 0.5 * (self.values[1:] + self.values[:-1])

    def energy(self, basis: NoiseBasis) -> float:
        """``int ||h||_0^2 dt``; the path lies in S_M when this is <= M."""
        return 2.0 * action(self, basis)


def action(h: ControlPath, basis: NoiseBasis) -> float:
    norms2 = basis.h0_norm(h.values) ** 2
    return 0.5 * float(np.dot(trapezoid_weights(h.n_t, h.dt), norms2))


def _action_grad(h: ControlPath, basis: NoiseBasis) -> np.ndarray:
    w = trapezoid_weights(h.n_t, h.dt)
    return w[:, None, None] * basis.inv_eig * h.values


# --- observables and targets --------------------------------------------


class _Observable:
    reduce = "terminal"

    def sample(self, q, grid):
        raise NotImplementedError

    def sample_grad(self, q, grid):
        raise NotImplementedError

    def value(self, traj, grid) -> np.ndarray:
        s = self.sample(traj, grid)
        return s[..., -1] if self.reduce == "terminal" else s.max(-1)

    def grad(self, traj, grid) -> np.ndarray:
        """Derivative with respect to every state of a single trajectory."""
        out = np.zeros_like(traj)
        idx = traj.shape[0] - 1
        if self.reduce == "max":
            idx = int(np.argmax(self.sample(traj, grid)))
        out[idx] = self.sample_grad(traj[idx], grid)
        return out


@dataclass
class TerminalMode(_Observable):
    """Coordinate ``(q_layer(T), e_k)`` along the orthonormal mode ``(kx, ky)``."""

    layer: int = 0
    kx: int = 1
    ky: int = 1

    def sample(self, q, grid):
        return 0.5 * grid.L * np.asarray(q)[..., self.layer, self.kx - 1, self.ky - 1]

    def sample_grad(self, q, grid):
        g = np.zeros(np.shape(q))
        g[..., self.layer, self.kx - 1, self.ky - 1] = 0.5 * grid.L
        return g


@dataclass
class RunningMax(TerminalMode):
    """Largest mode coordinate along the path."""

    reduce = "max"


@dataclass
class TerminalL2(_Observable):
    def sample(self, q, grid):
        return np.sqrt(sp.l2_sq(grid, q).sum(-1))

    def sample_grad(self, q, grid):
        n = float(self.sample(q, grid))
        return grid.parseval * q / n if n > 0 else np.zeros(np.shape(q))


@dataclass
class LevelTarget:
    observable: _Observable
    tau: float
    direction: str = ">="

    def __post_init__(self):
        if self.direction not in (">=", "<="):
            raise ValueError("direction must be '>=' or '<='")

    def violation(self, traj, grid) -> float:
        v = float(self.observable.value(traj, grid))
        return max(0.0, self.tau - v) if self.direction == ">=" else max(0.0, v - self.tau)

    def penalty_and_grad(self, traj, grid):
        viol = self.violation(traj, grid)
        sign = -1.0 if self.direction == ">=" else 1.0
        grad = sign * viol * self.observable.grad(traj, grid) if viol > 0 else np.zeros_like(traj)
        return 0.5 * viol**2, grad

    def default_tol(self) -> float:
        return 1e-3 * max(abs(self.tau), 1.0)


@dataclass
class BallTarget:
    q_star: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    def _dist(self, traj, grid):
        d = traj[-1] - self.q_star
        return d, math.sqrt(float(sp.l2_sq(grid, d).sum()))

    def violation(self, traj, grid) -> float:
        return max(0.0, self._dist(traj, grid)[1] - self.rho)

    def penalty_and_grad(self, traj, grid):
        d, n = self._dist(traj, grid)
        viol = max(0.0, n - self.rho)
        grad = np.zeros_like(traj)
        if viol > 0:
            grad[-1] = viol * grid.parseval * d / n
        return 0.5 * viol**2, grad

    def default_tol(self) -> float:
        if self.rho > 0:
            return self.rho / 10
        return 1e-3 * max(float(np.sqrt(np.sum(self.q_star**2))), 1.0)


# --- skeleton -------------------------------------------------------------


def skeleton_solve(h: ControlPath, xi, model: QGModel, basis: NoiseBasis, store: bool = False):
    """Noise-free controlled trajectory ``(n_t, 2, N, N)`` driven by ``sigma_tilde(q) h``."""
    xi = model.grid.check(xi)
    hbar = h.midpoints()
    dt = h.dt
    q = np.array(xi, dtype=float)
    traj = [q]
    preds = []
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(h.n_t - 1):
            hn = hbar[n]
            extra = None
            if np.any(hn != 0):
                def extra(x, hn=hn):
                    return basis.apply(x, hn, tilde=True)
            q, pred = model.advance(q, dt, extra=extra, store=True)
            if not np.all(np.isfinite(q)):
                raise NumericalInstability(n + 1)
            traj.append(q)
            preds.append(pred)
    traj = np.stack(traj)
    return (traj, preds) if store else traj


# --- objective and adjoint gradient ------------------------------------------


@dataclass
class ActionProblem:
    """Penalised minimum-action problem for one target event."""

    model: QGModel
    basis: NoiseBasis
    xi: np.ndarray
    T: float
    n_t: int
    target: LevelTarget | BallTarget
    mu0: float = 1.0
    M: float | None = None
    max_iter: int = 2000
    tol: float | None = None
    gtol: float = 1e-7

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.mu0 > 0:
            raise ValueError("penalty weight must be positive")
        if self.n_t < 2:
            raise ValueError("n_t must be >= 2")
        if self.tol is None:
            self.tol = self.target.default_tol()

    def zero_control(self) -> ControlPath:
        return ControlPath.zeros(self.T, self.n_t, self.basis)


def objective(problem: ActionProblem, h: ControlPath, mu: float | None = None) -> float:
    mu = problem.mu0 if mu is None else mu
    traj = skeleton_solve(h, problem.xi, problem.model, problem.basis)
    pen, _ = problem.target.penalty_and_grad(traj, problem.model.grid)
    return action(h, problem.basis) + mu * pen


def _explicit_vjp(model, basis, q, hn, r):
    out = model.advection_vjp(q, r)
    if hn is not None:
        out = out + basis.state_vjp(q, hn, r, tilde=True)
    return out


def gradient(problem: ActionProblem, h: ControlPath, mu: float | None = None, full: bool = False):
    """Adjoint gradient of ``action(h) + mu * penalty(skeleton(h))``.

    Returns the ``(n_t, 2, m)`` gradient, or with ``full`` a tuple
    ``(objective, gradient, trajectory, violation)``.
    """
    mu = problem.mu0 if mu is None else mu
    model, basis = problem.model, problem.basis
    grid = model.grid
    traj, preds = skeleton_solve(h, problem.xi, model, basis, store=True)
    pen, src = problem.target.penalty_and_grad(traj, grid)
    src = mu * src
    hbar = h.midpoints()
    dt = h.dt
    dhbar = np.zeros_like(hbar)
    lam = src[-1].copy()
    for n in range(h.n_t - 2, -1, -1):
        qn = traj[n]
        hn = hbar[n] if np.any(hbar[n] != 0) else None
        if model.scheme == "euler":
            r = model.apply_op(dt, "implicit", lam, transpose=True)
            dhbar[n] = dt * basis.apply_T(qn, r, tilde=True)
            lam = src[n] + r + dt * _explicit_vjp(model, basis, qn, hn, r)
        else:
            pred = preds[n]
            r = model.apply_op(dt, "half_implicit", lam, transpose=True)
            g_pred = 0.5 * dt * _explicit_vjp(model, basis, pred, hn, r)
            r2 = model.apply_op(dt, "implicit", g_pred, transpose=True)
            r_e0 = 0.5 * dt * r + dt * r2
            dhbar[n] = 0.5 * dt * basis.apply_T(pred, r, tilde=True) + basis.apply_T(qn, r_e0, tilde=True)
            lam = (
                src[n]
                + model.apply_op(dt, "half_explicit", r, transpose=True)
                + r2
                + _explicit_vjp(model, basis, qn, hn, r_e0)
            )
    g = _action_grad(h, basis)
    g[:-1] += 0.5 * dhbar
    g[1:] += 0.5 * dhbar
    g = g * basis.mask
    if not full:
        return g
    obj = action(h, basis) + mu * pen
    return obj, g, traj, problem.target.violation(traj, grid)


# --- minimisation ---------------------------------------------------------


@dataclass
class MinimizerReport:
    control: ControlPath
    action: float
    trajectory: np.ndarray
    violation: float
    feasible: bool
    mu: float
    iterations: int
    log: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        cols = ["iterate", "objective", "action", "violation", "step_size", "mu"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.log:
                w.writerow([row["iterate"]] + [f"{row[c]:.17g}" for c in cols[1:]])


def _two_loop(g, S, Y, D):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((a, rho, s, y))
        q -= a * y
    r = D * q
    for a, rho, s, y in reversed(alphas):
        b = rho * np.dot(y, r)
        r += s * (a - b)
    return -r


def minimize_action(problem: ActionProblem, h0: ControlPath | None = None, memory: int = 20) -> MinimizerReport:
    """L-BFGS with Armijo backtracking and penalty doubling.

    Each stage minimises ``action + mu * penalty`` at fixed ``mu``; ``mu`` is
    doubled until the target violation is within ``problem.tol``. The
    inverse action Hessian ``diag(q_k / w_t)`` seeds the quasi-Newton metric.
    """
    basis = problem.basis
    h = h0 if h0 is not None else problem.zero_control()
    shape = h.values.shape
    mask = np.broadcast_to(basis.mask, shape).ravel()
    w = trapezoid_weights(h.n_t, h.dt)
    D = (np.broadcast_to(basis.eig, shape) / np.maximum(w, 1e-300)[:, None, None]).ravel() * mask

    def evaluate(x, mu):
        path = ControlPath(problem.T, x.reshape(shape))
        obj, g, traj, viol = gradient(problem, path, mu, full=True)
        return obj, g.ravel(), traj, viol

    def rescale(x):
        if problem.M is None:
            return x, False
        energy = 2.0 * action(ControlPath(problem.T, x.reshape(shape)), basis)
        if energy <= problem.M:
            return x, False
        return x * math.sqrt(problem.M / energy), True

    x = h.values.ravel().copy()
    mu = problem.mu0
    log = []
    it = 0
    obj, g, traj, viol = evaluate(x, mu)

    def record(step):
        log.append({
            "iterate": it,
            "objective": obj,
            "action": action(ControlPath(problem.T, x.reshape(shape)), basis),
            "violation": viol,
            "step_size": step,
            "mu": mu,
        })

    record(0.0)
    feasible = False
    while True:
        S, Y = [], []
        while it < problem.max_iter:
            gnorm = math.sqrt(max(float(np.dot(g, D * g)), 0.0))
            if gnorm <= problem.gtol * (1.0 + math.sqrt(max(obj, 0.0))):
                break
            d = _two_loop(g, S, Y, D)
            slope = float(np.dot(g, d))
            if slope >= 0:
                S, Y = [], []
                d = -D * g
                slope = float(np.dot(g, d))
            step = 1.0
            accepted = False
            for _ in range(30):
                x_new = x + step * d
                try:
                    o_new, g_new, t_new, v_new = evaluate(x_new, mu)
                except NumericalInstability:
                    step *= 0.25
                    continue
                if o_new <= obj + 1e-4 * step * slope:
                    accepted = True
                    break
                # minimiser of the quadratic through obj, slope and o_new
                curv = o_new - obj - slope * step
                trial = -slope * step**2 / (2.0 * curv) if curv > 0 else 0.5 * step
                step = min(max(trial, 0.1 * step), 0.5 * step)
            if not accepted:
                break
            stalled = obj - o_new <= 1e-13 * max(1.0, abs(obj))
            x_new, scaled = rescale(x_new)
            if scaled:
                o_new, g_new, t_new, v_new = evaluate(x_new, mu)
                S, Y = [], []
            else:
                s_vec, y_vec = x_new - x, g_new - g
                if np.dot(s_vec, y_vec) > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
                    S.append(s_vec)
                    Y.append(y_vec)
                    if len(S) > memory:
                        S.pop(0)
                        Y.pop(0)
            x, obj, g, traj, viol = x_new, o_new, g_new, t_new, v_new
            it += 1
            record(step)
            if stalled and not scaled:
                break
        if viol <= problem.tol:
            feasible = True
            break
        if it >= problem.max_iter:
            break
        mu *= 2.0
        obj, g, traj, viol = evaluate(x, mu)
    control = ControlPath(problem.T, x.reshape(shape))
    return MinimizerReport(
        control=control,
        action=action(control, basis),
        trajectory=traj,
        violation=viol,
        feasible=feasible,
        mu=mu,
        iterations=it,
        log=log,
    )
