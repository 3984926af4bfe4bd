"""Deterministic two-layer quasi-geostrophic dynamics in the sine basis.

The prognostic variable is potential vorticity ``q`` with shape
``(..., 2, N, N)``. The stream function solves, mode by mode,

    q1 = lap(psi1) - F1 (psi1 - psi2)
    q2 = lap(psi2) - F2 (psi2 - psi1)

and the tendency is

    dq1/dt = -J(psi1, q1) - beta dpsi1/dx + nu lap^2 psi1 + f
    dq2/dt = -J(psi2, q2) - beta dpsi2/dx + nu lap^2 psi2 - r lap psi2

Every term linear in ``q`` is stepped implicitly. The projected ``d/dx``
couples x-wavenumbers of opposite parity, so the implicit solve is a dense
``2N x 2N`` block per y-wavenumber rather than a 2x2 per mode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import spectral as sp
from .spectral import GridSpec, LayeredField

__all__ = [
    "PhysicalConstants",
    "ModelParams",
    "NumericalInstability",
    "derive_params",
    "QGModel",
    "invert_pv",
    "tendency",
    "write_trajectory_csv",
]


class NumericalInstability(RuntimeError):
    """Non-finite state encountered while stepping."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


@dataclass(frozen=True)
class PhysicalConstants:
    f0: float
    g: float
    h1: float
    h2: float
    rho0: float
    rho1: float
    rho2: float
    nu: float

    def __post_init__(self):
        if not self.rho2 > self.rho1:
            raise ValueError(
                f"invalid stratification: rho2={self.rho2} must exceed rho1={self.rho1}"
            )
        for name in ("f0", "g", "h1", "h2", "rho0", "nu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Layer coupling, beta-plane, dissipation and forcing.

    ``barotropic_limit`` admits ``F1 = F2 = 0`` (decoupled layers) for
    oracle tests. ``jacobian=False`` switches the advection off.
    """

    F1: float
    F2: float
    nu: float
    beta: float = 0.0
    r: float = 0.0
    forcing: LayeredField | None = None
    barotropic_limit: bool = False
    jacobian: bool = True

    def __post_init__(self):
        if self.barotropic_limit:
            if self.F1 < 0 or self.F2 < 0:
                raise ValueError("F1, F2 must be non-negative")
        elif not (self.F1 > 0 and self.F2 > 0):
            raise ValueError("F1 and F2 must be positive (or set barotropic_limit)")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if self.r < 0 or self.beta < 0:
            raise ValueError("r and beta must be non-negative")
        if self.forcing is not None and np.any(self.forcing.coeffs[1] != 0):
            raise ValueError("forcing acts on layer 1 only")


def derive_params(pc: PhysicalConstants, beta: float = 0.0, forcing=None) -> ModelParams:
    drho = pc.rho2 - pc.rho1
    F1 = pc.f0**2 * pc.rho0 / (pc.g * pc.h1 * drho)
    F2 = pc.f0**2 * pc.rho0 / (pc.g * pc.h2 * drho)
    ekman_depth = math.sqrt(2.0 * pc.nu / pc.f0)
    r = pc.f0 * ekman_depth / (2.0 * (pc.h1 + pc.h2))
    return ModelParams(F1=F1, F2=F2, nu=pc.nu, beta=beta, r=r, forcing=forcing)


def _blocks_apply(mats: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Apply per-ky ``(N, 2N, 2N)`` blocks to ``(..., 2, N, N)`` coefficients."""
    n = q.shape[-1]
    x = np.moveaxis(q, -1, -3)  # (..., ky, layer, kx)
    shape = x.shape
    x = x.reshape(shape[:-2] + (2 * n, 1))
    y = np.matmul(mats, x).reshape(shape)
    return np.moveaxis(y, -3, -1)


class QGModel:
    """Grid, parameters and cached linear operators for one configuration.

    ``scheme`` is ``"euler"`` (first-order IMEX) or ``"pc"`` (Crank-Nicolson
    on the linear part with a Heun predictor-corrector on the explicit part).
    """

    def __init__(self, grid: GridSpec, params: ModelParams, scheme: str = "euler"):
        if scheme not in ("euler", "pc"):
            raise ValueError(f"unknown scheme {scheme!r}")
        if params.forcing is not None and params.forcing.grid != grid:
            raise sp.GridMismatchError("forcing lives on a different grid")
        self.grid = grid
        self.params = params
        self.scheme = scheme
        self._step_ops: dict = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_step_ops"] = {}
        return state

    # -- inversion -------------------------------------------------------

    @cached_property
    def _inv(self) -> np.ndarray:
        """Per-mode inverse of the PV operator, shape ``(2, 2, N, N)``."""
        lam = self.grid.lam
        F1, F2 = self.params.F1, self.params.F2
        det = lam**2 + lam * (F1 + F2)
        off1 = np.full_like(lam, -F1)
        off2 = np.full_like(lam, -F2)
        return np.array([[-lam - F2, off1], [off2, -lam - F1]]) / det

    def invert(self, q) -> np.ndarray:
        q = self.grid.check(q)
        a = self._inv
        return np.stack(
            [a[0, 0] * q[..., 0, :, :] + a[0, 1] * q[..., 1, :, :],
             a[1, 0] * q[..., 0, :, :] + a[1, 1] * q[..., 1, :, :]],
            axis=-3,
        )

    def invert_T(self, r) -> np.ndarray:
        a = self._inv
        return np.stack(
            [a[0, 0] * r[..., 0, :, :] + a[1, 0] * r[..., 1, :, :],
             a[0, 1] * r[..., 0, :, :] + a[1, 1] * r[..., 1, :, :]],
            axis=-3,
        )

    def pv_from_psi(self, psi) -> np.ndarray:
        psi = self.grid.check(psi)
        lap = sp.laplacian(self.grid, psi)
        p1, p2 = psi[..., 0, :, :], psi[..., 1, :, :]
        return np.stack(
            [lap[..., 0, :, :] - self.params.F1 * (p1 - p2),
             lap[..., 1, :, :] - self.params.F2 * (p2 - p1)],
            axis=-3,
        )

    # -- tendency pieces ---------------------------------------------------

    @cached_property
    def forcing(self) -> np.ndarray:
        if self.params.forcing is None:
            return np.zeros((2,) + self.grid.shape)
        return np.asarray(self.params.forcing.coeffs)

    def linear_tendency(self, q, psi=None) -> np.ndarray:
        g, p = self.grid, self.params
        if psi is None:
            psi = self.invert(q)
        out = p.nu * g.lam**2 * psi
        out[..., 1, :, :] += p.r * g.lam * psi[..., 1, :, :]
        if p.beta:
            out -= p.beta * sp.ddx(g, psi)
        return out

    def advection(self, q, psi=None) -> np.ndarray:
        """``-J(psi_i, q_i)`` per layer, zero when the Jacobian is switched off."""
        if not self.params.jacobian:
            return np.zeros(np.shape(q))
        if psi is None:
            psi = self.invert(q)
        return -sp.jacobian(self.grid, psi, q)

    def advection_vjp(self, q, r) -> np.ndarray:
        """Transpose of the linearised advection applied to ``r``.

        Uses the exact discrete identities ``(J(a,b),c) = (J(b,c),a)``.
        """
        if not self.params.jacobian:
            return np.zeros(np.shape(r))
        g = self.grid
        psi = self.invert(q)
        return sp.jacobian(g, psi, r) - self.invert_T(sp.jacobian(g, q, r))

    def tendency(self, q) -> np.ndarray:
        q = self.grid.check(q)
        psi = self.invert(q)
        return self.advection(q, psi) + self.linear_tendency(q, psi) + self.forcing

    # -- implicit operators -----------------------------------------------

    @cached_property
    def linear_blocks(self) -> np.ndarray:
        """Dense linear operator per y-wavenumber, ``(N, 2N, 2N)``.

        Row/column index within a block is ``layer * N + kx_index``.
        """
        g, p = self.grid, self.params
        n = g.N
        blocks = np.zeros((n, 2 * n, 2 * n))
        for j in range(n):
            lam = g.lam[:, j]
            inv = self._inv[:, :, :, j]
            P = np.zeros((2 * n, 2 * n))
            for a in range(2):
                for b in range(2):
                    P[a * n:(a + 1) * n, b * n:(b + 1) * n] = np.diag(inv[a, b])
            D = np.zeros((2 * n, 2 * n))
            D[:n, :n] = np.diag(p.nu * lam**2)
            D[n:, n:] = np.diag(p.nu * lam**2 + p.r * lam)
            if p.beta:
                D[:n, :n] -= p.beta * g.ddx_matrix
                D[n:, n:] -= p.beta * g.ddx_matrix
            blocks[j] = D @ P
        return blocks

    def step_operators(self, dt: float) -> dict:
        key = float(dt)
        ops = self._step_ops.get(key)
        if ops is None:
            L = self.linear_blocks
            eye = np.eye(L.shape[-1])
            ops = {"implicit": np.linalg.inv(eye - dt * L)}
            if self.scheme == "pc":
                ops["half_implicit"] = np.linalg.inv(eye - 0.5 * dt * L)
                ops["half_explicit"] = eye + 0.5 * dt * L
            ops["T"] = {name: np.swapaxes(m, -1, -2) for name, m in ops.items()}
            self._step_ops[key] = ops
        return ops

    def apply_op(self, dt: float, name: str, q, transpose: bool = False) -> np.ndarray:
        ops = self.step_operators(dt)
        mats = ops["T"][name] if transpose else ops[name]
        return _blocks_apply(mats, q)

    # -- stepping ----------------------------------------------------------

    def explicit_rhs(self, q, extra=None) -> np.ndarray:
        rhs = self.advection(q) + self.forcing
        if extra is not None:
            rhs = rhs + extra(q)
        return rhs

    def advance(self, q, dt: float, extra=None, kick=None, store: bool = False):
        """One IMEX step.

        ``extra(q)`` adds a state-dependent explicit drift (control forcing);
        ``kick`` is an already-scaled additive increment (noise) entering
        once per step. With ``store=True`` the predictor is returned too.
        """
        e0 = self.explicit_rhs(q, extra)
        base = q + dt * e0
        if kick is not None:
            base = base + kick
        pred = self.apply_op(dt, "implicit", base)
        if self.scheme == "euler":
            return (pred, None) if store else pred
        e1 = self.explicit_rhs(pred, extra)
        rhs = self.apply_op(dt, "half_explicit", q) + 0.5 * dt * (e0 + e1)
        if kick is not None:
            rhs = rhs + kick
        out = self.apply_op(dt, "half_implicit", rhs)
        return (out, pred) if store else out

    def step_imex(self, q, dt: float) -> np.ndarray:
        return self.advance(self.grid.check(q), dt)

    def integrate(self, q0, T: float, dt: float, save_every: int = 1):
        """Integrate to time ``T``; returns ``(times, states)``.

        ``dt`` is shrunk so that a whole number of steps reaches ``T``.
        """
        if not dt > 0 or not T >= 0:
            raise ValueError("need dt > 0 and T >= 0")
        n = max(1, math.ceil(T / dt - 1e-9))
        dt = T / n
        q = np.array(self.grid.check(q0), dtype=float)
        times, states = [0.0], [q]
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(1, n + 1):
                q = self.advance(q, dt)
                if not np.all(np.isfinite(q)):
                    raise NumericalInstability(i)
                if i % save_every == 0 or i == n:
                    times.append(i * dt)
                    states.append(q)
        return np.array(times), np.stack(states)

    def suggest_dt(self, q, dt_max: float = math.inf) -> float:
        """Advective CFL estimate ``0.5 dx / max|grad psi|``."""
        psi = self.invert(self.grid.check(q))
        speed2 = sp.synthesize(self.grid, psi, dx=1) ** 2 + sp.synthesize(self.grid, psi, dy=1) ** 2
        umax = math.sqrt(float(speed2.max())) if speed2.size else 0.0
        if umax == 0.0:
            return dt_max
        return min(0.5 * self.grid.dx / umax, dt_max)

    # -- diagnostics -------------------------------------------------------

    def elliptic_ratio_bound(self) -> float:
        """Largest ``||lap psi||^2 / ||q||^2`` over single modes (2x2 spectral norm)."""
        a = np.moveaxis(self._inv, (0, 1), (-2, -1)) * self.grid.lam[..., None, None]
        return float((np.linalg.norm(a, ord=2, axis=(-2, -1)) ** 2).max())

    def diagnostics(self, q) -> dict:
        g = self.grid
        psi = self.invert(q)
        return {
            "l2_q": np.sqrt(sp.l2_sq(g, q).sum(-1)),
            "grad_norm_q": np.sqrt(sp.grad_sq(g, q).sum(-1)),
            "h2_psi": np.sqrt(sp.h2_sq(g, psi).sum(-1)),
        }


def _model_for(q: LayeredField, params: ModelParams) -> QGModel:
    return QGModel(q.grid, params)


def invert_pv(q: LayeredField, params: ModelParams) -> LayeredField:
    return LayeredField(q.grid, _model_for(q, params).invert(q.coeffs))


def tendency(q: LayeredField, params: ModelParams) -> LayeredField:
    return LayeredField(q.grid, _model_for(q, params).tendency(q.coeffs))


def write_trajectory_csv(path, model: QGModel, times, states) -> None:
    diag = model.diagnostics(states)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "l2_q", "grad_norm_q", "h2_psi"])
        for i, t in enumerate(times):
            w.writerow([f"{t:.17g}"] + [f"{diag[k][i]:.17g}" for k in ("l2_q", "grad_norm_q", "h2_psi")])
