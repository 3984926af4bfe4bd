"""Sine-basis spectral representation on the square (0, L)^2.

Fields vanish on the boundary mode by mode. A scalar field is an ``(N, N)``
array of coefficients ``c[i, j]`` multiplying
``sin((i+1) pi x / L) * sin((j+1) pi y / L)``; a layered field stacks two of
them as ``(2, N, N)``. Leading batch axes are allowed everywhere.

Nonlinear products are evaluated on a padded interior grid. With padding
``M + 1 >= (3N + 1) / 2`` the type-I sine/cosine transforms recover the
Galerkin projection of a quadratic product exactly, so the discrete Jacobian
inherits the continuous skew-symmetry identities to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

__all__ = [
    "GridSpec",
    "GridMismatchError",
    "LayeredField",
    "to_spectral",
    "to_grid",
    "laplacian",
    "jacobian",
    "ddx",
    "inner_product",
    "l2_sq",
    "grad_sq",
    "h2_sq",
    "l2",
    "grad_norm",
    "h2_norm",
    "x_norm",
    "x_norm_conventional",
    "evaluate",
    "write_snapshot",
    "read_snapshot",
]


class GridMismatchError(ValueError):
    """Raised when an array does not match the grid it is used with."""


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(value).limit_denominator(1000)


@dataclass(frozen=True)
class GridSpec:
    """Square domain ``(0, L)^2`` resolved by ``N`` sine modes per direction."""

    N: int
    L: float = math.pi
    dealias_factor: Fraction = field(default=Fraction(3, 2))

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError(f"L must be positive, got {self.L!r}")
        factor = _as_fraction(self.dealias_factor)
        if factor < 1:
            raise ValueError(f"dealias_factor must be >= 1, got {factor}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "L", float(self.L))
        object.__setattr__(self, "dealias_factor", factor)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.N, self.N)

    @property
    def dx(self) -> float:
        return self.L / (self.N + 1)

    @property
    def parseval(self) -> float:
        """``||sin sin||^2`` on the domain, the Parseval weight of one coefficient."""
        return self.L**2 / 4.0

    @cached_property
    def M(self) -> int:
        """Interior points of the padded grid used for products."""
        return max(self.N, math.ceil(self.dealias_factor * (self.N + 1)) - 1)

    @property
    def alias_free(self) -> bool:
        return 2 * (self.M + 1) >= 3 * self.N + 1

    @cached_property
    def k(self) -> np.ndarray:
        return np.arange(1, self.N + 1, dtype=float)

    @cached_property
    def kx(self) -> np.ndarray:
        return np.broadcast_to(self.k[:, None], self.shape)

    @cached_property
    def ky(self) -> np.ndarray:
        return np.broadcast_to(self.k[None, :], self.shape)

    @cached_property
    def lam(self) -> np.ndarray:
        """Eigenvalues of ``-Laplacian``: ``pi^2 (kx^2 + ky^2) / L^2``."""
        return (math.pi / self.L) ** 2 * (self.kx**2 + self.ky**2)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.L * np.arange(1, self.N + 1) / (self.N + 1)

    @cached_property
    def padded_nodes(self) -> np.ndarray:
        return self.L * np.arange(1, self.M + 1) / (self.M + 1)

    @cached_property
    def ddx_matrix(self) -> np.ndarray:
        """Galerkin projection of d/dx onto the sine basis.

        ``d/dx sin(k a x)`` projects onto ``sin(m a x)`` with weight
        ``4 k m / (L (m^2 - k^2))`` when ``m + k`` is odd and zero otherwise.
        Rows index the output wavenumber ``m``.
        """
        m = self.k[:, None]
        k = self.k[None, :]
        odd = ((m + k) % 2) == 1
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(odd, 4.0 * k * m / (self.L * (m**2 - k**2)), 0.0)
        return d

    def check(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-2:] != self.shape:
            raise GridMismatchError(
                f"expected trailing shape {self.shape}, got {coeffs.shape}"
            )
        return coeffs


# --- transforms -----------------------------------------------------------


def to_spectral(grid: GridSpec, values) -> np.ndarray:
    """Sine coefficients from samples on the ``N x N`` interior grid."""
    values = grid.check(values)
    return 4.0 * sfft.idstn(values, type=1, axes=(-2, -1))


def to_grid(grid: GridSpec, coeffs) -> np.ndarray:
    """Samples on the interior grid ``x_i = i L / (N + 1)``."""
    coeffs = grid.check(coeffs)
    return 0.25 * sfft.dstn(coeffs, type=1, axes=(-2, -1))


def _pad(grid: GridSpec, coeffs: np.ndarray, extra: int = 0) -> np.ndarray:
    n, m = grid.N, grid.M
    out = np.zeros(coeffs.shape[:-2] + (m + extra, m + extra))
    out[..., :n, :n] = coeffs
    return out


def _synth_axis(a: np.ndarray, axis: int, cosine: bool, m: int) -> np.ndarray:
    """Evaluate one axis of a (co)sine series at the M padded interior nodes."""
    if not cosine:
        return 0.5 * sfft.dst(a, type=1, axis=axis)
    shape = list(a.shape)
    shape[axis] = 1
    zero = np.zeros(shape)
    # DCT-I over nodes 0..M+1 with the k=0 and k=M+1 coefficients set to zero.
    full = np.concatenate([zero, a, zero], axis=axis)
    vals = 0.5 * sfft.dct(full, type=1, axis=axis)
    return np.take(vals, np.arange(1, m + 1), axis=axis)


def synthesize(grid: GridSpec, coeffs, dx: int = 0, dy: int = 0) -> np.ndarray:
    """Values of the field, or of one first derivative, on the padded grid."""
    coeffs = grid.check(coeffs)
    a = math.pi / grid.L
    c = coeffs
    if dx:
        c = c * (a * grid.kx)
    if dy:
        c = c * (a * grid.ky)
    c = _pad(grid, c)
    c = _synth_axis(c, -2, bool(dx), grid.M)
    return _synth_axis(c, -1, bool(dy), grid.M)


def project(grid: GridSpec, values: np.ndarray) -> np.ndarray:
    """Sine coefficients of padded-grid samples, truncated to N modes."""
    c = 4.0 * sfft.idstn(values, type=1, axes=(-2, -1))
    return c[..., : grid.N, : grid.N]


# --- operators ------------------------------------------------------------


def laplacian(grid: GridSpec, coeffs) -> np.ndarray:
    return -grid.lam * grid.check(coeffs)


def jacobian(grid: GridSpec, u, v) -> np.ndarray:
    """Dealiased ``J(u, v) = u_x v_y - u_y v_x`` projected onto N modes."""
    u = grid.check(u)
    v = grid.check(v)
    prod = synthesize(grid, u, dx=1) * synthesize(grid, v, dy=1)
    prod -= synthesize(grid, u, dy=1) * synthesize(grid, v, dx=1)
    return project(grid, prod)


def ddx(grid: GridSpec, coeffs) -> np.ndarray:
    """Projected x-derivative, applied along the x-wavenumber axis."""
    coeffs = grid.check(coeffs)
    return np.einsum("mk,...kj->...mj", grid.ddx_matrix, coeffs)


# --- inner products and norms ---------------------------------------------
# All reductions run over the last two axes; callers sum layers themselves.


def inner_product(grid: GridSpec, u, v) -> np.ndarray:
    u = grid.check(u)
    v = grid.check(v)
    return grid.parseval * np.sum(u * v, axis=(-2, -1))


def l2_sq(grid: GridSpec, coeffs) -> np.ndarray:
    c = grid.check(coeffs)
    return grid.parseval * np.sum(c * c, axis=(-2, -1))


def grad_sq(grid: GridSpec, coeffs) -> np.ndarray:
    c = grid.check(coeffs)
    return grid.parseval * np.sum(grid.lam * c * c, axis=(-2, -1))


def h2_sq(grid: GridSpec, coeffs) -> np.ndarray:
    """``||Laplacian u||^2``, equivalent to the H^2 norm on H^2 ∩ H^1_0."""
    c = grid.check(coeffs)
    return grid.parseval * np.sum(grid.lam**2 * c * c, axis=(-2, -1))


def l2(grid, coeffs):
    return np.sqrt(l2_sq(grid, coeffs))


def grad_norm(grid, coeffs):
    return np.sqrt(grad_sq(grid, coeffs))


def h2_norm(grid, coeffs):
    return np.sqrt(h2_sq(grid, coeffs))


def _trajectory_sq(grid: GridSpec, traj):
    traj = grid.check(traj)
    if traj.ndim < 4 or traj.shape[-4] == 0:
        raise ValueError("trajectory must have shape (..., n_t >= 1, 2, N, N)")
    return l2_sq(grid, traj).sum(-1), grad_sq(grid, traj).sum(-1)


def _trapezoid(y: np.ndarray, dt: float) -> np.ndarray:
    if y.shape[-1] < 2:
        return np.zeros(y.shape[:-1])
    return dt * (y.sum(-1) - 0.5 * (y[..., 0] + y[..., -1]))


def x_norm(grid: GridSpec, traj, dt: float) -> np.ndarray:
    """Trajectory norm with the running supremum of ``||grad q||^2`` inside the integral.

    ``traj`` has shape ``(..., n_t, 2, N, N)`` sampled every ``dt``.
    """
    q2, g2 = _trajectory_sq(grid, traj)
    running = np.maximum.accumulate(g2, axis=-1)
    return np.sqrt(q2.max(-1) + _trapezoid(running, dt))


def x_norm_conventional(grid: GridSpec, traj, dt: float) -> np.ndarray:
    """``(sup ||q||^2 + int ||grad q||^2)^(1/2)``, the usual C(H) ∩ L^2(H^1_0) norm."""
    q2, g2 = _trajectory_sq(grid, traj)
    return np.sqrt(q2.max(-1) + _trapezoid(g2, dt))


def evaluate(grid: GridSpec, coeffs, x, y) -> np.ndarray:
    """Direct evaluation of the sine series at arbitrary points."""
    coeffs = grid.check(coeffs)
    a = math.pi / grid.L
    sx = np.sin(a * np.multiply.outer(np.asarray(x, float), grid.k))
    sy = np.sin(a * np.multiply.outer(np.asarray(y, float), grid.k))
    return np.einsum("...i,...j,...ij->...", sx, sy, coeffs)


# --- layered fields -------------------------------------------------------


@dataclass(frozen=True)
class LayeredField:
    """Two-layer field stored as ``(2, N, N)`` sine coefficients."""

    grid: GridSpec
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.grid.check(self.coeffs), dtype=float)
        if c.shape != (2,) + self.grid.shape:
            raise GridMismatchError(f"layered field needs shape (2, N, N), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "LayeredField":
        return cls(grid, np.zeros((2,) + grid.shape))

    @classmethod
    def from_values(cls, grid: GridSpec, values) -> "LayeredField":
        return cls(grid, to_spectral(grid, values))

    @classmethod
    def mode(cls, grid, kx, ky, layer=0, amplitude=1.0) -> "LayeredField":
        c = np.zeros((2,) + grid.shape)
        c[layer, kx - 1, ky - 1] = amplitude
        return cls(grid, c)

    def values(self) -> np.ndarray:
        return to_grid(self.grid, self.coeffs)

    def _other(self, other):
        if isinstance(other, LayeredField):
            if other.grid != self.grid:
                raise GridMismatchError("layers live on different grids")
            return other.coeffs
        return other

    def __add__(self, other):
        return LayeredField(self.grid, self.coeffs + self._other(other))

    def __sub__(self, other):
        return LayeredField(self.grid, self.coeffs - self._other(other))

    def __mul__(self, scalar):
        return LayeredField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return LayeredField(self.grid, -self.coeffs)

    def inner(self, other: "LayeredField") -> float:
        return float(inner_product(self.grid, self.coeffs, self._other(other)).sum())

    def l2(self) -> float:
        return float(np.sqrt(l2_sq(self.grid, self.coeffs).sum()))

    def grad_norm(self) -> float:
        return float(np.sqrt(grad_sq(self.grid, self.coeffs).sum()))

    def h2_norm(self) -> float:
        return float(np.sqrt(h2_sq(self.grid, self.coeffs).sum()))


# --- snapshot files -------------------------------------------------------

_MAGIC = "qg2 field v1"


def write_snapshot(path, data, grid: GridSpec, kind: str = "q", **extra) -> None:
    """Write a header line plus little-endian float64 coefficients.

    Fields use ``kind`` q or psi with ``2 N N`` values in layer-major,
    row-major order; controls add ``nt``/``m`` header entries.
    """
    data = np.ascontiguousarray(data, dtype="<f8")
    if kind in ("q", "psi") and data.shape != (2,) + grid.shape:
        raise GridMismatchError(f"snapshot of kind {kind} needs shape (2, N, N)")
    header = f"{_MAGIC} N={grid.N} L={grid.L!r} layers=2 kind={kind}"
    for key, val in extra.items():
        header += f" {key}={val}"
    with open(Path(path), "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(data.tobytes(order="C"))


def read_snapshot(path):
    """Return ``(data, grid, meta)`` from a snapshot file."""
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    text = head.decode("ascii")
    if not text.startswith(_MAGIC):
        raise ValueError(f"{path}: not a qg2 snapshot")
    meta = dict(tok.split("=", 1) for tok in text[len(_MAGIC):].split())
    grid = GridSpec(int(meta["N"]), float(meta["L"]))
    data = np.frombuffer(body, dtype="<f8").astype(float)
    if meta["kind"] in ("q", "psi"):
        data = data.reshape((2,) + grid.shape)
    else:
        data = data.reshape(int(meta["nt"]), 2, int(meta["m"]))
    return data, grid, meta
