"""Trace-class Wiener forcing and the noise-intensity operators.

The covariance ``Q`` is diagonal in the sine basis with eigenvalues
``c * lam_k^(-s)`` on the ``m`` lowest modes of each enabled layer. Noise
and controls are expressed in orthonormal eigen-coordinates ``(..., 2, m)``;
a unit coordinate embeds as the field ``(2/L) sin sin``.

``sigma`` is either additive (identity embedding) or multiplicative,
``(a + b tanh(q_i)) * w_i`` evaluated pointwise on the padded grid. The
multiplicative operator ``w -> P[(a + b tanh q) w]`` is symmetric in
coefficient space because the type-I sine transform is orthogonal, which is
what the adjoint relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from . import spectral as sp
from .model import QGModel
from .rng import Stream
from .spectral import GridSpec

__all__ = [
    "NoiseSpec",
    "NoiseBasis",
    "NoiseIncrement",
    "AssumptionReport",
    "noise_trace",
    "sample_increment",
    "apply_sigma",
    "h0_norm",
    "validate_assumptions",
    "step_em",
    "step_controlled",
]

KINDS = ("additive", "multiplicative")


@dataclass(frozen=True)
class NoiseSpec:
    """Spectrum of ``Q`` and the form of ``sigma``.

    ``c`` may be a scalar or a per-layer pair. ``m`` is the number of
    retained eigenmodes per layer; ``None`` keeps every mode with
    ``lam <= lam_max / 4`` and ``math.inf`` stands for the untruncated
    operator (all grid modes simulated, trace summed to infinity).
    ``tilde`` optionally gives ``(kind, a, b)`` for the control intensity;
    by default it equals ``sigma``.
    """

    c: float | tuple[float, float] = 1.0
    s: float = 1.0
    m: int | float | None = None
    kind: str = "additive"
    a: float = 1.0
    b: float = 0.0
    layers: tuple[bool, bool] = (True, True)
    tilde: tuple | None = None

    def __post_init__(self):
        c = self.c if isinstance(self.c, (tuple, list)) else (self.c, self.c)
        if len(c) != 2 or min(c) < 0:
            raise ValueError("noise amplitude c must be >= 0 (scalar or per-layer pair)")
        object.__setattr__(self, "c", tuple(float(x) for x in c))
        object.__setattr__(self, "layers", tuple(bool(x) for x in self.layers))
        if self.m is not None and self.m != math.inf:
            if int(self.m) != self.m or self.m < 1:
                raise ValueError(f"noise.m must be a positive integer, got {self.m!r}")
            object.__setattr__(self, "m", int(self.m))
        if self.m == math.inf and self.s <= 1:
            raise ValueError(f"divergent trace: unbounded m needs s > 1, got s={self.s}")
        for kind, a, b in [(self.kind, self.a, self.b)] + ([tuple(self.tilde)] if self.tilde else []):
            if kind not in KINDS:
                raise ValueError(f"unknown sigma kind {kind!r}")
            if kind == "multiplicative" and not (a > 0 and b >= 0 and a - b > 0):
                raise ValueError("multiplicative sigma needs a > 0, b >= 0, a - b > 0")
        if self.tilde is not None:
            object.__setattr__(self, "tilde", tuple(self.tilde))

    @property
    def tilde_form(self) -> tuple:
        return self.tilde if self.tilde is not None else (self.kind, self.a, self.b)

    def basis(self, grid: GridSpec) -> "NoiseBasis":
        return _basis(self, grid)


@dataclass(frozen=True)
class NoiseIncrement:
    coeffs: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt >= 0:
            raise ValueError("dt must be non-negative")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite noise increment")


@lru_cache(maxsize=64)
def _basis(spec: NoiseSpec, grid: GridSpec) -> "NoiseBasis":
    return NoiseBasis(spec, grid)


class NoiseBasis:
    """Retained ``Q``-eigenmodes of one spec on one grid."""

    def __init__(self, spec: NoiseSpec, grid: GridSpec):
        self.spec = spec
        self.grid = grid
        lam = grid.lam.ravel()
        ix, iy = np.unravel_index(np.arange(lam.size), grid.shape)
        order = np.lexsort((iy, ix, lam))
        if spec.m is None:
            m = int(np.count_nonzero(lam <= lam.max() / 4))
        elif spec.m == math.inf:
            m = lam.size
        else:
            if spec.m > lam.size:
                raise ValueError(f"noise.m={spec.m} exceeds the {lam.size} grid modes")
            m = spec.m
        order = order[:m]
        self.m = m
        self.ix = ix[order]
        self.iy = iy[order]
        self.lam = lam[order]
        mask = np.array(spec.layers)[:, None] & np.ones(m, dtype=bool)
        amp = np.array(spec.c)[:, None]
        self.eig = np.where(mask, amp * self.lam[None, :] ** (-spec.s), 0.0)
        self.mask = mask & (self.eig > 0)
        self.scale = 2.0 / grid.L

    # -- embedding -------------------------------------------------------

    def embed(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape[:-1] + self.grid.shape)
        out[..., self.ix, self.iy] = self.scale * w
        return out

    def embed_T(self, r) -> np.ndarray:
        return self.scale * np.asarray(r)[..., self.ix, self.iy]

    def coords(self, field_coeffs) -> np.ndarray:
        """Eigen-coordinates of a field supported on the retained modes."""
        f = self.grid.check(field_coeffs)
        coords = f[..., self.ix, self.iy] / self.scale
        rest = f.copy()
        rest[..., self.ix, self.iy] = 0.0
        if np.any(rest != 0):
            raise ValueError("field has support outside the retained noise modes")
        return coords

    # -- sigma -------------------------------------------------------------

    def _form(self, tilde: bool):
        return self.spec.tilde_form if tilde else (self.spec.kind, self.spec.a, self.spec.b)

    def _gain(self, q, a, b):
        return a + b * np.tanh(sp.synthesize(self.grid, q))

    def apply(self, q, w, tilde: bool = False) -> np.ndarray:
        """``sigma(q) w`` as field coefficients."""
        kind, a, b = self._form(tilde)
        f = self.embed(w)
        if kind == "additive":
            return f
        vals = self._gain(q, a, b) * sp.synthesize(self.grid, f)
        return sp.project(self.grid, vals)

    def apply_field(self, q, f, tilde: bool = False) -> np.ndarray:
        """``sigma(q)`` acting on a field already embedded in ``H``."""
        kind, a, b = self._form(tilde)
        if kind == "additive":
            return f
        return sp.project(self.grid, self._gain(q, a, b) * sp.synthesize(self.grid, f))

    def apply_T(self, q, r, tilde: bool = False) -> np.ndarray:
        """Transpose of ``w -> sigma(q) w`` in coefficient space."""
        return self.embed_T(self.apply_field(q, r, tilde))

    def state_vjp(self, q, w, r, tilde: bool = False) -> np.ndarray:
        """Transpose of ``dq -> d/dq[sigma(q) w] dq`` applied to ``r``."""
        kind, a, b = self._form(tilde)
        if kind == "additive" or b == 0:
            return np.zeros(np.shape(r))
        g = self.grid
        qv = sp.synthesize(g, q)
        sech2 = 1.0 - np.tanh(qv) ** 2
        vals = b * sech2 * sp.synthesize(g, self.embed(w)) * sp.synthesize(g, r)
        return sp.project(g, vals)

    # -- norms -------------------------------------------------------------

    def h0_norm(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if h.shape[-2:] == self.grid.shape:
            h = self.coords(h)
        if np.any(h[..., ~self.mask] != 0):
            raise ValueError("control has support outside the retained noise modes")
        inv = np.where(self.mask, 1.0 / np.where(self.mask, self.eig, 1.0), 0.0)
        return np.sqrt(np.sum(h * h * inv, axis=(-2, -1)))

    @cached_property
    def inv_eig(self) -> np.ndarray:
        return np.where(self.mask, 1.0 / np.where(self.mask, self.eig, 1.0), 0.0)

    def lq_norm_sq(self, q, grad: bool = False, other=None) -> float:
        """``tr(S Q S*)`` for ``S = sigma(q)`` (or ``sigma(q) - sigma(other)``).

        With ``grad`` the image is measured in ``H^1_0``.
        """
        total = 0.0
        eye = np.eye(self.m)
        for layer in range(2):
            if not self.mask[layer].any():
                continue
            w = np.zeros((self.m, 2, self.m))
            w[:, layer, :] = eye
            img = self.apply(q, w)
            if other is not None:
                img = img - self.apply(other, w)
            norm = sp.grad_sq if grad else sp.l2_sq
            total += float(np.sum(self.eig[layer] * norm(self.grid, img[:, layer])))
        return total


def noise_trace(spec: NoiseSpec, grid: GridSpec) -> float:
    """``tr(Q)`` summed over enabled layers; the full series when ``m`` is unbounded."""
    if spec.m != math.inf:
        return float(spec.basis(grid).eig.sum())
    a2 = (math.pi / grid.L) ** 2
    K = 2000
    k = np.arange(1, K + 1, dtype=float)
    partial = 0.0
    for row in np.array_split(k, 20):
        partial += float(np.sum((a2 * (row[:, None] ** 2 + k[None, :] ** 2)) ** (-spec.s)))
    # quarter-annulus tail beyond radius K
    tail = a2 ** (-spec.s) * (math.pi / 2) * K ** (2 - 2 * spec.s) / (2 * spec.s - 2)
    per_layer = partial + tail
    return float(sum(c * per_layer for c, on in zip(spec.c, spec.layers) if on))


def sample_increment(basis: NoiseBasis, dt: float, stream: Stream, step: int, traj_ids=(0,)) -> NoiseIncrement:
    """Wiener increment with variance ``q_k dt`` per retained mode and layer."""
    xi = stream.normals(traj_ids, step, 2 * basis.m).reshape(-1, 2, basis.m)
    return NoiseIncrement(np.sqrt(basis.eig * dt) * xi, dt)


def apply_sigma(basis: NoiseBasis, q, w, tilde: bool = False) -> np.ndarray:
    if isinstance(w, NoiseIncrement):
        w = w.coeffs
    return basis.apply(basis.grid.check(q), w, tilde)


def h0_norm(h, basis: NoiseBasis):
    return basis.h0_norm(h)


# --- Assumption A checks --------------------------------------------------


@dataclass
class AssumptionReport:
    kind: str
    n_samples: int
    trace: float
    growth_K: float
    lipschitz_L: float
    growth_K_prime: float
    growth_by_bin: list = field(default_factory=list)
    lipschitz_by_bin: list = field(default_factory=list)
    growth_violation: bool = False
    lipschitz_violation: bool = False

    @property
    def ok(self) -> bool:
        return (
            math.isfinite(self.growth_K)
            and math.isfinite(self.lipschitz_L)
            and not (self.growth_violation or self.lipschitz_violation)
        )


def _random_shape(grid: GridSpec, rng) -> np.ndarray:
    c = rng.standard_normal((2,) + grid.shape) / grid.lam
    return c / math.sqrt(sp.l2_sq(grid, c).sum())


def _grows(by_bin) -> bool:
    lower = max(by_bin[:-1]) if len(by_bin) > 1 else 0.0
    return by_bin[-1] > 1.5 * lower + 1e-12


def validate_assumptions(spec: NoiseSpec, grid: GridSpec, n_samples: int = 200, seed: int = 0, bins: int = 4) -> AssumptionReport:
    """Empirical growth (A.2), Lipschitz (A.3) and H^1 growth (A'.2) constants.

    Samples span field magnitudes from 1e-2 to 1e2; a statistic that is
    larger in the top magnitude bin than 1.5x the rest is flagged as growing.
    """
    if n_samples < 100:
        raise ValueError("validate_assumptions needs at least 100 samples")
    basis = spec.basis(grid)
    rng = np.random.default_rng(seed)
    mags, growth, lips, kprime = [], [], [], []
    for _ in range(n_samples):
        mag = 10 ** rng.uniform(-2, 2)
        q = mag * _random_shape(grid, rng)
        d = 10 ** rng.uniform(-3, 0) * mag * _random_shape(grid, rng)
        qn2 = float(sp.l2_sq(grid, q).sum())
        gn2 = float(sp.grad_sq(grid, q).sum())
        growth.append(basis.lq_norm_sq(q) / (1.0 + qn2))
        kprime.append(basis.lq_norm_sq(q, grad=True) / (1.0 + gn2))
        if spec.kind == "additive":
            lips.append(0.0)
        else:
            lips.append(basis.lq_norm_sq(q + d, other=q) / float(sp.l2_sq(grid, d).sum()))
        mags.append(qn2)
    order = np.argsort(mags)
    growth, lips = np.array(growth)[order], np.array(lips)[order]
    g_bins = [float(x.max()) for x in np.array_split(growth, bins)]
    l_bins = [float(x.max()) for x in np.array_split(lips, bins)]
    return AssumptionReport(
        kind=spec.kind,
        n_samples=n_samples,
        trace=float(basis.eig.sum()),
        growth_K=float(growth.max()),
        lipschitz_L=float(lips.max()),
        growth_K_prime=float(max(kprime)),
        growth_by_bin=g_bins,
        lipschitz_by_bin=l_bins,
        growth_violation=_grows(g_bins),
        lipschitz_violation=_grows(l_bins),
    )


# --- stochastic steppers ----------------------------------------------------


def _kick(basis, q, dW, eps):
    if eps == 0 or dW is None:
        return None
    if isinstance(dW, NoiseIncrement):
        dW = dW.coeffs
    return math.sqrt(eps) * basis.apply(q, dW)


def step_em(model: QGModel, basis: NoiseBasis, q, dt: float, eps: float, dW) -> np.ndarray:
    """Semi-implicit Euler-Maruyama step of ``dq = (...)dt + sqrt(eps) sigma(q) dW``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return model.advance(q, dt, kick=_kick(basis, q, dW, eps))


def step_controlled(model: QGModel, basis: NoiseBasis, q, h_t, dt: float, eps: float, dW) -> np.ndarray:
    """As :func:`step_em` with the extra drift ``sigma_tilde(q) h_t``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    h_t = np.asarray(h_t, dtype=float)
    extra = None
    if np.any(h_t != 0):
        def extra(x):
            return basis.apply(x, h_t, tilde=True)
    return model.advance(q, dt, extra=extra, kick=_kick(basis, q, dW, eps))
