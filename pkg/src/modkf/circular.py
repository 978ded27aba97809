"""Circular distributions used by the phase tracker.

Everything is parametrised through the complex first circular moment
``E{exp(j*phi)}``: a von Mises or wrapped normal is converted to and from
that moment, and the phase factor ``alpha = cos(gamma)`` of a uniformly
distributed phase difference has its own arcsine density and quadrature
nodes.

Array functions (``bessel_ratio``, ``invert_bessel_ratio`` ...) work
elementwise on numpy arrays; the small dataclasses wrap scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ive

TWO_PI = 2.0 * math.pi

# kappa is capped here; moments beyond bessel_ratio(KAPPA_MAX) count as saturated
KAPPA_MAX = 1.0e6
_NEWTON_TOL = 1e-10


def wrap_angle(x):
    """Map angles to [-pi, pi)."""
    return (np.asarray(x) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class FirstCircularMoment:
    value: complex

    def __post_init__(self):
        if abs(self.value) > 1.0 + 1e-12:
            raise ValueError(f"|first circular moment| = {abs(self.value)} exceeds 1")

    @property
    def mean(self) -> float:
        return math.atan2(self.value.imag, self.value.real)

    @property
    def resultant(self) -> float:
        return abs(self.value)

    @property
    def variance(self) -> float:
        """Variance of the unit phasor, ``1 - |m|^2``."""
        return 1.0 - abs(self.value) ** 2


@dataclass(frozen=True)
class VonMises:
    mean: float
    concentration: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.concentration >= 0:
            raise ValueError("concentration must be nonnegative")


@dataclass(frozen=True)
class WrappedNormal:
    mean: float
    variance: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError("variance must be nonnegative")


@dataclass(frozen=True)
class SigmaPointSet:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be matching 1-D arrays")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(np.abs(nodes) > 1.0):
            raise ValueError("phase-factor nodes must lie in [-1, 1]")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.nodes.size

    def expect(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


# -- von Mises -----------------------------------------------------------------


def bessel_ratio(kappa):
    """``I1(kappa) / I0(kappa)`` without overflow (scaled Bessel functions)."""
    k = np.asarray(kappa, dtype=np.float64)
    return ive(1, k) / ive(0, k)


def _ratio_seed(r):
    # Best & Fisher piecewise approximation to the inverse ratio
    r = np.asarray(r, dtype=np.float64)
    small = 2 * r + r**3 + 5 * r**5 / 6
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        mid = -0.4 + 1.39 * r + 0.43 / (1 - r)
        large = 1.0 / (r**3 - 4 * r**2 + 3 * r)
    return np.where(r < 0.53, small, np.where(r < 0.85, mid, large))


def invert_bessel_ratio(r):
    """Solve ``bessel_ratio(kappa) = r`` for kappa.

    Returns ``(kappa, saturated)``; entries with ``r`` at or beyond
    ``bessel_ratio(KAPPA_MAX)`` are capped at ``KAPPA_MAX`` and flagged.
    """
    r = np.asarray(r, dtype=np.float64)
    rmax = float(bessel_ratio(KAPPA_MAX))
    saturated = r >= rmax
    rr = np.clip(r, 0.0, rmax)
    kappa = np.clip(_ratio_seed(rr), 0.0, KAPPA_MAX)
    lo = np.zeros_like(kappa)
    hi = np.full_like(kappa, KAPPA_MAX)
    for _ in range(100):
        a = bessel_ratio(kappa)
        f = a - rr
        lo = np.where(f < 0, kappa, lo)
        hi = np.where(f >= 0, kappa, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            deriv = np.where(kappa > 0, 1.0 - a / kappa - a * a, 0.5)
            step = f / deriv
        nxt = kappa - step
        bad = ~np.isfinite(nxt) | (nxt <= lo) | (nxt >= hi)
        nxt = np.where(bad, 0.5 * (lo + hi), nxt)
        done = np.abs(nxt - kappa) <= _NEWTON_TOL * np.maximum(1.0, kappa)
        kappa = nxt
        if np.all(done):
            break
    kappa = np.where(rr <= 0, 0.0, kappa)
    kappa = np.where(saturated, KAPPA_MAX, kappa)
    return kappa, saturated


def vm_density(phi, d: VonMises):
    """von Mises density ``exp(k cos(phi - mu)) / (2 pi I0(k))``."""
    phi = np.asarray(phi, dtype=np.float64)
    k = d.concentration
    # exp(k cos x) / I0(k) = exp(k (cos x - 1)) / ive(0, k)
    out = np.exp(k * (np.cos(phi - d.mean) - 1.0)) / (TWO_PI * ive(0, k))
    return out if out.ndim else float(out)


def vm_first_moment(d: VonMises) -> FirstCircularMoment:
    r = float(bessel_ratio(d.concentration))
    return FirstCircularMoment(complex(r * math.cos(d.mean), r * math.sin(d.mean)))


def vm_from_moment(m: FirstCircularMoment | complex) -> VonMises:
    """von Mises with the given first moment.

    Saturated moments (``|m|`` too close to 1 to invert) come back with
    ``concentration = KAPPA_MAX`` and ``degenerate=True``.
    """
    z = m.value if isinstance(m, FirstCircularMoment) else complex(m)
    kappa, sat = invert_bessel_ratio(abs(z))
    mean = float(wrap_angle(math.atan2(z.imag, z.real)))
    return VonMises(mean, float(kappa), degenerate=bool(sat))


# -- wrapped normal --------------------------------------------------------------


def wn_density(phi, d: WrappedNormal):
    """Wrapped normal density, wrapping sum truncated at
    ``|k| <= max(3, ceil(5 sigma / 2pi))``."""
    phi = np.asarray(phi, dtype=np.float64)
    if d.variance == 0:
        raise ValueError("wrapped normal with zero variance has no density")
    sigma = math.sqrt(d.variance)
    kmax = max(3, math.ceil(5 * sigma / TWO_PI))
    k = np.arange(-kmax, kmax + 1).reshape((-1,) + (1,) * phi.ndim)
    terms = np.exp(-((phi - d.mean + TWO_PI * k) ** 2) / (2 * d.variance))
    out = terms.sum(axis=0) / (sigma * math.sqrt(TWO_PI))
    return out if out.ndim else float(out)


def wn_first_moment(d: WrappedNormal) -> FirstCircularMoment:
    return FirstCircularMoment(complex(np.exp(1j * d.mean - 0.5 * d.variance)))


def wn_from_moment(m: FirstCircularMoment | complex) -> WrappedNormal:
    """Wrapped normal ``WN(arg m, -2 log|m|)``.

    ``m = 0`` has no finite-variance match; the uniform sentinel
    ``WrappedNormal(0, inf, degenerate=True)`` is returned.
    """
    z = m.value if isinstance(m, FirstCircularMoment) else complex(m)
    r = abs(z)
    if r == 0.0:
        return WrappedNormal(0.0, math.inf, degenerate=True)
    mean = float(wrap_angle(math.atan2(z.imag, z.real)))
    return WrappedNormal(mean, max(0.0, -2.0 * math.log(min(r, 1.0))))


# -- phase factor ------------------------------------------------------------------


def phase_factor_density(alpha):
    """Arcsine density of ``cos(gamma)`` for uniform ``gamma``; 0 for |alpha| >= 1."""
    a = np.asarray(alpha, dtype=np.float64)
    inside = np.abs(a) < 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inside, 1.0 / (math.pi * np.sqrt(1.0 - a * a)), 0.0)
    return out if out.ndim else float(out)


def phase_factor_moment(c: int) -> float:
    """``E{alpha^c}``: ``2^-c c! / ((c/2)!)^2`` for even c, else 0."""
    if c < 0:
        raise ValueError("moment order must be nonnegative")
    if c % 2:
        return 0.0
    return math.comb(c, c // 2) / 2.0**c


def chebyshev_points(R: int) -> SigmaPointSet:
    """R-node Gauss-Chebyshev rule for the phase-factor density.

    Exact for polynomials in alpha up to degree ``2R - 1``.
    """
    if R < 1:
        raise ValueError("need at least one node")
    i = np.arange(1, R + 1)
    nodes = np.cos((2 * i - 1) * math.pi / (2 * R))
    # enforce exact symmetry (and an exact 0 for odd R)
    nodes = 0.5 * (nodes - nodes[::-1])
    return SigmaPointSet(nodes, np.full(R, 1.0 / R))


def sigma_points(R: int) -> SigmaPointSet:
    """Sigma points for the phase factor, R in {1, 3, 5}.

    R=3 gives nodes ``{0, +-sqrt(0.75)}`` with weights 1/3.
    """
    if R not in (1, 3, 5):
        raise ValueError(f"unsupported sigma-point count {R}; use 1, 3 or 5")
    return chebyshev_points(R)


def fixed_alpha(alpha: float) -> SigmaPointSet:
    """Single-node set pinning the phase factor (alpha=0 power, 1 amplitude)."""
    return SigmaPointSet(np.array([float(alpha)]), np.array([1.0]))
