"""Autoregressive models for modulation-domain tracks.

Log-spectral tracks get an AR(p) model with an explicit mean, fitted by
the covariance method (plain least squares over the window, no tapering,
no stability constraint). Unit-phasor phase tracks get a complex AR(1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from modkf.errors import DegenerateError, InputTooShortError

RIDGE_SCALE = 1e-8
PHASE_RESIDUAL_FLOOR = 1e-12
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class ArModel:
    """``x_t - mean = -sum_i coefficients[i] (x_{t-1-i} - mean) + w_t``,
    ``w_t ~ N(0, innovation_variance)``."""

    coefficients: np.ndarray
    mean: float
    innovation_variance: float
    ridge: bool = False

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.coefficients, dtype=np.float64))
        if a.ndim != 1 or a.size < 1:
            raise ValueError("AR order must be >= 1")
        if not np.all(np.isfinite(a)):
            raise ValueError("AR coefficients must be finite")
        if self.innovation_variance < 0:
            raise ValueError("innovation variance must be >= 0")
        object.__setattr__(self, "coefficients", a)

    @property
    def order(self) -> int:
        return self.coefficients.size

    def simulate(self, init, n: int, noise=None) -> np.ndarray:
        """Run the recursion forward from ``init`` (oldest first, length p)."""
        p = self.order
        x = list(np.asarray(init, dtype=np.float64)[-p:])
        for t in range(n):
            lags = np.array(x[-1 : -p - 1 : -1]) - self.mean
            nxt = self.mean - float(self.coefficients @ lags)
            if noise is not None:
                nxt += noise[t]
            x.append(nxt)
        return np.array(x[p:])


@dataclass(frozen=True)
class ComplexAr1:
    coefficient: complex
    innovation_variance: float

    def __post_init__(self):
        if self.innovation_variance < 0:
            raise ValueError("innovation variance must be >= 0")


# -- batched fitting -------------------------------------------------------------


def fit_ar_batch(windows, order: int):
    """Fit AR(order)-with-mean models to each row of ``windows``.

    Returns ``(coefficients (B, p), mean (B,), innovation_variance (B,),
    ridge (B,) bool)``. Rows whose normal matrix is singular are refitted
    with a ridge of ``1e-8 * trace`` and flagged.
    """
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    B, L = X.shape
    p = int(order)
    if p < 1:
        raise ValueError("AR order must be >= 1")
    if L <= 2 * p + 1:
        raise InputTooShortError(f"window of {L} samples too short for AR({p})")
    centre = X.mean(axis=1, keepdims=True)
    Xc = X - centre
    n_eq = L - p
    target = Xc[:, p:]
    design = np.empty((B, n_eq, p + 1))
    design[:, :, 0] = 1.0
    for i in range(1, p + 1):
        design[:, :, i] = Xc[:, p - i : L - i]
    G = np.einsum("bti,btj->bij", design, design)
    h = np.einsum("bti,bt->bi", design, target)

    ev = np.linalg.eigvalsh(G)
    ridge = (ev[:, 0] <= 0) | (ev[:, -1] > _COND_LIMIT * np.maximum(ev[:, 0], 1e-300))
    if ridge.any():
        lam = RIDGE_SCALE * np.trace(G[ridge], axis1=1, axis2=2)
        G = G.copy()
        G[ridge] += lam[:, None, None] * np.eye(p + 1)
    w = np.linalg.solve(G, h[..., None])[..., 0]

    resid = target - np.einsum("bti,bi->bt", design, w)
    eps = np.mean(resid**2, axis=1)
    b = w[:, 1:]
    denom = 1.0 - b.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(np.abs(denom) > 1e-8, w[:, 0] / denom, 0.0)
    mean = centre[:, 0] + shift
    return -b, mean, eps, ridge


def fit_ar_with_mean(window, order: int) -> ArModel:
    """Covariance-method AR(order) fit with jointly estimated mean."""
    a, mean, eps, ridge = fit_ar_batch(np.asarray(window, dtype=np.float64)[None, :], order)
    return ArModel(a[0], float(mean[0]), float(eps[0]), ridge=bool(ridge[0]))


def phase_variance_from_residual(r):
    """Map mean complex-AR residual power to a wrapped-normal variance step."""
    r = np.asarray(r, dtype=np.float64)
    return -2.0 * np.log(np.maximum(1.0 - r, PHASE_RESIDUAL_FLOOR))


def fit_complex_ar1_batch(windows):
    """Least-squares complex AR(1) per row; returns ``(A (B,), eps (B,))``.

    Rows with a vanishing denominator get ``A = 0`` and ``eps = inf``.
    """
    Z = np.asarray(windows, dtype=np.complex128)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[1] < 3:
        raise InputTooShortError("complex AR(1) needs at least 3 samples")
    prev, cur = Z[:, :-1], Z[:, 1:]
    den = np.sum(np.abs(prev) ** 2, axis=1)
    num = np.sum(cur * np.conj(prev), axis=1)
    ok = den > 1e-12
    A = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    r = np.mean(np.abs(cur - A[:, None] * prev) ** 2, axis=1)
    eps = np.where(ok, phase_variance_from_residual(r), np.inf)
    return A, eps


def fit_complex_ar1(window) -> ComplexAr1:
    z = np.asarray(window, dtype=np.complex128)
    if z.size < 3:
        raise InputTooShortError("complex AR(1) needs at least 3 samples")
    if np.any(np.abs(np.abs(z) - 1.0) > 1e-6):
        raise ValueError("complex AR(1) expects unit-magnitude phasors")
    if np.sum(np.abs(z[:-1]) ** 2) <= 1e-12:
        raise DegenerateError("vanishing denominator in complex AR(1) fit")
    A, eps = fit_complex_ar1_batch(z[None, :])
    return ComplexAr1(complex(A[0]), float(eps[0]))


# -- state-space form ------------------------------------------------------------


def companion_matrix(m: ArModel) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix (first row ``-a``, shifted identity below) and
    innovation covariance (``eps`` at (0, 0))."""
    p = m.order
    A = np.zeros((p, p))
    A[0] = -m.coefficients
    A[1:, :-1] = np.eye(p - 1)
    Q = np.zeros((p, p))
    Q[0, 0] = m.innovation_variance
    return A, Q


def joint_transition(speech: ArModel, noise: ArModel):
    """Block-diagonal transition, innovation covariance and mean vector for
    the stacked speech/noise state."""
    As, Qs = companion_matrix(speech)
    An, Qn = companion_matrix(noise)
    A = scipy.linalg.block_diag(As, An)
    Q = scipy.linalg.block_diag(Qs, Qn)
    zeta = np.concatenate([np.full(speech.order, speech.mean), np.full(noise.order, noise.mean)])
    return A, Q, zeta


def synthesize_ar(a, mean: float, n: int, init=None, innovations=None) -> np.ndarray:
    """Generate ``n`` samples of an AR-with-mean process (test helper)."""
    m = ArModel(np.asarray(a, dtype=np.float64), mean, 0.0)
    init = np.full(m.order, mean) if init is None else init
    return m.simulate(init, n, innovations)


__all__ = [
    "ArModel",
    "ComplexAr1",
    "companion_matrix",
    "fit_ar_batch",
    "fit_ar_with_mean",
    "fit_complex_ar1",
    "fit_complex_ar1_batch",
    "joint_transition",
    "phase_variance_from_residual",
    "synthesize_ar",
]
