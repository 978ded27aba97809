"""Per-bin Kalman state, linear prediction, and the decorrelation sandwich.

The joint state stacks ``p`` speech lags then ``q`` noise lags (log
amplitudes). The phase part is only the complex first moment ``mu`` of
``exp(j*phi)``; its variance is always ``1 - |mu|^2`` and never stored.

Batched functions take a leading batch axis (one row per frequency bin)
and return repair/failure masks instead of raising, so one bad bin never
aborts a file. The dataclass-level functions wrap them for single bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from modkf.ar import ArModel, ComplexAr1, joint_transition
from modkf.circular import FirstCircularMoment, wn_first_moment, wn_from_moment, WrappedNormal
from modkf.errors import NumericError

PSD_TOL = 1e-9
SYM_TOL = 1e-10
PA_RIDGE = 1e-9
COND_LIMIT = 1e12


@dataclass
class BinKfState:
    joint_mean: np.ndarray
    joint_cov: np.ndarray
    phase_moment: FirstCircularMoment
    p: int
    q: int

    def __post_init__(self):
        d = self.p + self.q
        self.joint_mean = np.asarray(self.joint_mean, dtype=np.float64)
        self.joint_cov = np.asarray(self.joint_cov, dtype=np.float64)
        if self.joint_mean.shape != (d,) or self.joint_cov.shape != (d, d):
            raise ValueError(f"state dimensions do not match p+q={d}")
        if not isinstance(self.phase_moment, FirstCircularMoment):
            self.phase_moment = FirstCircularMoment(complex(self.phase_moment))

    @property
    def phase_variance(self) -> float:
        return self.phase_moment.variance

    @property
    def speech(self) -> float:
        return float(self.joint_mean[0])

    @property
    def noise(self) -> float:
        return float(self.joint_mean[self.p])


@dataclass
class DecorrelatedState:
    """State after the transform ``D``: leading block (current-frame
    elements) uncorrelated with the remaining lags."""

    transformed_mean: np.ndarray
    block_A: np.ndarray
    block_C: np.ndarray
    transform: np.ndarray
    gain: np.ndarray
    order: np.ndarray
    ridge: bool = False


# -- covariance hygiene -----------------------------------------------------------


def repair_psd(cov, tol: float = PSD_TOL):
    """Symmetrise and clip eigenvalues below zero.

    Returns ``(cov, repaired)``; ``repaired`` marks matrices whose minimum
    eigenvalue was below ``-tol``. Tiny negative eigenvalues are clipped
    silently.
    """
    c = np.asarray(cov, dtype=np.float64)
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    w, V = np.linalg.eigh(c)
    repaired = w[..., 0] < -tol
    fix = w[..., 0] < 0
    if np.any(fix):
        rebuilt = (V * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
        rebuilt = 0.5 * (rebuilt + np.swapaxes(rebuilt, -1, -2))
        c = np.where(fix[..., None, None], rebuilt, c)
    return c, repaired


# -- prediction ---------------------------------------------------------------------


def predict_joint_batch(mean, cov, A, Q, zeta):
    """``mu' = A (mu - zeta) + zeta``, ``P' = A P A^T + Q`` over a batch."""
    mean = np.asarray(mean, dtype=np.float64)
    d = mean - zeta
    mu = np.einsum("bij,bj->bi", A, d) + zeta
    P = A @ cov @ np.swapaxes(A, -1, -2) + Q
    P, repaired = repair_psd(P)
    return mu, P, repaired


def predict_joint(state: BinKfState, speech: ArModel, noise: ArModel) -> BinKfState:
    """Linear speech/noise prediction of one bin's joint state."""
    if speech.order != state.p or noise.order != state.q:
        raise ValueError("AR orders do not match the state dimensions")
    A, Q, zeta = joint_transition(speech, noise)
    mu, P, _ = predict_joint_batch(
        state.joint_mean[None], state.joint_cov[None], A[None], Q[None], zeta[None]
    )
    return BinKfState(mu[0], P[0], state.phase_moment, state.p, state.q)


def predict_phase_batch(moment, A, eps):
    """Phase prediction over arrays of moments.

    Rotate/shrink by ``A`` (clamped to ``|A| <= 1``), then add ``eps`` to the
    wrapped-normal variance: the result is ``A*mu*exp(-eps/2)``. Returns
    ``(moment, clamped)``.
    """
    A = np.asarray(A, dtype=np.complex128)
    mag = np.abs(A)
    clamped = mag > 1.0
    A = np.where(clamped, A / np.where(clamped, mag, 1.0), A)
    check = A * np.asarray(moment, dtype=np.complex128)
    r = np.abs(check)
    with np.errstate(divide="ignore"):
        var = -2.0 * np.log(r)  # inf for r == 0
        out = np.exp(1j * np.angle(check) - 0.5 * (var + eps))
    out = np.where(r > 0, out, 0.0)
    return out, clamped


def predict_phase(moment: FirstCircularMoment, model: ComplexAr1) -> FirstCircularMoment:
    """Complex AR(1) prediction of the phase moment through the wrapped
    normal: rotate by ``A``, add ``eps`` to the WN variance, map back."""
    A = complex(model.coefficient)
    if abs(A) > 1.0:
        A /= abs(A)
    check = A * moment.value
    if check == 0:
        return FirstCircularMoment(0j)
    wn = wn_from_moment(check)
    return wn_first_moment(WrappedNormal(wn.mean, wn.variance + model.innovation_variance))


# -- decorrelation / recorrelation --------------------------------------------------


def current_first_order(p: int, q: int) -> np.ndarray:
    """Permutation putting ``s_t`` and ``n_t`` first (``q = 0``: only ``s_t``)."""
    if q == 0:
        return np.arange(p)
    rest = [i for i in range(p + q) if i not in (0, p)]
    return np.array([0, p] + rest)


def decorrelate_batch(mean, cov, order, k: int):
    """Decorrelate the first ``k`` elements (after permutation ``order``).

    Returns ``(mean_t, PA, PC_breve, gain, ridge)`` where ``gain =
    P_B P_A^{-1}`` defines ``C = [[I, 0], [-gain, I]]``.
    """
    m = np.asarray(mean)[..., order]
    P = np.asarray(cov)[..., order[:, None], order[None, :]]
    PA = P[..., :k, :k]
    PB = P[..., k:, :k]
    PC = P[..., k:, k:]
    tr = np.trace(PA, axis1=-2, axis2=-1)
    ev = np.linalg.eigvalsh(PA)
    ridge = (ev[..., 0] <= 0) | (ev[..., -1] > COND_LIMIT * np.maximum(ev[..., 0], 1e-300))
    PA_inv_src = PA + np.where(ridge, PA_RIDGE * np.maximum(tr, 1e-12), 0.0)[..., None, None] * np.eye(k)
    # gain = PB PA^{-1}  (PA symmetric)
    gain = np.swapaxes(np.linalg.solve(PA_inv_src, np.swapaxes(PB, -1, -2)), -1, -2)
    mt = m.copy()
    mt[..., k:] = m[..., k:] - np.einsum("...ij,...j->...i", gain, m[..., :k])
    PCb = PC - gain @ np.swapaxes(PB, -1, -2)
    PCb = 0.5 * (PCb + np.swapaxes(PCb, -1, -2))
    return mt, PA, PCb, gain, ridge


def recorrelate_batch(mean_t, block_A, block_C, gain, order):
    """Inverse of :func:`decorrelate_batch` with updated leading blocks."""
    k = block_A.shape[-1]
    d = mean_t.shape[-1]
    m = mean_t.copy()
    m[..., k:] = mean_t[..., k:] + np.einsum("...ij,...j->...i", gain, mean_t[..., :k])
    P = np.zeros(block_A.shape[:-2] + (d, d))
    P[..., :k, :k] = block_A
    GA = gain @ block_A
    P[..., k:, :k] = GA
    P[..., :k, k:] = np.swapaxes(GA, -1, -2)
    P[..., k:, k:] = block_C + GA @ np.swapaxes(gain, -1, -2)
    inv = np.argsort(order)
    m = m[..., inv]
    P = P[..., inv[:, None], inv[None, :]]
    P, repaired = repair_psd(P)
    return m, P, repaired


def transform_matrix(gain, order) -> np.ndarray:
    """Dense ``D = C B`` for one bin (diagnostics and tests)."""
    d = order.size
    k = d - gain.shape[0]
    B = np.eye(d)[order]
    C = np.eye(d)
    C[k:, :k] = -gain
    return C @ B


def decorrelate(prior: BinKfState) -> DecorrelatedState:
    order = current_first_order(prior.p, prior.q)
    k = 2 if prior.q else 1
    mt, PA, PCb, gain, ridge = decorrelate_batch(prior.joint_mean, prior.joint_cov, order, k)
    return DecorrelatedState(mt, PA, PCb, transform_matrix(gain, order), gain, order, bool(ridge))


def recorrelate(updated: DecorrelatedState, p: int, q: int,
                phase_moment: FirstCircularMoment | None = None) -> BinKfState:
    """Undo the decorrelation; ``updated.block_A`` may hold a posterior."""
    if np.linalg.cond(updated.transform) > COND_LIMIT:
        raise NumericError("decorrelation transform is ill-conditioned")
    m, P, _ = recorrelate_batch(
        updated.transformed_mean, updated.block_A, updated.block_C, updated.gain, updated.order
    )
    return BinKfState(m, P, phase_moment or FirstCircularMoment(0j), p, q)


# -- initialisation -------------------------------------------------------------------


def initial_state_batch(s0, n0, theta0, p: int, q: int, var: float = 1.0,
                        phase_confidence: float = 0.5):
    """Initial joint mean (``s0`` repeated p times, ``n0`` q times), unit
    diagonal covariance, and phase moment ``0.5 exp(j theta0)``."""
    s0 = np.asarray(s0, dtype=np.float64)
    B = s0.shape[0]
    mean = np.concatenate([np.repeat(s0[:, None], p, 1), np.repeat(np.asarray(n0)[:, None], q, 1)], 1)
    cov = np.repeat(np.eye(p + q)[None] * var, B, 0)
    phase = phase_confidence * np.exp(1j * np.asarray(theta0, dtype=np.float64))
    return mean, cov, phase
