"""Kalman update step: posterior of (s, n) and of the speech phase.

The phase-sensitive update integrates over ``u = n - s`` and the phase
factor ``alpha = cos(gamma)`` (``gamma`` the noise-minus-speech phase):
for each ``alpha`` node and each sign of ``gamma`` the observation pins
``s + n``, so the prior Gaussian over ``(s, n)`` and the von Mises phase
prior are evaluated along a curve parametrised by ``u``. The map
``(s, n, phi, psi) -> (u, y, gamma, theta)`` has unit Jacobian, so no
correction factor appears.

The inner ``u`` integral is a two-stage trapezoid rule: a coarse log-space
scan finds where the integrand lives, then nested doubling refines that
interval until the normaliser and moments settle. All weights are handled
in log space with max-subtraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import truncnorm

from modkf.circular import (
    FirstCircularMoment,
    SigmaPointSet,
    fixed_alpha,
    invert_bessel_ratio,
    sigma_points,
    wrap_angle,
)
from modkf.errors import DegenerateError, GeometryError
from modkf.kalman import repair_psd
from modkf.priors import Gaussian2

ACOS_SLACK = 1e-9
VAR_FLOOR = 1e-10
_SCAN_POINTS = 129
_SUPPORT_NEPERS = 46.0  # exp(-46) ~ 1e-20 of the peak
_ZOOM_PASSES, _ZOOM_TRIGGER = 6, 32
_MIN_LEVEL, _MAX_LEVEL = 6, 13  # refinement grids of 2**k + 1 points


class UpdateVariant(str, Enum):
    """Which quantities are tracked and which signal model the update uses."""

    SNPT = "snpt"
    ST = "st"
    SNT = "snt"
    AP = "ap"
    AA = "aa"
    APPG = "appg"
    AAAG = "aaag"

    @property
    def tracks_noise(self) -> bool:
        return self in (UpdateVariant.SNT, UpdateVariant.SNPT)

    @property
    def tracks_phase(self) -> bool:
        return self is UpdateVariant.SNPT

    @property
    def signal_model(self) -> str:
        return {
            UpdateVariant.AP: "power",
            UpdateVariant.APPG: "power",
            UpdateVariant.AA: "amplitude",
            UpdateVariant.AAAG: "amplitude",
        }.get(self, "stft")

    @classmethod
    def parse(cls, tag) -> "UpdateVariant":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower())
        except ValueError:
            raise ValueError(f"unknown update variant {tag!r}") from None


@dataclass
class Observation:
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError("observation must be finite")
        self.theta = float(wrap_angle(self.theta))


@dataclass
class JointPosterior:
    s_mean: float
    n_mean: float
    sn_cov: np.ndarray
    phase_moment: FirstCircularMoment | None = None
    flags: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.s_mean, self.n_mean])


# -- change of variables -----------------------------------------------------------


def log_mix(u, alpha):
    """``log(2 cosh(u) + 2 alpha)`` without overflow for large ``|u|``."""
    a = np.abs(np.asarray(u, dtype=np.float64))
    e = np.exp(-a)
    with np.errstate(divide="ignore", invalid="ignore"):
        return a + np.log1p(e * e + 2.0 * np.asarray(alpha) * e)


def _delta_parts(u, gamma):
    """Unnormalised ``(sin, cos)`` parts of the angle of ``e^s + e^(n + j gamma)``
    relative to the speech phasor, scaled by ``exp(-max(s, n))``."""
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)
    r = np.exp(-np.abs(u))
    sin_g, cos_g = np.sin(g), np.cos(g)
    pos = u > 0
    num = np.where(pos, sin_g, r * sin_g)
    den = np.where(pos, r + cos_g, 1.0 + r * cos_g)
    return num, den


def _delta(u, gamma):
    """Angle of ``e^s + e^(n + j gamma)`` relative to the speech phasor."""
    return np.arctan2(*_delta_parts(u, gamma))


def relative_phase(s, n, y, gamma_sign):
    """Noisy-minus-speech phase ``delta = sgn(gamma) acos(cosh(y - s) - 0.5 e^(2n - s - y))``.

    The arccos argument is clamped to [-1, 1] with slack ``1e-9``; beyond
    that the triple ``(s, n, y)`` cannot come from two phasors.
    """
    arg = np.cosh(np.asarray(y) - s) - 0.5 * np.exp(2 * np.asarray(n) - s - y)
    if np.any(np.abs(arg) > 1.0 + ACOS_SLACK):
        raise GeometryError("amplitudes (s, n, y) violate the triangle inequality")
    sign = np.where(np.asarray(gamma_sign) > 0, 1.0, -1.0)
    return sign * np.arccos(np.clip(arg, -1.0, 1.0))


def forward_transform(s, n, phi, psi):
    """``(s, n, phi, psi) -> (u, y, gamma, theta)``.

    ``y`` is the noisy log amplitude and ``theta`` the noisy phase that
    the speech and noise phasors add up to.
    """
    s = np.asarray(s, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    gamma = wrap_angle(np.asarray(psi) - phi)
    u = n - s
    y = 0.5 * (s + n + log_mix(u, np.cos(gamma)))
    theta = wrap_angle(np.asarray(phi) + _delta(u, gamma))
    return u, y, gamma, theta


def inverse_transform(u, y, gamma, theta):
    """``(u, y, gamma, theta) -> (s, n, phi, psi)``."""
    u = np.asarray(u, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    lm = log_mix(u, np.cos(gamma))
    if np.any(~np.isfinite(lm)):
        raise DegenerateError("2cosh(u) + 2cos(gamma) = 0: phasors cancel exactly")
    v = 2.0 * np.asarray(y) - lm
    s = 0.5 * (v - u)
    n = 0.5 * (v + u)
    phi = wrap_angle(np.asarray(theta) - _delta(u, gamma))
    psi = wrap_angle(gamma + phi)
    return s, n, phi, psi


class RegionCheck(NamedTuple):
    inside: bool | np.ndarray
    margin_in_phase: float | np.ndarray  # distance of alpha below +1
    margin_anti_phase: float | np.ndarray  # distance of alpha above -1
    alpha: float | np.ndarray


def region_check(s, n, y, tol: float = 0.0) -> RegionCheck:
    """Is ``(s, n)`` inside the feasible curvy triangle for observation ``y``?

    The implied phase factor is ``alpha = 0.5 e^(2y - s - n) - cosh(n - s)``;
    the point is feasible iff ``-1 <= alpha <= 1``. Margins are ``1 - alpha``
    and ``alpha + 1``.
    """
    s = np.asarray(s, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(over="ignore"):
        alpha = 0.5 * np.exp(2 * np.asarray(y) - s - n) - np.cosh(n - s)
    up = 1.0 - alpha
    lo = alpha + 1.0
    inside = (up >= -tol) & (lo >= -tol)
    if inside.ndim == 0:
        return RegionCheck(bool(inside), float(up), float(lo), float(alpha))
    return RegionCheck(inside, up, lo, alpha)


# -- the posterior integrator -------------------------------------------------------------


class Moments(NamedTuple):
    mean: np.ndarray  # (B, 2)
    cov: np.ndarray  # (B, 2, 2)
    phase: np.ndarray | None  # (B,) complex
    underflow: np.ndarray
    unconverged: np.ndarray


def _precision(cov):
    cov = np.asarray(cov, dtype=np.float64)
    reg = cov + VAR_FLOOR * np.eye(2)
    return np.linalg.inv(reg)


def _curve_logweight(u, y, m, Lam, alpha, gamma, theta, mu, kappa):
    """Log integrand along the observation curve.

    ``u`` is (B, N); alpha/gamma have shape (R, G) with alpha constant
    along G. Returns ``s - m_s`` and ``n - m_n`` (B, R, 1, N), the log
    weight and ``(cos delta, sin delta)`` (or None), (B, R, G, N). The
    speech phase is ``theta - delta``.
    """
    uu = u[:, None, None, :]
    # the Gaussian part depends on alpha only, shared by both gamma signs
    lm = log_mix(uu, alpha[None, :, :1, None])
    v = 2.0 * y[:, None, None, None] - lm
    ds = 0.5 * (v - uu) - m[:, 0, None, None, None]
    dn = 0.5 * (v + uu) - m[:, 1, None, None, None]
    q = (
        Lam[:, 0, 0, None, None, None] * ds * ds
        + 2.0 * Lam[:, 0, 1, None, None, None] * ds * dn
        + Lam[:, 1, 1, None, None, None] * dn * dn
    )
    logw = -0.5 * q
    rot = None
    if theta is not None:
        num, den = _delta_parts(uu, gamma[None, :, :, None])
        h = np.hypot(num, den)
        cancel = h == 0
        h = np.where(cancel, 1.0, h)
        cd = np.where(cancel, 1.0, den / h)
        sd = np.where(cancel, 0.0, num / h)
        # cos(phi - mu) with phi = theta - delta
        off = (theta - mu)[:, None, None, None]
        logw = logw + kappa[:, None, None, None] * (np.cos(off) * cd + np.sin(off) * sd - 1.0)
        rot = (cd, sd)
    bad = ~np.isfinite(logw)
    if bad.any():
        logw = np.where(bad, -np.inf, logw)
        off_curve = ~np.isfinite(ds) | ~np.isfinite(dn)
        ds = np.where(off_curve, 0.0, ds)
        dn = np.where(off_curve, 0.0, dn)
    return ds, dn, logw, rot


_N_SUMS = 8  # weight, s, n, s^2, n^2, sn, cos delta, sin delta


def _weighted_sums(ds, dn, logw, rot, coef):
    """Row-wise sums of ``coef * exp(logw - top)`` times each moment integrand.

    Returns ``(top, sums)`` with ``sums`` of shape (rows, 8).
    """
    rows = logw.shape[0]
    top = logw.reshape(rows, -1).max(axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    W = np.exp(logw - safe[:, None, None, None]) * coef
    out = np.zeros((rows, _N_SUMS))
    if rot is not None:
        out[:, 6] = np.einsum("rm,rm->r", W.reshape(rows, -1), rot[0].reshape(rows, -1))
        out[:, 7] = np.einsum("rm,rm->r", W.reshape(rows, -1), rot[1].reshape(rows, -1))
    Wr = W.sum(axis=2).reshape(rows, -1)  # s and n do not depend on the gamma sign
    a = ds.reshape(rows, -1)
    b = dn.reshape(rows, -1)
    Wa, Wb = Wr * a, Wr * b
    out[:, 0] = Wr.sum(axis=1)
    out[:, 1] = Wa.sum(axis=1)
    out[:, 2] = Wb.sum(axis=1)
    out[:, 3] = np.einsum("rm,rm->r", Wa, a)
    out[:, 4] = np.einsum("rm,rm->r", Wb, b)
    out[:, 5] = np.einsum("rm,rm->r", Wa, b)
    return top, out


def _merge_sums(top_a, sums_a, top_b, sums_b):
    top = np.maximum(top_a, top_b)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(invalid="ignore"):
        fa = np.where(np.isfinite(top_a), np.exp(top_a - safe), 0.0)
        fb = np.where(np.isfinite(top_b), np.exp(top_b - safe), 0.0)
    return top, sums_a * fa[:, None] + sums_b * fb[:, None]


def _moments_from_sums(top, sums, h, m):
    Z = sums[:, 0]
    ok = np.isfinite(top) & (Z > 0)
    Zs = np.where(ok, Z, 1.0)
    e = sums / Zs[:, None]
    ds, dn = e[:, 1], e[:, 2]
    css = e[:, 3] - ds * ds
    cnn = e[:, 4] - dn * dn
    csn = e[:, 5] - ds * dn
    mean = np.stack([m[:, 0] + ds, m[:, 1] + dn], axis=-1)
    cov = np.stack([np.stack([css, csn], -1), np.stack([csn, cnn], -1)], -2)
    rot = e[:, 6] - 1j * e[:, 7]  # E{exp(-j delta)}
    logZ = np.log(h * Zs) + np.where(ok, top, 0.0)
    return mean, cov, rot, ok, logZ


def _support(m, S, y, Lam, alpha, gamma, th, mu, kappa):
    """Log-space scan for the interval in ``u`` carrying the mass.

    The first bracket covers the prior in ``u`` and the curve's reach in
    ``v``; the kept interval holds every scan point within
    ``_SUPPORT_NEPERS`` of the peak plus one scan step either side. Rows
    whose peak spans only a few scan points are rescanned on the kept
    interval, so very narrow posteriors are still located.
    """
    B = m.shape[0]
    su = np.sqrt(np.maximum(S[:, 0, 0] + S[:, 1, 1] - 2 * S[:, 0, 1], 1e-12))
    sv = np.sqrt(np.maximum(S[:, 0, 0] + S[:, 1, 1] + 2 * S[:, 0, 1], 1e-12))
    mu_u = m[:, 1] - m[:, 0]
    reach = np.abs(2 * y - m[:, 0] - m[:, 1]) + 8 * sv + 4.0
    a = np.minimum(mu_u - 8 * su, -reach)
    b = np.maximum(mu_u + 8 * su, reach)
    grid = np.linspace(0.0, 1.0, _SCAN_POINTS)
    rows = np.arange(B)
    underflow = np.zeros(B, dtype=bool)
    sub = lambda x: None if x is None else x[rows]  # noqa: E731
    for it in range(_ZOOM_PASSES):
        lo, hi = a[rows], b[rows]
        u0 = lo[:, None] + (hi - lo)[:, None] * grid
        _, _, lw0, _ = _curve_logweight(u0, y[rows], m[rows], Lam[rows], alpha, gamma,
                                        sub(th), sub(mu), sub(kappa))
        prof = lw0.max(axis=(1, 2))  # (rows, N)
        peak = prof.max(axis=1, keepdims=True)
        finite = np.isfinite(peak[:, 0])
        if it == 0:
            underflow = ~finite
        live = prof >= peak - _SUPPORT_NEPERS
        step = (hi - lo) / (_SCAN_POINTS - 1)
        first = np.argmax(live, axis=1)
        last = _SCAN_POINTS - 1 - np.argmax(live[:, ::-1], axis=1)
        idx = np.arange(rows.size)
        a[rows] = np.where(finite, np.maximum(u0[idx, first] - step, lo), lo)
        b[rows] = np.where(finite, np.minimum(u0[idx, last] + step, hi), hi)
        narrow = finite & (live.sum(axis=1) < _ZOOM_TRIGGER)
        rows = rows[narrow]
        if rows.size == 0:
            break
    return a, b, underflow


def _setup(mean, cov, y, quad, theta, phase):
    m = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    S = np.asarray(cov, dtype=np.float64).reshape(-1, 2, 2)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    nodes, w = quad.nodes, quad.weights
    if theta is not None:
        th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        pm = np.atleast_1d(np.asarray(phase, dtype=np.complex128))
        kappa, _ = invert_bessel_ratio(np.abs(pm))
        mu = np.angle(pm)
        acos = np.arccos(np.clip(nodes, -1.0, 1.0))
        gamma = np.stack([acos, -acos], axis=1)  # (R, 2)
        alpha = np.repeat(nodes[:, None], 2, axis=1)
        qw = np.repeat(w[:, None], 2, axis=1) * 0.5
    else:
        th = mu = kappa = pm = None
        gamma = np.arccos(np.clip(nodes, -1.0, 1.0))[:, None]
        alpha = nodes[:, None]
        qw = w[:, None]
    return m, S, y, _precision(S), th, pm, mu, kappa, alpha, gamma, qw


def posterior_moments(mean, cov, y, quad: SigmaPointSet, theta=None, phase=None,
                      tol: float = 1e-6) -> Moments:
    """Posterior moments of ``(s, n)`` (and the phase) for a batch of bins.

    ``mean`` (B, 2) and ``cov`` (B, 2, 2) describe the Gaussian prior over
    ``(s, n)``; ``y`` (B,) the noisy log amplitudes. With ``theta`` and
    ``phase`` (the prior first circular moment) the update is
    phase-sensitive and both signs of ``gamma`` are integrated; otherwise
    only ``y`` is used. Rows whose likelihood underflows return the prior.
    """
    m, S, y, Lam, th, pm, mu, kappa, alpha, gamma, qw = _setup(mean, cov, y, quad, theta, phase)
    B = m.shape[0]
    a, b, underflow = _support(m, S, y, Lam, alpha, gamma, th, mu, kappa)

    out_mean = m.copy()
    out_cov = S.copy()
    out_phase = None if th is None else pm.copy()
    unconverged = np.zeros(B, dtype=bool)
    active = np.flatnonzero(~underflow)
    qcoef = qw[None, :, :, None]
    top = sums = prev = None
    for level in range(_MIN_LEVEL, _MAX_LEVEL + 1):
        if active.size == 0:
            break
        aa, bb = a[active], b[active]
        sub = lambda x: None if x is None else x[active]  # noqa: E731
        if level == _MIN_LEVEL:
            # full trapezoid grid with half-weight end points
            N = 2**level
            t = np.linspace(0.0, 1.0, N + 1)
            tw = np.ones(N + 1)
            tw[0] = tw[-1] = 0.5
        else:
            # nested doubling: only the new midpoints
            N = 2**level
            t = (2.0 * np.arange(N // 2) + 1.0) / N
            tw = np.ones(N // 2)
        u = aa[:, None] + (bb - aa)[:, None] * t
        ds, dn, lw, rot = _curve_logweight(
            u, y[active], m[active], Lam[active], alpha, gamma, sub(th), sub(mu), sub(kappa)
        )
        t_new, s_new = _weighted_sums(ds, dn, lw, rot, qcoef * tw[None, None, None, :])
        if level == _MIN_LEVEL:
            top, sums = t_new, s_new
        else:
            top, sums = _merge_sums(top, sums, t_new, s_new)
        mm, cc, rr, ok, logZ = _moments_from_sums(top, sums, (bb - aa) / N, m[active])
        ph = None if th is None else np.exp(1j * th[active]) * rr
        if prev is not None:
            p_mean, p_cov, p_ph, p_logZ = prev
            done = (
                (np.abs(logZ - p_logZ) <= tol)
                & np.all(np.abs(mm - p_mean) <= tol * (1.0 + np.abs(mm)), axis=1)
                & np.all(np.abs(cc - p_cov) <= tol * (1.0 + np.abs(cc)), axis=(1, 2))
            )
            if ph is not None:
                done &= np.abs(ph - p_ph) <= tol
        else:
            done = np.zeros(active.size, dtype=bool)
        last_level = level == _MAX_LEVEL
        take = done | last_level | ~ok
        rows = active[take]
        good = ok[take]
        out_mean[rows[good]] = mm[take][good]
        out_cov[rows[good]] = cc[take][good]
        if out_phase is not None:
            out_phase[rows[good]] = ph[take][good]
        underflow[rows[~good]] = True
        if last_level:
            unconverged[active[~done & ok]] = True
        keep = ~take
        active = active[keep]
        top, sums = top[keep], sums[keep]
        prev = (mm[keep], cc[keep], None if ph is None else ph[keep], logZ[keep])
    out_cov, _ = repair_psd(out_cov)
    return Moments(out_mean, out_cov, out_phase, underflow, unconverged)


def segment_moments(mean, cov, y, quad: SigmaPointSet, n_segments: int = 32) -> Moments:
    """Experimental closed-form update for phase-free variants.

    On each of ``n_segments`` straight-line pieces of the curve ``v(u)``
    (per phase-factor node) the integrand is a Gaussian in ``u``
    truncated to the piece, so its moments have closed forms.
    """
    m, S, y, Lam, *_, alpha, gamma, qw = _setup(mean, cov, y, quad, None, None)
    B = m.shape[0]
    a, b, underflow = _support(m, S, y, Lam, alpha, gamma, None, None, None)
    edges = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, n_segments + 1)
    al = alpha[None, :, 0, None]  # (1, R, 1)
    v = 2.0 * y[:, None, None] - log_mix(edges[:, None, :], al)  # (B, R, n+1)
    u0, u1 = edges[:, None, :-1], edges[:, None, 1:]
    k = (v[..., 1:] - v[..., :-1]) / (u1 - u0)
    cs1, cn1 = 0.5 * (k - 1.0), 0.5 * (k + 1.0)
    c0 = 0.5 * (v[..., :-1] - k * u0)  # shared intercept of s(u) and n(u)
    es = c0 - m[:, 0, None, None]
    en = c0 - m[:, 1, None, None]
    L00, L01, L11 = (Lam[:, i, j, None, None] for i, j in ((0, 0), (0, 1), (1, 1)))
    A = L00 * cs1**2 + 2 * L01 * cs1 * cn1 + L11 * cn1**2
    Bq = L00 * es * cs1 + L01 * (es * cn1 + en * cs1) + L11 * en * cn1
    C = L00 * es**2 + 2 * L01 * es * en + L11 * en**2
    centre = -Bq / A
    sd = 1.0 / np.sqrt(A)
    lo_z, hi_z = (u0 - centre) / sd, (u1 - centre) / sd
    with np.errstate(invalid="ignore", divide="ignore"):
        log_mass = _log_ndtr_diff(lo_z, hi_z)
        logw = -0.5 * (C - Bq**2 / A) + np.log(sd) + log_mass + np.log(qw[None, :, 0, None])
        eu, vu = truncnorm.stats(lo_z, hi_z, moments="mv")
    eu = centre + sd * eu
    eu2 = sd * sd * vu + eu * eu
    ok = np.isfinite(logw) & np.isfinite(eu) & np.isfinite(eu2)
    logw = np.where(ok, logw, -np.inf)
    eu, eu2 = np.where(ok, eu, 0.0), np.where(ok, eu2, 0.0)
    top = logw.max(axis=(1, 2), keepdims=True)
    good = np.isfinite(top[:, 0, 0]) & ~underflow
    W = np.exp(logw - np.where(np.isfinite(top), top, 0.0))
    W /= np.maximum(W.sum(axis=(1, 2), keepdims=True), 1e-300)

    def expect(p0, p1, q0, q1):
        # E[(p0 + p1 u)(q0 + q1 u)] summed over pieces
        return (W * (p0 * q0 + (p0 * q1 + q0 * p1) * eu + p1 * q1 * eu2)).sum(axis=(1, 2))

    Es = (W * (c0 + cs1 * eu)).sum(axis=(1, 2))
    En = (W * (c0 + cn1 * eu)).sum(axis=(1, 2))
    css = expect(c0, cs1, c0, cs1) - Es**2
    cnn = expect(c0, cn1, c0, cn1) - En**2
    csn = expect(c0, cs1, c0, cn1) - Es * En
    out_mean = np.where(good[:, None], np.stack([Es, En], -1), m)
    cov_new = np.stack([np.stack([css, csn], -1), np.stack([csn, cnn], -1)], -2)
    out_cov = np.where(good[:, None, None], cov_new, S)
    out_cov, _ = repair_psd(out_cov)
    return Moments(out_mean, out_cov, None, ~good, np.zeros(B, dtype=bool))


def _log_ndtr_diff(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` for ``lo < hi``, accurate in both tails."""
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    la, lb = log_ndtr(a), log_ndtr(b)
    return lb + np.log1p(-np.exp(la - lb))


# -- Gaussianised linear updates (APPG / AAAG) ----------------------------------------------------


def linear_gaussian_sum_update(M, C, Y):
    """Condition a Gaussian over ``(X_s, X_n)`` on ``X_s + X_n = Y`` exactly."""
    M = np.asarray(M, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    Ch = C.sum(axis=-1)  # C h with h = (1, 1)
    hCh = np.maximum(Ch.sum(axis=-1), 1e-300)
    resid = np.asarray(Y) - M.sum(axis=-1)
    Mp = M + Ch * (resid / hCh)[..., None]
    Cp = C - Ch[..., :, None] * Ch[..., None, :] / hCh[..., None, None]
    return Mp, Cp


def lognormal_to_linear(mean, cov, e: float):
    """Mean/covariance of ``exp(e * x)`` for Gaussian ``x``."""
    d = np.diagonal(cov, axis1=-2, axis2=-1)
    M = np.exp(e * mean + 0.5 * e * e * d)
    C = M[..., :, None] * M[..., None, :] * np.expm1(e * e * cov)
    return M, C


def linear_to_lognormal(M, C, e: float, ceiling=None, max_var=None):
    """Moment-match a Gaussian over ``exp(e x)`` back to a Gaussian over ``x``.

    Linear means are clamped into ``[1e-10 * ceiling, ceiling]`` (the
    components of a sum cannot exceed it), variances floored at ``1e-10``
    and capped at ``max_var``. Returns ``(mean, cov, repaired)`` where
    ``repaired`` marks rows touched by any of these guards.
    """
    M = np.asarray(M, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    top = np.full(M.shape, np.inf) if ceiling is None else np.broadcast_to(np.asarray(ceiling)[..., None], M.shape)
    floor = np.where(np.isfinite(top), 1e-10 * top, 1e-300)
    repaired = np.any((M < floor) | (M > top), axis=-1)
    M = np.clip(M, floor, top)
    d = np.diagonal(C, axis1=-2, axis2=-1)
    ratio = d / (M * M)
    repaired |= np.any(ratio <= 0, axis=-1)
    var = np.log1p(np.maximum(ratio, 0.0)) / (e * e)
    repaired |= np.any(var < VAR_FLOOR, axis=-1)
    var = np.maximum(var, VAR_FLOOR)
    if max_var is not None:
        cap = np.maximum(np.asarray(max_var, dtype=np.float64), VAR_FLOOR)
        repaired |= np.any(var > cap, axis=-1)
        var = np.minimum(var, cap)
    mean = np.log(M) / e - 0.5 * e * var
    cross = C[..., 0, 1] / (M[..., 0] * M[..., 1])
    cov01 = np.log(np.maximum(1.0 + cross, 1e-300)) / (e * e)
    lim = np.sqrt(var[..., 0] * var[..., 1])
    cov01 = np.clip(cov01, -lim, lim)
    cov = np.stack([np.stack([var[..., 0], cov01], -1), np.stack([cov01, var[..., 1]], -1)], -2)
    return mean, cov, repaired


def gaussianised_update(mean, cov, y, domain: str):
    """APPG (``domain='power'``) or AAAG (``'amplitude'``) update.

    Works in units of the observation so the lognormal moments stay in
    floating-point range. Rows whose moments still overflow keep the prior
    (with the speech mean capped at ``y``) and are flagged.
    """
    e = 2.0 if domain == "power" else 1.0
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 2, 2)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    rel = mean - y[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        M, C = lognormal_to_linear(rel, cov, e)
        Mp, Cp = linear_gaussian_sum_update(M, C, 1.0)
        m2, c2, repaired = linear_to_lognormal(Mp, Cp, e, ceiling=np.ones(y.shape))
    m2 = m2 + y[:, None]
    bad = ~(np.all(np.isfinite(m2), axis=1) & np.all(np.isfinite(c2), axis=(1, 2)))
    if bad.any():
        m2[bad] = np.minimum(mean[bad], y[bad, None])
        c2[bad] = cov[bad]
        repaired |= bad
    c2, _ = repair_psd(c2)
    return m2, c2, repaired


# -- variant dispatch -------------------------------------------------------------------------------


class UpdateResult(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray
    phase: np.ndarray | None
    underflow: np.ndarray
    unconverged: np.ndarray
    floored: np.ndarray


def update_batch(variant, mean, cov, y, theta=None, phase=None,
                 quad: SigmaPointSet | None = None, iterations: int = 1,
                 tol: float = 1e-6, method: str = "numeric") -> UpdateResult:
    """Apply one variant's update to a batch of ``(s, n)`` priors.

    ``method="segment"`` selects the experimental piecewise-linear
    integrator; it only supports the phase-free variants.
    """
    variant = UpdateVariant.parse(variant)
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 2, 2)
    B = mean.shape[0]
    none = np.zeros(B, dtype=bool)
    if variant in (UpdateVariant.APPG, UpdateVariant.AAAG):
        m, c, fl = gaussianised_update(mean, cov, y, variant.signal_model)
        return UpdateResult(m, c, None, none, none.copy(), fl)
    if variant is UpdateVariant.AP:
        quad = fixed_alpha(0.0)
    elif variant is UpdateVariant.AA:
        quad = fixed_alpha(1.0)
    elif quad is None:
        quad = sigma_points(3)
    if not variant.tracks_phase:
        theta = phase = None
    elif theta is None or phase is None:
        raise ValueError("phase-sensitive update needs theta and a phase prior")
    if method not in ("numeric", "segment"):
        raise ValueError(f"unknown integration method {method!r}")
    if method == "segment" and variant.tracks_phase:
        raise ValueError("the segment method does not support phase tracking")
    underflow = none.copy()
    unconverged = none.copy()
    for _ in range(max(1, int(iterations))):
        if method == "segment":
            res = segment_moments(mean, cov, y, quad)
        else:
            res = posterior_moments(mean, cov, y, quad, theta=theta, phase=phase, tol=tol)
        mean, cov = res.mean, res.cov
        if res.phase is not None:
            phase = res.phase
        underflow |= res.underflow
        unconverged |= res.unconverged
    return UpdateResult(mean, cov, phase if variant.tracks_phase else None,
                        underflow, unconverged, none.copy())


# -- single-bin API ------------------------------------------------------------------------------------


def _posterior(res: UpdateResult) -> JointPosterior:
    ph = None
    if res.phase is not None:
        z = complex(res.phase[0])
        r = abs(z)
        ph = FirstCircularMoment(z / r if r > 1.0 else z)
    return JointPosterior(
        float(res.mean[0, 0]),
        float(res.mean[0, 1]),
        res.cov[0],
        ph,
        {
            "underflow": bool(res.underflow[0]),
            "unconverged": bool(res.unconverged[0]),
            "floored": bool(res.floored[0]),
        },
    )


def st_update(prior_sn: Gaussian2, y: float, quad: SigmaPointSet | None = None,
              tol: float = 1e-6) -> JointPosterior:
    """Log-spectral update from the noisy amplitude alone."""
    res = update_batch(UpdateVariant.ST, prior_sn.mean, prior_sn.cov, [y], quad=quad, tol=tol)
    return _posterior(res)


def snpt_update(prior_sn: Gaussian2, prior_phase: FirstCircularMoment | complex,
                obs: Observation, quad: SigmaPointSet | None = None,
                iterations: int = 1, tol: float = 1e-6) -> JointPosterior:
    """Phase-sensitive update of ``(s, n)`` and the speech phase moment."""
    z = prior_phase.value if isinstance(prior_phase, FirstCircularMoment) else complex(prior_phase)
    res = update_batch(UpdateVariant.SNPT, prior_sn.mean, prior_sn.cov, [obs.y],
                       theta=[obs.theta], phase=[z], quad=quad, iterations=iterations, tol=tol)
    return _posterior(res)


def alt_update(variant, prior_sn: Gaussian2, y: float) -> JointPosterior:
    """AP / AA (phase factor pinned at 0 / 1) or APPG / AAAG (Gaussianised)."""
    variant = UpdateVariant.parse(variant)
    if variant not in (UpdateVariant.AP, UpdateVariant.AA, UpdateVariant.APPG, UpdateVariant.AAAG):
        raise ValueError(f"{variant.name} is not an alternative update")
    return _posterior(update_batch(variant, prior_sn.mean, prior_sn.cov, [y]))
