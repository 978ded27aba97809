"""Non-Kalman priors: noise tracking, the global speech prior, and fusion.

All log quantities are natural-log amplitudes (``log|X|``) unless a name
says otherwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import exp1

from modkf.circular import FirstCircularMoment, VonMises, vm_from_moment
from modkf.errors import AudioFormatError, InputTooShortError
from modkf.stft import FramingConfig, analyze, read_wav

LAMBDA_MIN = 0.1
NOISE_PRIOR_VARIANCE = 0.5
EULER_GAMMA = 0.5772156649015329
# frames within this many dB of the loudest frame count as speech-active
ACTIVITY_RANGE_DB = 30.0
# decision-directed a-priori SNR: smoothing and floor (-25 dB)
DD_SMOOTHING = 0.98
XI_MIN = 10.0 ** (-25.0 / 10.0)
# minimum-statistics escape for the built-in noise tracker
FLOOR_WINDOW = 96
FLOOR_SMOOTHING = 0.8
FLOOR_BIAS = 0.7
MODEL_MAGIC = b"MKF1"
_HEADER = struct.Struct("<4sIII")


@dataclass
class Gaussian2:
    """Bivariate Gaussian over ``(s, n)``.

    A component may be uninformative: infinite variance on the diagonal
    with zero covariance to the other component.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(2, 2)
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("Gaussian2 mean must be finite")
        off = self.cov[0, 1]
        if not (np.isfinite(off) and off == self.cov[1, 0]):
            raise ValueError("Gaussian2 covariance must be symmetric")
        d = np.diag(self.cov)
        if np.any(d < 0) or (np.isinf(d).any() and off != 0):
            raise ValueError("invalid Gaussian2 covariance")
        if np.all(np.isfinite(d)) and np.linalg.eigvalsh(self.cov)[0] < -1e-9:
            raise ValueError("Gaussian2 covariance is not PSD")


@dataclass
class GlobalSpeechPrior:
    """Per-bin Gaussian over clean-speech log amplitude."""

    mean: np.ndarray
    variance: np.ndarray
    sample_rate: int
    fft_size: int
    level_offset: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape or self.mean.ndim != 1:
            raise ValueError("mean and variance must be matching 1-D arrays")
        if np.any(self.variance <= 0):
            raise ValueError("global prior variances must be positive")

    @property
    def n_bins(self) -> int:
        return self.mean.size

    def shifted_mean(self) -> np.ndarray:
        return self.mean + self.level_offset

    def match_level(self, logamp, active=None) -> "GlobalSpeechPrior":
        """Copy with ``level_offset`` aligning the prior's median mean to the
        median of ``logamp`` (optionally restricted to ``active`` frames)."""
        ref = np.asarray(logamp)
        if active is not None:
            ref = ref[np.asarray(active)]
        if ref.size == 0:
            return replace(self, level_offset=0.0)
        return replace(self, level_offset=float(np.median(ref) - np.median(self.mean)))


@dataclass
class NoisePrior:
    """Per-bin Gaussian over noise log amplitude for one frame."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), self.mean.shape)
        if np.any(self.variance <= 0):
            raise ValueError("noise prior variance must be positive")


# -- noise tracking ------------------------------------------------------------------


def vad_smoothing_factor(snr):
    """``lambda = lambda_min + (1 - lambda_min) sigmoid(2 log snr)``."""
    eta = np.asarray(snr, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-2.0 * np.log(eta)))
    sig = np.where(np.isnan(sig), 1.0, sig)  # snr = inf
    return LAMBDA_MIN + (1.0 - LAMBDA_MIN) * sig


def vad_noise_smoother(prev_estimate, y_t, snr_estimate):
    """One step of the VAD-controlled one-pole noise smoother.

    High SNR pushes the smoothing factor to 1 (noise estimate frozen);
    zero SNR lets the observation through with weight ``1 - lambda_min``.
    """
    lam = vad_smoothing_factor(snr_estimate)
    out = lam * np.asarray(prev_estimate) + (1.0 - lam) * np.asarray(y_t)
    return out if np.ndim(out) else float(out)


def log_to_power(logamp):
    """Expected power ``E|N|^2`` from the mean log amplitude of a complex
    Gaussian (``E log|N| = log(sigma) - gamma/2``)."""
    return np.exp(2.0 * np.asarray(logamp) + EULER_GAMMA)


def logmmse_gain(xi, gamma):
    """Log-spectral amplitude gain ``xi/(1+xi) exp(E1(v)/2)``,
    ``v = xi gamma / (1 + xi)``, capped at 1."""
    xi = np.asarray(xi, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    ratio = xi / (1.0 + xi)
    v = np.maximum(ratio * gamma, 1e-300)
    return np.minimum(ratio * np.exp(0.5 * exp1(v)), 1.0)


def decision_directed_snr(prev_g2_post, post, smoothing: float = DD_SMOOTHING,
                          xi_min: float = XI_MIN):
    """A-priori SNR from last frame's ``G^2 * gamma`` and this frame's
    a-posteriori SNR ``gamma``."""
    xi = smoothing * prev_g2_post + (1.0 - smoothing) * np.maximum(post - 1.0, 0.0)
    return np.maximum(xi, xi_min)


def estimate_noise_track(y, init_frames: int = 6, start: int = 0, snr: str = "a_priori",
                         floor_window: int = FLOOR_WINDOW):
    """Built-in noise estimator: the VAD smoother run over a whole track.

    ``y`` is the noisy log amplitude, shape ``(frames, bins)``. The SNR
    driving the smoother is the decision-directed a-priori SNR
    (``snr="a_priori"``, a running estimate of the speech-to-noise power
    ratio) or the raw a-posteriori SNR minus one (``"a_posteriori"``).
    The track is seeded with the mean of ``init_frames`` frames beginning
    at ``start``; frames before ``start`` reuse the seed. Entry ``t`` is
    the estimate after seeing frame ``t``. Returns log amplitudes.

    A smoother driven by its own SNR can lock: one deep periodogram dip
    pulls the estimate down, every later frame then looks like speech and
    the estimate freezes. The estimate is therefore kept above a
    minimum-statistics floor, the bias-compensated minimum of a smoothed
    periodogram over the last ``floor_window`` frames (0 disables it).
    """
    if snr not in ("a_priori", "a_posteriori"):
        raise ValueError(f"unknown SNR source {snr!r}")
    y = np.asarray(y, dtype=np.float64)
    T = y.shape[0]
    if T == 0:
        raise InputTooShortError("empty track")
    start = min(start, T - 1)
    seed = y[start : start + max(1, init_frames)].mean(axis=0)
    out = np.empty_like(y)
    prev = seed
    g2_post = np.ones(y.shape[1:])
    power = np.exp(2.0 * y)
    smoothed = np.empty_like(power)
    for t in range(T):
        smoothed[t] = power[t] if t == 0 else (
            FLOOR_SMOOTHING * smoothed[t - 1] + (1.0 - FLOOR_SMOOTHING) * power[t])
        if t < start:
            out[t] = seed
            continue
        post = power[t] / log_to_power(prev)
        if snr == "a_priori":
            eta = decision_directed_snr(g2_post, post)
            g2_post = logmmse_gain(eta, post) ** 2 * post
        else:
            eta = np.maximum(post - 1.0, 0.0)
        prev = vad_noise_smoother(prev, y[t], eta)
        if floor_window > 0:
            low = smoothed[max(start, t - floor_window + 1) : t + 1].min(axis=0)
            prev = np.maximum(prev, 0.5 * (np.log(FLOOR_BIAS * low) - EULER_GAMMA))
        out[t] = prev
    return out


# -- fusion ---------------------------------------------------------------------------


def _condition(mean, cov, i, g, v):
    """Multiply a batch of 2-D Gaussians by a scalar Gaussian on component i."""
    mean = mean.copy()
    cov = cov.copy()
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), mean.shape[:1])
    g = np.broadcast_to(np.asarray(g, dtype=np.float64), mean.shape[:1])
    Sii = cov[:, i, i]
    blank = np.isinf(Sii)
    active = np.isfinite(v) & ~blank
    # uninformative local component: adopt the scalar prior
    if blank.any():
        sel = blank & np.isfinite(v)
        mean[sel, i] = g[sel]
        cov[sel, i, i] = v[sel]
    if active.any():
        denom = Sii[active] + v[active]
        ok = denom > 0
        idx = np.flatnonzero(active)[ok]
        col = cov[idx, :, i]
        K = col / denom[ok][:, None]
        resid = g[idx] - mean[idx, i]
        mean[idx] = mean[idx] + K * resid[:, None]
        cov[idx] = cov[idx] - K[:, :, None] * col[:, None, :]
        cov[idx] = 0.5 * (cov[idx] + np.swapaxes(cov[idx], -1, -2))
    return mean, cov


def fuse_priors_batch(mean, cov, speech_mean=None, speech_var=None,
                      noise_mean=None, noise_var=None, speech_scale: float = 1.0):
    """Product of the local ``(s, n)`` Gaussian with independent global
    speech and noise priors, renormalised.

    ``speech_scale`` multiplies the global speech precision. ``None`` or
    infinite variances add no information.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if speech_mean is not None and speech_scale > 0:
        mean, cov = _condition(mean, cov, 0, speech_mean, np.asarray(speech_var) / speech_scale)
    if noise_mean is not None:
        mean, cov = _condition(mean, cov, 1, noise_mean, noise_var)
    return mean, cov


def fuse_priors(local: Gaussian2, g_speech=None, g_noise=None, speech_scale: float = 1.0) -> Gaussian2:
    """Fuse one bin's local prior with ``(mean, variance)`` global priors."""
    sm, sv = g_speech if g_speech is not None else (None, None)
    nm, nv = g_noise if g_noise is not None else (None, None)
    m, S = fuse_priors_batch(local.mean[None], local.cov[None], sm, sv, nm, nv, speech_scale)
    return Gaussian2(m[0], S[0])


def phase_prior_to_vm(moment: FirstCircularMoment) -> VonMises:
    """Local phase prior as a von Mises (the (s, n) fusion never touches it)."""
    return vm_from_moment(moment)


# -- global speech prior: training and model files ---------------------------------------


def active_frames(power_per_frame, range_db: float = ACTIVITY_RANGE_DB):
    """Energy-threshold activity mask: frames within ``range_db`` of the peak."""
    e = np.asarray(power_per_frame, dtype=np.float64)
    if e.size == 0 or e.max() <= 0:
        return np.zeros(e.shape, dtype=bool)
    return e >= e.max() * 10.0 ** (-range_db / 10.0)


class _Accumulator:
    def __init__(self, n_bins):
        self.n = 0
        self.sum = np.zeros(n_bins)
        self.sumsq = np.zeros(n_bins)

    def add(self, rows):
        self.n += rows.shape[0]
        self.sum += rows.sum(axis=0)
        self.sumsq += (rows**2).sum(axis=0)


def train_global_prior(clean_audio, cfg: FramingConfig, min_variance: float = 1e-8) -> GlobalSpeechPrior:
    """Per-bin mean/variance of clean log amplitudes over active frames.

    ``clean_audio`` is a list of WAV paths or of 1-D arrays at
    ``cfg.sample_rate``. Files are processed in the given order, so the
    result is deterministic. Only full frames are used: edge frames
    half-covered by padding would inflate the variance.
    """
    items = list(clean_audio)
    if not items:
        raise ValueError("no training audio given")
    acc = _Accumulator(cfg.n_bins)
    full = cfg.with_(pad=False)
    for item in items:
        if isinstance(item, (str, Path)):
            x, rate = read_wav(item)
            if rate != cfg.sample_rate:
                raise AudioFormatError(f"{item}: sample rate {rate} != {cfg.sample_rate}")
        else:
            x = np.asarray(item, dtype=np.float64)
        grid = analyze(x, full)
        la = grid.log_amplitude()
        mask = active_frames((grid.amplitude**2).sum(axis=1))
        acc.add(la[mask])
    if acc.n == 0:
        raise ValueError("no speech-active frames in training audio")
    mean = acc.sum / acc.n
    var = np.maximum(acc.sumsq / acc.n - mean**2, min_variance)
    return GlobalSpeechPrior(mean, var, cfg.sample_rate, cfg.fft_size)


def save_prior(prior: GlobalSpeechPrior, path) -> None:
    """Write ``MKF1`` header then little-endian float64 (mean, variance) pairs."""
    body = np.empty((prior.n_bins, 2), dtype="<f8")
    body[:, 0] = prior.mean
    body[:, 1] = prior.variance
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, prior.sample_rate, prior.fft_size, prior.n_bins))
        fh.write(body.tobytes())


def load_prior(path) -> GlobalSpeechPrior:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise AudioFormatError(f"{path}: truncated model file")
    magic, rate, nfft, nbins = _HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise AudioFormatError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * nbins:
        raise AudioFormatError(f"{path}: expected {nbins} bins, found {body.size / 2:g}")
    body = body.reshape(nbins, 2)
    return GlobalSpeechPrior(body[:, 0].copy(), body[:, 1].copy(), int(rate), int(nfft))


__all__ = [
    "Gaussian2",
    "GlobalSpeechPrior",
    "NoisePrior",
    "active_frames",
    "decision_directed_snr",
    "estimate_noise_track",
    "fuse_priors",
    "fuse_priors_batch",
    "load_prior",
    "logmmse_gain",
    "log_to_power",
    "phase_prior_to_vm",
    "save_prior",
    "train_global_prior",
    "vad_noise_smoother",
    "vad_smoothing_factor",
]
