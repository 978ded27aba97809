"""End-to-end enhancement: pre-cleaning, AR fitting, the per-bin Kalman
loop, reconstruction, and desk-scale quality metrics.

All frequency bins advance together: every per-frame step is a batched
numpy operation over bins, so results do not depend on scheduling.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Union

import numpy as np

from modkf.ar import fit_ar_batch, fit_complex_ar1_batch
from modkf.circular import KAPPA_MAX, bessel_ratio, sigma_points
from modkf.errors import InputTooShortError
from modkf.kalman import (
    current_first_order,
    decorrelate_batch,
    initial_state_batch,
    predict_joint_batch,
    predict_phase_batch,
    recorrelate_batch,
)
from modkf.priors import (
    DD_SMOOTHING,
    NOISE_PRIOR_VARIANCE,
    XI_MIN,
    GlobalSpeechPrior,
    active_frames,
    decision_directed_snr,
    estimate_noise_track,
    fuse_priors_batch,
    log_to_power,
    logmmse_gain,
)
from modkf.stft import (
    LOG_FLOOR_RANGE,
    FramingConfig,
    StftGrid,
    analyze,
    model_index,
    modulation_frames,
    synthesize,
)
from modkf.update import UpdateVariant, update_batch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEGSNR_RANGE = (-10.0, 35.0)
# spectra are floored this far below the joint peak before comparing in dB
LSD_RANGE_DB = 60.0
# innovation variance floor (neper^2) for fitted AR models: a constant
# track (floored silence, a frozen noise estimate) fits eps = 0, after
# which the state covariance collapses and the update has no support
INNOVATION_FLOOR = 1e-3
# the noise state is one frame's noise log amplitude, which scatters about
# its mean with the log-Rayleigh variance pi^2/24 even when the smoothed
# noise estimate it is fitted to barely moves
NOISE_INNOVATION_FLOOR = math.pi**2 / 24.0
FLAG_NAMES = (
    "underflow",
    "unconverged",
    "psd_repair",
    "ar_ridge",
    "decorrelation_ridge",
    "moment_floor",
    "phase_clamp",
    "kappa_saturated",
    "nonfinite_fallback",
)

AmpPlugin = Callable[[StftGrid, np.ndarray], np.ndarray]
PhasePlugin = Callable[[StftGrid], np.ndarray]


@dataclass(frozen=True)
class EnhancerConfig:
    """Enhancer settings.

    ``amp_precleaner`` is ``"logmmse"``, ``"none"`` or a callable
    ``(grid, noise_logpower) -> amplitudes``; ``phase_precleaner`` is
    ``"noisy_phase"`` or a callable ``grid -> phases``. Pre-cleaned
    tracks only feed AR model estimation.
    """

    framing: FramingConfig
    variant: UpdateVariant = UpdateVariant.ST
    p: int = 2
    q: int = 2
    sigma_R: int = 3
    iterations: int = 1
    prior_scale: float = 1.0
    phase_precleaner: Union[str, PhasePlugin] = "noisy_phase"
    amp_precleaner: Union[str, AmpPlugin] = "logmmse"
    integration: str = "numeric"
    noise_coupling: bool = True
    noise_prior_variance: float = NOISE_PRIOR_VARIANCE
    noise_snr: str = "a_posteriori"
    tol: float = 1e-6
    innovation_floor: float = INNOVATION_FLOOR
    noise_innovation_floor: float = NOISE_INNOVATION_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "variant", UpdateVariant.parse(self.variant))
        if self.p < 1 or self.q < 1:
            raise ValueError("AR orders p and q must be >= 1")
        if self.iterations not in (1, 2):
            raise ValueError("iterations must be 1 or 2")
        sigma_points(self.sigma_R)  # validates R
        if self.prior_scale < 0:
            raise ValueError("prior_scale must be >= 0")
        if self.innovation_floor < 0 or self.noise_innovation_floor < 0:
            raise ValueError("innovation floors must be >= 0")
        if self.noise_prior_variance <= 0:
            raise ValueError("noise_prior_variance must be positive")
        if not callable(self.amp_precleaner) and self.amp_precleaner not in ("logmmse", "none"):
            raise ValueError(f"unknown amplitude pre-cleaner {self.amp_precleaner!r}")
        if not callable(self.phase_precleaner) and self.phase_precleaner != "noisy_phase":
            raise ValueError(f"unknown phase pre-cleaner {self.phase_precleaner!r}")
        if self.noise_snr not in ("a_priori", "a_posteriori"):
            raise ValueError(f"unknown noise SNR source {self.noise_snr!r}")
        if self.integration not in ("numeric", "segment"):
            raise ValueError(f"unknown integration method {self.integration!r}")
        if self.integration == "segment" and self.variant.tracks_phase:
            raise ValueError("segment integration does not support phase tracking")
        self.framing.validate()

    @classmethod
    def for_rate(cls, sample_rate: int, **kw) -> "EnhancerConfig":
        return cls(FramingConfig.from_rate(sample_rate), **kw)

    def with_(self, **changes) -> "EnhancerConfig":
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict, sample_rate: int) -> "EnhancerConfig":
        """Build from flat key/value settings (a parsed config file).

        Framing keys ``frame_ms``, ``hop_ms``, ``modulation_ms`` and
        ``modulation_hop_ms`` go to the framing; the rest map to fields.
        """
        values = dict(values)
        frame_keys = ("frame_ms", "hop_ms", "modulation_ms", "modulation_hop_ms", "window")
        fkw = {k: values.pop(k) for k in frame_keys if k in values}
        framing = FramingConfig.from_rate(sample_rate, **fkw)
        known = {f.name for f in fields(cls)} - {"framing"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(framing, **values)


def load_config_file(path) -> dict:
    """Parse a flat ``key = value`` config file (TOML syntax)."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat key = value pairs; found tables {nested}")
    return data


@dataclass
class EnhancementReport:
    variant: str
    n_frames: int
    n_bins: int
    flags: dict = field(default_factory=lambda: dict.fromkeys(FLAG_NAMES, 0))
    s_prior: np.ndarray | None = None
    s_post: np.ndarray | None = None
    n_post: np.ndarray | None = None
    phase_magnitude: np.ndarray | None = None
    seg_snr_before: float | None = None
    seg_snr_after: float | None = None
    lsd_before: float | None = None
    lsd_after: float | None = None

    def count(self, name: str, mask) -> None:
        self.flags[name] += int(np.count_nonzero(mask))

    @property
    def total_flags(self) -> int:
        return sum(self.flags.values())

    def merge(self, other: "EnhancementReport") -> "EnhancementReport":
        """Combine flag counts of two reports (tracks are not carried)."""
        flags = {k: self.flags.get(k, 0) + other.flags.get(k, 0) for k in set(self.flags) | set(other.flags)}
        return EnhancementReport(
            self.variant if self.variant == other.variant else "mixed",
            self.n_frames + other.n_frames,
            max(self.n_bins, other.n_bins),
            flags,
        )

    def summary(self) -> dict:
        return {
            "type": "summary",
            "variant": self.variant,
            "frames": self.n_frames,
            "bins": self.n_bins,
            "flags": dict(self.flags),
            "seg_snr_before": self.seg_snr_before,
            "seg_snr_after": self.seg_snr_after,
            "lsd_before": self.lsd_before,
            "lsd_after": self.lsd_after,
        }

    def jsonl_lines(self):
        yield json.dumps(self.summary(), sort_keys=True)
        if self.s_post is None:
            return
        for t in range(self.n_frames):
            row = {
                "type": "frame",
                "frame": t,
                "s_prior_mean": float(self.s_prior[t].mean()),
                "s_post_mean": float(self.s_post[t].mean()),
                "n_post_mean": float(self.n_post[t].mean()),
            }
            if self.phase_magnitude is not None:
                row["phase_moment_mean"] = float(self.phase_magnitude[t].mean())
            yield json.dumps(row, sort_keys=True)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.jsonl_lines():
                fh.write(line + "\n")

    def write_tracks(self, directory) -> list[Path]:
        """One CSV per bin: ``frame,s_prior,s_post,n_post,phase_moment``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        mag = self.phase_magnitude
        if mag is None:
            mag = np.full_like(self.s_post, np.nan)
        frames = np.arange(self.n_frames)
        written = []
        for k in range(self.n_bins):
            path = out / f"bin{k:04d}.csv"
            table = np.column_stack([frames, self.s_prior[:, k], self.s_post[:, k], self.n_post[:, k], mag[:, k]])
            np.savetxt(path, table, delimiter=",", header="frame,s_prior,s_post,n_post,phase_moment",
                       comments="", fmt=["%d", "%.9g", "%.9g", "%.9g", "%.9g"])
            written.append(path)
        return written


# -- log-MMSE pre-cleaner ---------------------------------------------------------------


def logmmse_preclean(grid: StftGrid, noise_logpower, smoothing: float = DD_SMOOTHING,
                     xi_min: float = XI_MIN) -> np.ndarray:
    """Log-MMSE amplitudes with decision-directed a-priori SNR.

    ``noise_logpower`` is ``log E|N|^2`` per frame and bin. Bins with a
    zero noise estimate pass through with gain 1.
    """
    Y2 = grid.amplitude**2
    noise = np.exp(np.asarray(noise_logpower, dtype=np.float64))
    if noise.shape != Y2.shape:
        raise ValueError(f"noise track shape {noise.shape} != grid {Y2.shape}")
    silent = noise <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        post = np.where(silent, 1.0, Y2 / np.where(silent, 1.0, noise))
    gains = np.ones_like(Y2)
    prev = np.ones(Y2.shape[1])  # G^2 gamma of the previous frame
    for t in range(Y2.shape[0]):
        xi = decision_directed_snr(prev, post[t], smoothing, xi_min)
        g = np.where(silent[t], 1.0, logmmse_gain(xi, post[t]))
        gains[t] = g
        prev = g * g * post[t]
    return gains * grid.amplitude


# -- metrics ---------------------------------------------------------------------------


def _align(reference, test, framing: FramingConfig):
    r = np.asarray(reference, dtype=np.float64)
    x = np.asarray(test, dtype=np.float64)
    if abs(r.size - x.size) > framing.acoustic_frame_len:
        raise ValueError(f"signal lengths {r.size} and {x.size} differ by more than one frame")
    n = min(r.size, x.size)
    return r[:n], x[:n]


def segmental_snr(reference, test, framing: FramingConfig) -> float:
    """Frame-averaged SNR in dB with each frame clamped to [-10, 35]."""
    r, x = _align(reference, test, framing)
    L, H = framing.acoustic_frame_len, framing.acoustic_hop
    if r.size < L:
        raise InputTooShortError("signal shorter than one frame")
    idx = np.arange(0, r.size - L + 1, H)[:, None] + np.arange(L)
    sig = np.sum(r[idx] ** 2, axis=1)
    err = np.sum((r[idx] - x[idx]) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(sig / err)
    snr = np.where(err == 0, SEGSNR_RANGE[1], snr)
    snr = np.where((sig == 0) & (err > 0), SEGSNR_RANGE[0], snr)
    return float(np.mean(np.clip(snr, *SEGSNR_RANGE)))


def log_spectral_distance(reference, test, framing: FramingConfig) -> float:
    """Frame-averaged RMS difference of dB power spectra.

    Both spectra share one floor ``LSD_RANGE_DB`` below their joint peak,
    so the measure is symmetric in its arguments.
    """
    r, x = _align(reference, test, framing)
    cfg = replace(framing, pad=False)
    Pr = analyze(r, cfg).amplitude ** 2
    Px = analyze(x, cfg).amplitude ** 2
    floor = 10.0 ** (-LSD_RANGE_DB / 10.0) * max(Pr.max(), Px.max(), 1e-300)
    d = 10.0 * np.log10(np.maximum(Pr, floor)) - 10.0 * np.log10(np.maximum(Px, floor))
    return float(np.mean(np.sqrt(np.mean(d * d, axis=1))))


def metrics(reference, test, framing: FramingConfig) -> dict:
    return {
        "seg_snr_db": segmental_snr(reference, test, framing),
        "lsd_db": log_spectral_distance(reference, test, framing),
    }


# -- the enhancer ---------------------------------------------------------------------


def _transition_batch(coef, mean, eps):
    """Companion matrices for a batch of AR models: (B, p) -> (B, p, p)."""
    B, p = coef.shape
    A = np.zeros((B, p, p))
    A[:, 0, :] = -coef
    A[:, 1:, :-1] = np.eye(p - 1)
    Q = np.zeros((B, p, p))
    Q[:, 0, 0] = eps
    zeta = np.repeat(mean[:, None], p, axis=1)
    return A, Q, zeta


def _joint_transition(speech, noise):
    As, Qs, zs = _transition_batch(*speech)
    if noise is None:
        return As, Qs, zs
    An, Qn, zn = _transition_batch(*noise)
    B, p, q = As.shape[0], As.shape[1], An.shape[1]
    A = np.zeros((B, p + q, p + q))
    Q = np.zeros_like(A)
    A[:, :p, :p], A[:, p:, p:] = As, An
    Q[:, :p, :p], Q[:, p:, p:] = Qs, Qn
    return A, Q, np.concatenate([zs, zn], axis=1)


def _fit_tracks(track, cfg: EnhancerConfig, order: int, floor: float | None = None):
    """AR fits on every modulation window; arrays indexed (window, bin)."""
    mod = modulation_frames(track, cfg.framing)
    W, L, K = mod.windows.shape
    rows = np.moveaxis(mod.windows, 1, 2).reshape(W * K, L)
    a, mean, eps, ridge = fit_ar_batch(rows, order)
    eps = np.maximum(eps, cfg.innovation_floor if floor is None else floor)
    return mod.starts, L, (a.reshape(W, K, order), mean.reshape(W, K), eps.reshape(W, K)), ridge


def enhance(noisy, cfg: EnhancerConfig, global_prior: GlobalSpeechPrior | None = None,
            reference=None):
    """Enhance one signal; returns ``(enhanced, EnhancementReport)``.

    Per frame and bin: predict the joint state and phase moment, fuse the
    local prior with the global speech and noise priors, decorrelate, run
    the variant's update, and recorrelate. A bin whose update fails keeps
    its fused prior and is counted in the report. With ``reference`` the
    report includes metrics before and after.
    """
    fr = cfg.framing
    variant = cfg.variant
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.ndim != 1 or noisy.size <= fr.acoustic_frame_len:
        raise InputTooShortError(f"need a 1-D signal longer than one frame ({fr.acoustic_frame_len})")
    # reflected rather than zero edges: silent padding frames would sit far
    # below the noise floor and derail the AR fits at both ends
    edge = fr.acoustic_frame_len
    grid = analyze(np.pad(noisy, edge, mode="reflect"), replace(fr, pad=False))
    T, K = grid.n_frames, grid.n_bins
    if T < fr.modulation_frame_len:
        raise InputTooShortError(
            f"{T} frames is shorter than one modulation frame ({fr.modulation_frame_len})"
        )
    report = EnhancementReport(variant.value, T, K)
    y = grid.log_amplitude()
    theta = grid.phase

    # the noise prior for frame t uses the estimate up to frame t - 1
    noise_track = estimate_noise_track(y, snr=cfg.noise_snr)
    noise_log = np.concatenate([noise_track[:1], noise_track[:-1]])
    noise_logpower = np.log(log_to_power(noise_track))

    if callable(cfg.amp_precleaner):
        clean_amp = np.asarray(cfg.amp_precleaner(grid, noise_logpower), dtype=np.float64)
    elif cfg.amp_precleaner == "logmmse":
        clean_amp = logmmse_preclean(grid, noise_logpower)
    else:
        clean_amp = grid.amplitude
    clean_log = _floored_log(clean_amp)
    clean_phase = theta if not callable(cfg.phase_precleaner) else np.asarray(cfg.phase_precleaner(grid))

    starts, Lmod, speech_models, ridge = _fit_tracks(clean_log, cfg, cfg.p)
    report.count("ar_ridge", ridge)
    noise_models = None
    if variant.tracks_noise:
        _, _, noise_models, ridge = _fit_tracks(noise_log, cfg, cfg.q, cfg.noise_innovation_floor)
        report.count("ar_ridge", ridge)
    if variant.tracks_phase:
        mod = modulation_frames(np.exp(1j * clean_phase), fr)
        W = mod.windows.shape[0]
        rows = np.moveaxis(mod.windows, 1, 2).reshape(W * K, -1)
        ph_A, ph_eps = (x.reshape(W, K) for x in fit_complex_ar1_batch(rows))

    g_mean = g_var = None
    if global_prior is not None:
        if global_prior.n_bins != K or global_prior.sample_rate != fr.sample_rate:
            raise ValueError(
                f"global prior ({global_prior.n_bins} bins @ {global_prior.sample_rate} Hz) "
                f"does not match the framing ({K} bins @ {fr.sample_rate} Hz)"
            )
        mask = active_frames((clean_amp**2).sum(axis=1))
        matched = global_prior.match_level(clean_log, mask)
        g_mean, g_var = matched.shifted_mean(), matched.variance

    q = cfg.q if variant.tracks_noise else 0
    order = current_first_order(cfg.p, q)
    k = 2 if q else 1
    mean, cov, phase = initial_state_batch(clean_log[0], noise_log[0], theta[0], cfg.p, q)
    quad = sigma_points(cfg.sigma_R)
    r_sat = float(bessel_ratio(KAPPA_MAX))

    s_prior = np.empty((T, K))
    s_post = np.empty((T, K))
    n_post = np.empty((T, K))
    ph_mag = np.empty((T, K)) if variant.tracks_phase else None
    out_phase = theta.copy()

    for t in range(T):
        w = model_index(t, starts, Lmod)
        nm = None if noise_models is None else tuple(x[w] for x in noise_models)
        A, Q, zeta = _joint_transition(tuple(x[w] for x in speech_models), nm)
        mean, cov, rep = predict_joint_batch(mean, cov, A, Q, zeta)
        report.count("psd_repair", rep)

        mt, PA, PCb, gain, dridge = decorrelate_batch(mean, cov, order, k)
        report.count("decorrelation_ridge", dridge)
        m2 = np.zeros((K, 2))
        S2 = np.zeros((K, 2, 2))
        m2[:, 0] = mt[:, 0]
        S2[:, 0, 0] = PA[:, 0, 0]
        if k == 2 and cfg.noise_coupling:
            m2[:, 1] = mt[:, 1]
            S2[:] = PA
        else:
            S2[:, 1, 1] = np.inf
        m2, S2 = fuse_priors_batch(m2, S2, g_mean, g_var, noise_log[t],
                                   cfg.noise_prior_variance, cfg.prior_scale)
        s_prior[t] = m2[:, 0]

        ph_prior = None
        if variant.tracks_phase:
            ph_prior, clamped = predict_phase_batch(phase, ph_A[w], ph_eps[w])
            report.count("phase_clamp", clamped)
            report.count("kappa_saturated", np.abs(ph_prior) >= r_sat)

        res = update_batch(variant, m2, S2, y[t], theta=theta[t], phase=ph_prior, quad=quad,
                           iterations=cfg.iterations, tol=cfg.tol, method=cfg.integration)
        report.count("underflow", res.underflow)
        report.count("unconverged", res.unconverged)
        report.count("moment_floor", res.floored)
        pm, pc = res.mean, res.cov
        bad = ~(np.all(np.isfinite(pm), axis=1) & np.all(np.isfinite(pc), axis=(1, 2)))
        if variant.tracks_phase:
            bad |= ~np.isfinite(res.phase)
        if bad.any():
            report.count("nonfinite_fallback", bad)
            pm = np.where(bad[:, None], m2, pm)
            pc = np.where(bad[:, None, None], S2, pc)

        mt = mt.copy()
        if k == 2:
            mt[:, :2] = pm
            block = pc.copy()
            if not cfg.noise_coupling:
                block[:, 0, 1] = block[:, 1, 0] = 0.0
        else:
            mt[:, 0] = pm[:, 0]
            block = pc[:, :1, :1]
        mean, cov, rep = recorrelate_batch(mt, block, PCb, gain, order)
        report.count("psd_repair", rep)

        s_post[t] = pm[:, 0]
        n_post[t] = pm[:, 1]
        if variant.tracks_phase:
            post = np.where(bad, ph_prior, res.phase)
            r = np.abs(post)
            phase = np.where(r > 1.0, post / np.where(r > 1.0, r, 1.0), post)
            ph_mag[t] = np.abs(phase)
            out_phase[t] = np.where(ph_mag[t] > 0, np.angle(phase), theta[t])

    report.s_prior, report.s_post, report.n_post = s_prior, s_post, n_post
    report.phase_magnitude = ph_mag
    enhanced = synthesize(grid, s_post, out_phase)[edge : edge + noisy.size]
    if not np.all(np.isfinite(enhanced)):
        # every frame was guarded above, so this indicates an overflow in exp(s)
        nonfinite = ~np.isfinite(enhanced)
        report.count("nonfinite_fallback", nonfinite)
        enhanced = np.where(nonfinite, 0.0, enhanced)
    if reference is not None:
        before = metrics(reference, noisy, fr)
        after = metrics(reference, enhanced, fr)
        report.seg_snr_before, report.lsd_before = before["seg_snr_db"], before["lsd_db"]
        report.seg_snr_after, report.lsd_after = after["seg_snr_db"], after["lsd_db"]
    return enhanced, report


def _floored_log(amplitude, floor_range: float = LOG_FLOOR_RANGE):
    """Natural-log amplitude floored ``floor_range`` nepers below the peak."""
    a = np.asarray(amplitude, dtype=np.float64)
    peak = a.max()
    if peak <= 0:
        return np.full(a.shape, -floor_range)
    with np.errstate(divide="ignore"):
        la = np.log(a)
    return np.maximum(la, math.log(peak) - floor_range)


__all__ = [
    "EnhancementReport",
    "EnhancerConfig",
    "enhance",
    "load_config_file",
    "log_spectral_distance",
    "logmmse_gain",
    "logmmse_preclean",
    "metrics",
    "segmental_snr",
]
