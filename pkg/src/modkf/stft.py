"""STFT analysis/synthesis, modulation framing and WAV I/O.

Analysis uses a (by default periodic Hann) window; synthesis is weighted
overlap-add with the same window, normalised by the summed squared-window
envelope, so an unmodified grid reconstructs its input exactly wherever
that envelope is non-zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.io.wavfile
import scipy.signal

from modkf.errors import AudioFormatError, InputTooShortError, ShapeError

# log|Y| is clamped this far (natural-log units) below the utterance maximum
LOG_FLOOR_RANGE = 30.0


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@dataclass(frozen=True)
class FramingConfig:
    """Acoustic and modulation framing parameters.

    Lengths and hops are in samples (acoustic) or acoustic frames
    (modulation). Use :meth:`from_rate` to get the default 32 ms / 8 ms
    acoustic and 64 ms / 8 ms modulation layout for a sample rate.
    """

    sample_rate: int
    acoustic_frame_len: int
    acoustic_hop: int
    modulation_frame_len: int = 8
    modulation_hop: int = 1
    fft_size: int = 0
    window: str = "hann"
    pad: bool = True

    def __post_init__(self):
        if self.fft_size == 0:
            object.__setattr__(self, "fft_size", _next_pow2(self.acoustic_frame_len))
        self.validate()

    @classmethod
    def from_rate(
        cls,
        sample_rate: int,
        frame_ms: float = 32.0,
        hop_ms: float = 8.0,
        modulation_ms: float = 64.0,
        modulation_hop_ms: float = 8.0,
        **kwargs,
    ) -> "FramingConfig":
        frame = int(round(frame_ms * 1e-3 * sample_rate))
        hop = int(round(hop_ms * 1e-3 * sample_rate))
        mod_len = max(1, int(round(modulation_ms / hop_ms)))
        mod_hop = max(1, int(round(modulation_hop_ms / hop_ms)))
        return cls(
            sample_rate=sample_rate,
            acoustic_frame_len=frame,
            acoustic_hop=hop,
            modulation_frame_len=mod_len,
            modulation_hop=mod_hop,
            **kwargs,
        )

    def with_(self, **changes) -> "FramingConfig":
        return replace(self, **changes)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0 < self.acoustic_hop <= self.acoustic_frame_len:
            raise ValueError("need 0 < acoustic_hop <= acoustic_frame_len")
        if self.fft_size < self.acoustic_frame_len:
            raise ValueError("fft_size must be >= acoustic_frame_len")
        if self.modulation_frame_len < 1 or self.modulation_hop < 1:
            raise ValueError("modulation framing must be positive")
        w = self.analysis_window()
        overlap = self.acoustic_frame_len - self.acoustic_hop
        if not scipy.signal.check_COLA(w**2, self.acoustic_frame_len, overlap):
            raise ValueError(
                f"window {self.window!r} does not overlap-add at hop {self.acoustic_hop}"
            )

    def analysis_window(self) -> np.ndarray:
        if self.window in ("rect", "rectangular", "boxcar"):
            return np.ones(self.acoustic_frame_len)
        return scipy.signal.get_window(self.window, self.acoustic_frame_len, fftbins=True)


@dataclass
class StftGrid:
    """Complex STFT coefficients indexed ``(frame, bin)``.

    ``length`` is the number of signal samples the grid was computed from
    and ``offset`` the zero padding prepended before framing.
    """

    coefficients: np.ndarray
    framing: FramingConfig
    length: int
    offset: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.coefficients
        if c.ndim != 2 or c.shape[1] != self.framing.n_bins:
            raise ShapeError(
                f"coefficients must be (frames, {self.framing.n_bins}), got {c.shape}"
            )
        if not np.all(np.isfinite(c)):
            raise ValueError("STFT coefficients must be finite")

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_bins(self) -> int:
        return self.coefficients.shape[1]

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.coefficients)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.coefficients)

    def log_amplitude(self, floor_range: float = LOG_FLOOR_RANGE) -> np.ndarray:
        """``log|Y|`` clamped at ``max - floor_range``; never ``-inf``."""
        with np.errstate(divide="ignore"):
            la = np.log(self.amplitude)
        top = la.max() if np.isfinite(la).any() else 0.0
        return np.maximum(la, top - floor_range)


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    return int(math.ceil((n_samples - frame_len) / hop)) + 1


def analyze(signal, cfg: FramingConfig) -> StftGrid:
    """Short-time Fourier transform of a mono signal.

    With ``cfg.pad`` the signal gets one frame of zeros at each end, so
    every original sample sits in a fully overlapped region.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("analyze expects a 1-D signal")
    n = x.size
    L, H = cfg.acoustic_frame_len, cfg.acoustic_hop
    if n < L:
        raise InputTooShortError(f"signal has {n} samples, need at least one frame ({L})")
    offset = L if cfg.pad else 0
    padded = np.concatenate([np.zeros(offset), x, np.zeros(offset)])
    T = frame_count(padded.size, L, H)
    need = (T - 1) * H + L
    if need > padded.size:
        padded = np.concatenate([padded, np.zeros(need - padded.size)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, L)[::H][:T]
    coeffs = np.fft.rfft(frames * cfg.analysis_window(), n=cfg.fft_size, axis=-1)
    return StftGrid(coeffs, cfg, length=n, offset=offset)


def synthesize(grid: StftGrid, amplitudes, phases) -> np.ndarray:
    """Weighted overlap-add reconstruction from log-amplitudes and phases.

    ``amplitudes`` holds natural-log magnitudes; ``-inf`` entries give
    exact zeros.
    """
    la = np.asarray(amplitudes, dtype=np.float64)
    ph = np.asarray(phases, dtype=np.float64)
    shape = grid.coefficients.shape
    if la.shape != shape or ph.shape != shape:
        raise ShapeError(f"amplitude/phase shapes {la.shape}, {ph.shape} != grid {shape}")
    cfg = grid.framing
    L, H = cfg.acoustic_frame_len, cfg.acoustic_hop
    spec = np.exp(la) * np.exp(1j * ph)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, :L]
    w = cfg.analysis_window()
    T = grid.n_frames
    total = (T - 1) * H + L
    out = np.zeros(total)
    env = np.zeros(total)
    wf = frames * w
    w2 = w * w
    for t in range(T):
        out[t * H : t * H + L] += wf[t]
        env[t * H : t * H + L] += w2
    nz = env > 1e-10 * w2.max()
    out[nz] /= env[nz]
    out[~nz] = 0.0
    return out[grid.offset : grid.offset + grid.length]


def resynthesize(grid: StftGrid, coefficients) -> np.ndarray:
    """Inverse transform of a complex coefficient matrix shaped like ``grid``."""
    c = np.asarray(coefficients)
    with np.errstate(divide="ignore"):
        return synthesize(grid, np.log(np.abs(c)), np.angle(c))


class ModulationFrames(NamedTuple):
    windows: np.ndarray  # (n_windows, modulation_frame_len, ...)
    starts: np.ndarray
    degenerate: bool


def modulation_frames(track, cfg: FramingConfig) -> ModulationFrames:
    """Slice a track (time on axis 0) into overlapping modulation windows.

    A track shorter than one modulation frame yields a single truncated
    window with ``degenerate=True``.
    """
    x = np.asarray(track)
    n = x.shape[0]
    L, H = cfg.modulation_frame_len, cfg.modulation_hop
    if n < L:
        return ModulationFrames(x[None, ...].copy(), np.array([0]), True)
    starts = np.arange(0, n - L + 1, H)
    win = np.lib.stride_tricks.sliding_window_view(x, L, axis=0)[::H]
    # sliding_window_view puts the window axis last; move it next to the window index
    win = np.moveaxis(win, -1, 1)
    return ModulationFrames(win, starts, False)


def model_index(frame: int, starts: np.ndarray, window_len: int) -> int:
    """Index of the latest modulation window that ends at or before ``frame``."""
    ends = starts + window_len - 1
    k = int(np.searchsorted(ends, frame, side="right")) - 1
    return max(k, 0)


# -- WAV I/O -----------------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM or 32-bit float WAV as float64 in [-1, 1]."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise AudioFormatError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise AudioFormatError(
            f"{path} has {data.shape[1]} channels; downmix to mono before processing"
        )
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    return x, int(rate)


def write_wav(path, signal, sample_rate: int, fmt: str = "int16") -> None:
    """Write a mono WAV; ``fmt`` is ``"int16"`` or ``"float32"``."""
    x = np.asarray(signal, dtype=np.float64)
    if fmt == "int16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    scipy.io.wavfile.write(path, int(sample_rate), data)
