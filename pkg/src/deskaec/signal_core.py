"""DSP primitives: STFT/ISTFT, log-mel analysis and inversion, Griffin-Lim,
cross-correlation alignment, SNR gains and WAV I/O.

Everything here is a pure function of its arguments. Waveforms are stored as
float32, spectra as complex128 so that phase-recovery loops do not drift.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import BadLag, ConfigError, NoSignal, RateMismatch, ShortInput

ROLES = (
    "target",
    "reference",
    "echoed_reference",
    "residual",
    "probe",
    "erased",
    "noise",
    "unspecified",
)

DEFAULT_SAMPLE_RATE = 16000
ISTFT_EPS = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    role: str = "unspecified"

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float32).reshape(-1)
        if x.size < 1:
            raise ShortInput("waveform must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples, role: str | None = None) -> "Waveform":
        return Waveform(samples, self.sample_rate, self.role if role is None else role)

    def with_role(self, role: str) -> "Waveform":
        return Waveform(self.samples, self.sample_rate, role)


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if min(self.window_len, self.hop, self.fft_size) <= 0:
            raise ConfigError("STFT sizes must be positive")
        if not (self.hop <= self.window_len <= self.fft_size):
            raise ConfigError("need hop <= window_len <= fft_size")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        return 1 + (num_samples - self.window_len) // self.hop

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.window_len)


@dataclass(frozen=True)
class MelConfig:
    num_mels: int = 80
    f_min: float = 125.0
    f_max: float = 7600.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.num_mels < 1:
            raise ConfigError("num_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max):
            raise ConfigError("need 0 <= f_min < f_max")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def check_rate(self, sample_rate: int) -> None:
        if self.f_max > sample_rate / 2:
            raise ConfigError(f"f_max {self.f_max} exceeds Nyquist of {sample_rate} Hz")


@dataclass(frozen=True)
class Spectrogram:
    """T x F complex STFT frames."""

    frames: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        z = np.asarray(self.frames, dtype=np.complex128)
        if z.ndim != 2 or z.shape[1] != self.config.num_bins:
            raise ValueError(
                f"spectrogram must be T x {self.config.num_bins}, got {z.shape}"
            )
        if not np.all(np.isfinite(z)):
            raise ValueError("spectrogram entries must be finite")
        object.__setattr__(self, "frames", z)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass(frozen=True)
class LogMelFrames:
    """T x M natural-log mel energies."""

    frames: np.ndarray
    mel_config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        m = np.asarray(self.frames, dtype=np.float32)
        if m.ndim != 2 or m.shape[1] != self.mel_config.num_mels:
            raise ValueError(
                f"log-mel frames must be T x {self.mel_config.num_mels}, got {m.shape}"
            )
        object.__setattr__(self, "frames", m)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@functools.lru_cache(maxsize=16)
def _window(kind: str, n: int) -> np.ndarray:
    if kind == "rectangular":
        w = np.ones(n)
    else:
        w = sps.get_window("hann", n, fftbins=True)
    w.flags.writeable = False
    return w


def _frame(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.num_frames(x.size)
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return x[idx]


def _stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if x.size < cfg.window_len:
        raise ShortInput(f"signal of {x.size} samples is shorter than window {cfg.window_len}")
    return np.fft.rfft(_frame(x, cfg) * cfg.window_array(), n=cfg.fft_size, axis=1)


def stft(wave: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Frames without padding: T = 1 + (len - window_len) // hop."""
    x = np.asarray(wave.samples, dtype=np.float64)
    return Spectrogram(_stft_array(x, cfg), cfg, wave.sample_rate)


def _overlap_add(frames_td: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = frames_td.shape[0]
    w = cfg.window_array()
    length = (n_frames - 1) * cfg.hop + cfg.window_len
    out = np.zeros(length)
    wsum = np.zeros(length)
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.window_len)
        out[sl] += frames_td[t] * w
        wsum[sl] += w * w
    return out / np.maximum(wsum, ISTFT_EPS)


def _istft_array(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    frames_td = np.fft.irfft(frames, n=cfg.fft_size, axis=1)[:, : cfg.window_len]
    return _overlap_add(frames_td, cfg)


def istft(spec: Spectrogram) -> Waveform:
    """Least-squares overlap-add inverse (synthesis window = analysis window)."""
    return Waveform(_istft_array(spec.frames, spec.config), spec.sample_rate)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(mel: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    pts = np.linspace(_hz_to_mel(mel.f_min), _hz_to_mel(mel.f_max), mel.num_mels + 2)
    return _mel_to_hz(pts[1:-1])


@functools.lru_cache(maxsize=32)
def mel_filterbank(mel: MelConfig, cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """M x F matrix of unit-peak triangles on the HTK mel scale."""
    mel.check_rate(sample_rate)
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(mel.f_min), _hz_to_mel(mel.f_max), mel.num_mels + 2)
    )
    freqs = np.arange(cfg.num_bins) * sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


@functools.lru_cache(maxsize=32)
def _mel_pinv(mel: MelConfig, cfg: StftConfig, sample_rate: int) -> np.ndarray:
    p = np.linalg.pinv(mel_filterbank(mel, cfg, sample_rate))
    p.flags.writeable = False
    return p


def log_mel_from_magnitude(
    magnitude: np.ndarray, mel: MelConfig, cfg: StftConfig, sample_rate: int
) -> LogMelFrames:
    fb = mel_filterbank(mel, cfg, sample_rate)
    energies = np.asarray(magnitude, dtype=np.float64) @ fb.T
    return LogMelFrames(np.log(np.maximum(energies, mel.log_floor)), mel)


def log_mel(spec: Spectrogram, mel: MelConfig = MelConfig()) -> LogMelFrames:
    """Mel filterbank on the magnitude spectrum, then floored natural log."""
    return log_mel_from_magnitude(spec.magnitude(), mel, spec.config, spec.sample_rate)


def wave_to_log_mel(
    wave: Waveform, cfg: StftConfig = StftConfig(), mel: MelConfig = MelConfig()
) -> LogMelFrames:
    return log_mel(stft(wave, cfg), mel)


def mel_pseudo_inverse(
    frames: LogMelFrames,
    cfg: StftConfig = StftConfig(),
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> np.ndarray:
    """Approximate T x F linear magnitude whose mel projection matches ``frames``."""
    pinv = _mel_pinv(frames.mel_config, cfg, sample_rate)
    mag = np.exp(np.asarray(frames.frames, dtype=np.float64)) @ pinv.T
    return np.maximum(mag, 0.0)


def spectral_convergence(estimate_mag: np.ndarray, magnitude: np.ndarray) -> float:
    denom = np.linalg.norm(magnitude)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(estimate_mag - magnitude) / denom)


def _project_magnitude(s: np.ndarray, mag: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.abs(s)
    return mag * np.where(a > 0, s / np.where(a > 0, a, 1.0), 1.0), a


def griffin_lim(
    magnitude: np.ndarray,
    cfg: StftConfig = StftConfig(),
    iters: int = 60,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    momentum: float = 0.99,
) -> Tuple[Waveform, List[float]]:
    """Recover a waveform whose STFT magnitude approximates ``magnitude``.

    Starts from zero phase. Each iteration inverts the current complex
    estimate, re-analyses it and swaps the analysed magnitude for the target
    one while keeping the phase. With ``momentum > 0`` the estimate is
    extrapolated along the last update (fast Griffin-Lim); a step whose
    spectral convergence would rise is redone as a plain projection and the
    momentum restarts, so the returned error sequence never increases.
    ``momentum=0`` is the textbook iteration.

    Returns the final inverse and the spectral convergence after each
    iteration.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[1] != cfg.num_bins:
        raise ValueError(f"magnitude must be T x {cfg.num_bins}")
    if np.any(mag < 0) or not np.all(np.isfinite(mag)):
        raise ValueError("magnitude entries must be finite and >= 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    length = (mag.shape[0] - 1) * cfg.hop + cfg.window_len
    if not np.any(mag):
        return Waveform(np.zeros(length), sample_rate), [0.0] * iters

    current = mag.astype(np.complex128)
    previous = None
    errors: List[float] = []
    x = None
    for _ in range(iters):
        if previous is None or momentum == 0.0:
            estimate = current
        else:
            estimate = current + momentum * (current - previous)
        x = _istft_array(estimate, cfg)
        nxt, a = _project_magnitude(_stft_array(x, cfg), mag)
        sc = spectral_convergence(a, mag)
        if momentum > 0.0 and previous is not None and sc > errors[-1]:
            x = _istft_array(current, cfg)
            nxt, a = _project_magnitude(_stft_array(x, cfg), mag)
            sc = spectral_convergence(a, mag)
            previous = None
        else:
            previous = current
        current = nxt
        errors.append(sc)
    return Waveform(x, sample_rate), errors


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def xcorr_align(probe: Waveform, reference: Waveform, max_lag: int) -> int:
    """Integer lag maximizing the probe/reference cross-correlation.

    A positive lag means the reference has to be delayed by that many
    samples to line up with the probe.
    """
    if probe.sample_rate != reference.sample_rate:
        raise RateMismatch("probe and reference sample rates differ")
    p = np.asarray(probe.samples, dtype=np.float64)
    r = np.asarray(reference.samples, dtype=np.float64)
    if rms(p) <= 1e-6 or rms(r) <= 1e-6:
        raise NoSignal("probe or reference is silent")
    if max_lag < 0 or max_lag >= min(p.size, r.size):
        raise BadLag(f"max_lag {max_lag} must be in [0, {min(p.size, r.size)})")
    corr = sps.correlate(p, r, mode="full", method="fft")
    lags = sps.correlation_lags(p.size, r.size, mode="full")
    keep = np.abs(lags) <= max_lag
    return int(lags[keep][np.argmax(corr[keep])])


def trim_to_lag(probe: np.ndarray, reference: np.ndarray, lag: int) -> Tuple[slice, slice]:
    """Slices selecting the overlap of ``probe`` and ``reference`` delayed by ``lag``."""
    if lag >= 0:
        n = min(probe.size - lag, reference.size)
        return slice(lag, lag + n), slice(0, n)
    n = min(probe.size, reference.size + lag)
    return slice(0, n), slice(-lag, -lag + n)


def gain_for_snr(signal: Waveform, interference: Waveform, snr_db: float) -> float:
    """Gain g so that 10*log10(P_signal / (g^2 * P_interference)) == snr_db."""
    ps, pi = power(signal.samples), power(interference.samples)
    if pi <= 1e-16:
        raise NoSignal("interference is silent")
    if ps <= 1e-16:
        raise NoSignal("signal is silent")
    return float(np.sqrt(ps / (pi * 10.0 ** (snr_db / 10.0))))


def read_wav(
    path: Union[str, Path], expected_rate: int | None = None, role: str = "unspecified"
) -> Waveform:
    """Read a mono PCM16 or float32 WAV file."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono WAV files are supported")
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        x = data
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise RateMismatch(f"{path}: sample rate {rate} != expected {expected_rate}")
    return Waveform(x, rate, role)


def write_wav(path: Union[str, Path], wave: Waveform, pcm16: bool = False) -> None:
    x = wave.samples
    if pcm16:
        x = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, x)
