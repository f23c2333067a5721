"""Synthetic source audio: speech-like babble, keyword tokens and noise.

These stand in for recorded corpora. All generators are deterministic in
their seed.
"""

from __future__ import annotations

import numpy as np

from .signal_core import DEFAULT_SAMPLE_RATE, Waveform


def _resonance(freqs: np.ndarray, center, bandwidth) -> np.ndarray:
    # second-order resonance magnitude, unit gain at the center
    return 1.0 / np.sqrt(1.0 + ((freqs - center) / (0.5 * bandwidth)) ** 2)


def _normalize(x: np.ndarray, level: float) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x if peak == 0 else x * (level / peak)


def speech_like(
    seed: int,
    duration: float = 1.0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    level: float = 0.5,
    role: str = "reference",
) -> Waveform:
    """Harmonic babble: 3-5 formant-weighted partials, syllable-rate AM.

    The fundamental glides slowly, formant centers jump once per syllable,
    and the 2-8 Hz envelope goes fully silent between syllables.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    f0_base = rng.uniform(90.0, 240.0)
    f0 = f0_base * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t + rng.uniform(0, 6.3)))
    syl_rate = rng.uniform(2.0, 8.0)
    syllable = np.floor(t * syl_rate + rng.uniform()).astype(int)
    n_syl = syllable.max() + 1
    formants = np.stack(
        [
            rng.uniform(300, 900, n_syl),
            rng.uniform(900, 2500, n_syl),
            rng.uniform(2200, 3500, n_syl),
        ],
        axis=1,
    )[syllable]

    n_partials = int(rng.integers(3, 6))
    phase0 = np.cumsum(2 * np.pi * f0 / sample_rate)
    x = np.zeros(n)
    # partial j tracks formant j (mod 3) via its harmonic number
    for j in range(n_partials):
        target = formants[:, j % 3] * (1.0 + 0.15 * (j // 3))
        k = np.maximum(1, np.round(target / f0))
        k = _smooth_steps(k, sample_rate // 100)
        amp = _resonance(k * f0, formants[:, j % 3], 150.0 + 60.0 * j) / (1.0 + 0.5 * j)
        x += amp * np.sin(k * phase0 + rng.uniform(0, 2 * np.pi))

    env = np.maximum(0.0, np.sin(np.pi * (t * syl_rate + rng.uniform()))) ** 1.5
    x *= env
    return Waveform(_normalize(x, level), sample_rate, role)


def _smooth_steps(k: np.ndarray, width: int) -> np.ndarray:
    # short moving average so harmonic-number jumps do not click
    if width <= 1:
        return k
    kernel = np.ones(width) / width
    return np.convolve(np.pad(k, (width // 2, width - 1 - width // 2), mode="edge"), kernel, "valid")


def colored_noise(
    seed: int,
    duration: float = 1.0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    level: float = 0.3,
) -> Waveform:
    """Pinkish background noise with slow level fluctuation."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    tilt = rng.uniform(0.5, 1.2)
    spec *= 1.0 / np.maximum(f, 50.0) ** (tilt / 2)
    x = np.fft.irfft(spec, n)
    t = np.arange(n) / sample_rate
    x *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 6.3))
    return Waveform(_normalize(x, level), sample_rate, "noise")


def keyword_templates(num_classes: int, seed: int = 1234) -> np.ndarray:
    """Per-class formant trajectories: K x 3 segments x (F1, F2).

    Templates are drawn with a minimum separation so that classes are
    acoustically distinct.
    """
    rng = np.random.default_rng(seed)
    templates = []
    while len(templates) < num_classes:
        cand = np.stack(
            [rng.uniform(300, 900, 3), rng.uniform(900, 2600, 3)], axis=1
        )
        ok = all(
            np.mean(np.abs(np.log(cand / other))) > 0.25 for other in templates
        )
        if ok:
            templates.append(cand)
    return np.array(templates)


def keyword_token(
    label: int,
    seed: int,
    templates: np.ndarray,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    level: float = 0.5,
) -> Waveform:
    """One utterance of keyword ``label``: pitch and duration randomized."""
    rng = np.random.default_rng(seed)
    duration = rng.uniform(0.4, 0.8)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    u = t / duration

    tpl = templates[label] * rng.uniform(0.95, 1.05, size=(1, 2))
    seg_pos = np.array([0.0, 0.5, 1.0])
    f1 = np.interp(u, seg_pos, tpl[:, 0])
    f2 = np.interp(u, seg_pos, tpl[:, 1])

    f0_start = rng.uniform(100.0, 220.0)
    f0 = f0_start * (1.0 + rng.uniform(-0.15, 0.1) * u)
    phase = np.cumsum(2 * np.pi * f0 / sample_rate) + rng.uniform(0, 2 * np.pi)
    x = np.zeros(n)
    max_k = int(4000 / f0.min())
    for k in range(1, max_k + 1):
        fk = k * f0
        amp = (_resonance(fk, f1, 120.0) + 0.7 * _resonance(fk, f2, 180.0)) / np.sqrt(k)
        amp = np.where(fk < sample_rate / 2 - 200, amp, 0.0)
        x += amp * np.sin(k * phase)
    ramp = int(0.04 * sample_rate)
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[-ramp:] = np.linspace(1, 0, ramp)
    return Waveform(_normalize(x * env, level), sample_rate, "target")


def place_in_silence(
    wave: Waveform, total_samples: int, seed: int, role: str | None = None
) -> Waveform:
    """Embed ``wave`` at a random offset inside a zero buffer."""
    rng = np.random.default_rng(seed)
    if len(wave) > total_samples:
        raise ValueError("token longer than the requested buffer")
    out = np.zeros(total_samples, dtype=np.float32)
    start = int(rng.integers(0, total_samples - len(wave) + 1))
    out[start : start + len(wave)] = wave.samples
    return Waveform(out, wave.sample_rate, role or wave.role)
