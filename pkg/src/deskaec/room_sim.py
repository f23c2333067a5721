"""Image-source room impulse responses for a smart-speaker geometry.

The microphone and loudspeaker sit a few centimetres apart; the talker is
placed at a log-normally distributed distance and a restricted elevation.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy import signal as sps
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import ConfigError, Infeasible, RateMismatch
from .signal_core import DEFAULT_SAMPLE_RATE, Waveform, read_wav, write_wav

Vec3 = Tuple[float, float, float]
SOURCE_KINDS = ("target_path", "loudspeaker_path")
TRUNCATION_DB = 60.0


@dataclass(frozen=True)
class RoomConstraints:
    dims_min: Vec3 = (2.5, 2.5, 2.2)
    dims_max: Vec3 = (10.0, 10.0, 4.5)
    distance_range: Tuple[float, float] = (0.25, 8.0)
    distance_mean: float = 2.5
    distance_log_sigma: float = 0.7
    elevation_range_deg: Tuple[float, float] = (45.0, 135.0)
    absorption_range: Tuple[float, float] = (0.3, 0.8)
    loudspeaker_offset: Vec3 = (0.05, 0.0, 0.0)
    wall_margin: float = 0.1
    max_image_order: int = 10
    speed_of_sound: float = 343.0

    def __post_init__(self):
        lo, hi = self.elevation_range_deg
        if not (0.0 <= lo <= hi <= 180.0):
            raise ConfigError("elevation bounds must satisfy 0 <= min <= max <= 180 degrees")
        for a, b in zip(self.dims_min, self.dims_max):
            if not 0 < a <= b:
                raise ConfigError("room dimension bounds must satisfy 0 < min <= max")
        d0, d1 = self.distance_range
        if not 0 < d0 <= d1:
            raise ConfigError("distance bounds must satisfy 0 < min <= max")
        a0, a1 = self.absorption_range
        if not 0 < a0 <= a1 <= 1:
            raise ConfigError("absorption bounds must lie in (0, 1]")
        if self.max_image_order < 0 or self.speed_of_sound <= 0:
            raise ConfigError("invalid image order or speed of sound")

    @property
    def distance_log_mu(self) -> float:
        return _calibrate_log_mu(
            self.distance_range, self.distance_mean, self.distance_log_sigma
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RoomConstraints":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown room constraint keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _max_reach(span: np.ndarray, el_lo: float, el_hi: float) -> float:
    """Longest talker distance that fits the largest room at some allowed elevation."""
    theta = np.linspace(el_lo, el_hi, 721)
    horiz = math.hypot(span[0], span[1])
    with np.errstate(divide="ignore"):
        fit = np.minimum(horiz / np.abs(np.sin(theta)), span[2] / np.abs(np.cos(theta)))
    return float(np.max(fit))


@functools.lru_cache(maxsize=64)
def _calibrate_log_mu(bounds: Tuple[float, float], mean: float, sigma: float) -> float:
    """Location of a log-normal truncated to ``bounds`` whose mean is ``mean``."""
    la, lb = math.log(bounds[0]), math.log(bounds[1])
    if not bounds[0] < mean < bounds[1]:
        raise Infeasible(f"mean distance {mean} outside {bounds}")

    def truncated_mean(mu):
        z = norm.cdf((lb - mu) / sigma) - norm.cdf((la - mu) / sigma)
        num = norm.cdf((lb - mu - sigma**2) / sigma) - norm.cdf((la - mu - sigma**2) / sigma)
        return math.exp(mu + sigma**2 / 2) * num / z - mean

    return float(brentq(truncated_mean, la - 5 * sigma, lb + 5 * sigma))


@dataclass(frozen=True)
class RoomConfig:
    dimensions: Vec3
    mic_position: Vec3
    loudspeaker_position: Vec3
    target_position: Vec3
    absorption: float
    max_image_order: int = 10
    speed_of_sound: float = 343.0
    room_id: str = ""

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=float)
        for name in ("mic_position", "loudspeaker_position", "target_position"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
                raise ConfigError(f"{name} {tuple(p)} is not strictly inside the room {tuple(dims)}")
        if not 0 < self.absorption <= 1:
            raise ConfigError("absorption must be in (0, 1]")
        if self.max_image_order < 0:
            raise ConfigError("max_image_order must be >= 0")

    @property
    def target_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.target_position, self.mic_position)))

    @property
    def target_elevation_deg(self) -> float:
        """Polar angle of the talker seen from the mic; 90 means level with it."""
        v = np.subtract(self.target_position, self.mic_position)
        return float(np.degrees(np.arccos(v[2] / np.linalg.norm(v))))

    def source_position(self, source: str) -> Vec3:
        if source == "target_path":
            return self.target_position
        if source == "loudspeaker_path":
            return self.loudspeaker_position
        raise ValueError(f"unknown source kind {source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoomConfig":
        d = dict(d)
        for k in ("dimensions", "mic_position", "loudspeaker_position", "target_position"):
            d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    source_kind: str = "target_path"

    def __post_init__(self):
        h = np.array(self.taps, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(h)) or not np.any(h):
            raise ValueError("RIR taps must be finite with at least one nonzero tap")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.source_kind!r}")
        h.flags.writeable = False
        object.__setattr__(self, "taps", h)

    @property
    def leading_tap(self) -> int:
        return int(np.flatnonzero(self.taps)[0])

    def energy(self) -> float:
        return float(np.sum(self.taps.astype(np.float64) ** 2))


def sample_room_config(
    rng_seed: int, constraints: RoomConstraints = RoomConstraints(), max_attempts: int = 2000
) -> RoomConfig:
    """Draw one room. Deterministic in ``rng_seed``.

    The talker distance is drawn first from the truncated log-normal; room
    size, direction and microphone placement are then redrawn until the
    geometry fits, which leaves the distance distribution untouched.
    """
    c = constraints
    rng = np.random.default_rng(rng_seed)
    margin = c.wall_margin
    offset = np.asarray(c.loudspeaker_offset, dtype=float)
    span = np.asarray(c.dims_max) - 2 * margin - np.abs(offset)
    if np.any(span <= 0):
        raise Infeasible("largest room cannot hold microphone and loudspeaker")

    el_lo, el_hi = np.radians(c.elevation_range_deg)
    reach = _max_reach(span, el_lo, el_hi)
    if c.distance_range[0] >= reach:
        raise Infeasible(
            f"minimum distance {c.distance_range[0]} m cannot fit inside rooms up to {c.dims_max}"
        )
    if c.distance_range[1] > reach:
        raise Infeasible(
            f"maximum distance {c.distance_range[1]} m exceeds the reachable {reach:.2f} m"
        )

    mu, sigma = c.distance_log_mu, c.distance_log_sigma
    la, lb = math.log(c.distance_range[0]), math.log(c.distance_range[1])
    u = rng.uniform(norm.cdf((la - mu) / sigma), norm.cdf((lb - mu) / sigma))
    distance = float(np.clip(math.exp(mu + sigma * norm.ppf(u)), *c.distance_range))

    for _ in range(max_attempts):
        dims = rng.uniform(c.dims_min, c.dims_max)
        elevation = rng.uniform(el_lo, el_hi)
        azimuth = rng.uniform(0.0, 2 * np.pi)
        direction = np.array(
            [
                np.sin(elevation) * np.cos(azimuth),
                np.sin(elevation) * np.sin(azimuth),
                np.cos(elevation),
            ]
        )
        v = distance * direction
        lo = margin + np.maximum(0.0, -v) + np.maximum(0.0, -offset)
        hi = dims - margin - np.maximum(0.0, v) - np.maximum(0.0, offset)
        if np.all(hi > lo):
            mic = rng.uniform(lo, hi)
            absorption = float(rng.uniform(*c.absorption_range))
            return RoomConfig(
                dimensions=tuple(float(x) for x in dims),
                mic_position=tuple(float(x) for x in mic),
                loudspeaker_position=tuple(float(x) for x in mic + offset),
                target_position=tuple(float(x) for x in mic + v),
                absorption=absorption,
                max_image_order=c.max_image_order,
                speed_of_sound=c.speed_of_sound,
                room_id=f"room-{rng_seed}",
            )
    raise Infeasible(f"no feasible geometry for distance {distance:.2f} m after {max_attempts} draws")


def image_sources(room: RoomConfig, source: str) -> Tuple[np.ndarray, np.ndarray]:
    """Image positions (N x 3) and their reflection counts, up to max order."""
    order = room.max_image_order
    n = np.arange(-order, order + 1)
    per_axis_pos, per_axis_refl = [], []
    src = np.asarray(room.source_position(source), dtype=float)
    dims = np.asarray(room.dimensions, dtype=float)
    for axis in range(3):
        pos = np.concatenate([src[axis] + 2 * n * dims[axis], -src[axis] + 2 * n * dims[axis]])
        refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
        per_axis_pos.append(pos)
        per_axis_refl.append(refl)
    gx, gy, gz = np.meshgrid(*per_axis_refl, indexing="ij")
    total = (gx + gy + gz).reshape(-1)
    keep = total <= order
    px, py, pz = np.meshgrid(*per_axis_pos, indexing="ij")
    positions = np.stack([px.reshape(-1), py.reshape(-1), pz.reshape(-1)], axis=1)[keep]
    return positions, total[keep]


def compute_rir(
    room: RoomConfig, source: str, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Rir:
    """Image-source RIR with nearest-sample delays.

    Each image contributes ``(1 - absorption) ** reflections / distance`` at
    ``round(distance / c * fs)``. The tail is cut once the remaining energy
    falls 60 dB below the peak tap energy.
    """
    positions, reflections = image_sources(room, source)
    dist = np.linalg.norm(positions - np.asarray(room.mic_position), axis=1)
    delays = np.rint(dist / room.speed_of_sound * sample_rate).astype(np.int64)
    amps = (1.0 - room.absorption) ** reflections / dist
    live = amps > 0
    delays, amps = delays[live], amps[live]
    h = np.zeros(delays.max() + 1)
    np.add.at(h, delays, amps)

    energy = h * h
    peak_idx = int(np.argmax(energy))
    tail = np.cumsum(energy[::-1])[::-1]  # tail[k] = energy at indices >= k
    threshold = energy[peak_idx] * 10.0 ** (-TRUNCATION_DB / 10.0)
    after = np.append(tail[1:], 0.0)  # energy strictly after k
    cut = peak_idx + int(np.argmax(after[peak_idx:] < threshold))
    return Rir(h[: cut + 1], sample_rate, source)


def apply_rir(wave: Waveform, rir: Rir, role: str | None = None) -> Waveform:
    """Full linear convolution: len(wave) + len(rir) - 1 samples."""
    if wave.sample_rate != rir.sample_rate:
        raise RateMismatch(f"waveform at {wave.sample_rate} Hz, RIR at {rir.sample_rate} Hz")
    y = sps.fftconvolve(
        np.asarray(wave.samples, dtype=np.float64), np.asarray(rir.taps, dtype=np.float64)
    )
    return Waveform(y, wave.sample_rate, role or wave.role)


def save_rir(path: Union[str, Path], rir: Rir, room: RoomConfig) -> None:
    """Write ``path`` (float32 WAV) plus ``path.json`` holding the room."""
    path = Path(path)
    write_wav(path, Waveform(rir.taps, rir.sample_rate))
    sidecar = {"room": room.to_dict(), "source_kind": rir.source_kind}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def load_rir(path: Union[str, Path]) -> Tuple[Rir, RoomConfig]:
    path = Path(path)
    wave = read_wav(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    return Rir(wave.samples, wave.sample_rate, sidecar["source_kind"]), RoomConfig.from_dict(sidecar["room"])
