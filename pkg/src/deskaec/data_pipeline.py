"""Echo synthesis, SNR mixing, SpecAugment masking and dataset persistence."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from . import room_sim
from .errors import ConfigError, MissingArtifact, RateMismatch, ShapeMismatch, ShortInput
from .room_sim import RoomConfig, RoomConstraints
from .signal_core import (
    LogMelFrames,
    MelConfig,
    StftConfig,
    Waveform,
    gain_for_snr,
    read_wav,
    trim_to_lag,
    wave_to_log_mel,
    write_wav,
    xcorr_align,
)

TRAIN_TNR_RANGE = (0.0, 20.0)
TRAIN_TERR_RANGE = (-20.0, 0.0)
EVAL_TERR_LEVELS = (0.0, -5.0, -10.0)
DEFAULT_MAX_LAG = 800
FEATURE_MAGIC = b"AECF"
FEATURE_VERSION = 1
ECHO_KINDS = ("synthetic", "rerecorded")


@dataclass(frozen=True)
class MixSpec:
    tnr_db: float
    terr_db: float

    def __post_init__(self):
        if not (math.isfinite(self.tnr_db) and math.isfinite(self.terr_db)):
            raise ConfigError("mix ratios must be finite")


@dataclass(frozen=True)
class SpecAugmentConfig:
    num_freq_masks: int = 2
    max_total_freq_bins: int = 27
    num_time_masks: int = 10
    max_total_time_fraction: float = 0.05
    channels: Tuple[str, ...] = ("reference",)
    mask_value: float = math.log(1e-5)

    def __post_init__(self):
        if min(self.num_freq_masks, self.max_total_freq_bins, self.num_time_masks) < 0:
            raise ConfigError("mask counts and budgets must be >= 0")
        if not 0.0 <= self.max_total_time_fraction <= 1.0:
            raise ConfigError("time fraction must be in [0, 1]")
        bad = set(self.channels) - {"probe", "reference"}
        if bad:
            raise ConfigError(f"unknown SpecAugment channels {sorted(bad)}")
        object.__setattr__(self, "channels", tuple(self.channels))

    def time_budget(self, num_frames: int) -> int:
        return int(math.floor(self.max_total_time_fraction * num_frames))


@dataclass
class UtteranceExample:
    probe_feats: LogMelFrames
    reference_feats: LogMelFrames
    target_feats: LogMelFrames
    mix: MixSpec
    waveforms: Dict[str, Waveform] = field(default_factory=dict)
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        t = {self.probe_feats.num_frames, self.reference_feats.num_frames, self.target_feats.num_frames}
        if len(t) != 1:
            raise ShapeMismatch(f"feature frame counts differ: {sorted(t)}")

    @property
    def num_frames(self) -> int:
        return self.probe_feats.num_frames


# -- echo path -------------------------------------------------------------


def loudspeaker_distort(wave: Waveform, hardness: float) -> Waveform:
    """Memoryless soft saturation ``tanh(h x) / h``; identity as h -> 0."""
    if hardness < 0:
        raise ValueError("hardness must be >= 0")
    if hardness == 0:
        return wave
    x = np.asarray(wave.samples, dtype=np.float64)
    return wave.with_samples(np.tanh(hardness * x) / hardness)


@dataclass(frozen=True)
class PlaybackDevice:
    """Fixed stand-in for a physical speaker + room used for re-recorded echo."""

    asymmetry: float
    hardness: float
    highpass_hz: float
    resonance_hz: float
    room: RoomConfig


def playback_device(device_seed: int, constraints: RoomConstraints = RoomConstraints()) -> PlaybackDevice:
    rng = np.random.default_rng([device_seed, 0xDE71CE])
    room = room_sim.sample_room_config(
        int(rng.integers(0, 2**31)),
        RoomConstraints(
            dims_min=(5.0, 4.0, 2.6),
            dims_max=(9.0, 7.0, 3.5),
            absorption_range=(0.3, 0.6),
            loudspeaker_offset=constraints.loudspeaker_offset,
        ),
    )
    return PlaybackDevice(
        asymmetry=float(rng.uniform(0.05, 0.25)),
        hardness=float(rng.uniform(1.0, 3.0)),
        highpass_hz=float(rng.uniform(150.0, 350.0)),
        resonance_hz=float(rng.uniform(600.0, 2500.0)),
        room=room,
    )


def rerecorded_echo(reference: Waveform, device: PlaybackDevice) -> Waveform:
    """Reference as captured through a device: asymmetric clipping, driver
    coloration, then the device's room."""
    x = np.asarray(reference.samples, dtype=np.float64)
    x = np.tanh(device.hardness * (x + device.asymmetry * x * x)) / device.hardness
    fs = reference.sample_rate
    b, a = sps.butter(2, device.highpass_hz / (fs / 2), btype="highpass")
    x = sps.lfilter(b, a, x)
    b, a = sps.iirpeak(device.resonance_hz / (fs / 2), Q=2.0)
    x = x + 0.5 * sps.lfilter(b, a, x)
    rir = room_sim.compute_rir(device.room, "loudspeaker_path", fs)
    return room_sim.apply_rir(reference.with_samples(x), rir)


# -- example synthesis -------------------------------------------------------


def _fit(wave: Waveform, n: int, role: str) -> np.ndarray:
    x = np.asarray(wave.samples, dtype=np.float64)
    if x.size < n:
        raise ShortInput(f"{role} has {x.size} samples, need {n}")
    return x[:n]


def synth_example(
    target: Waveform,
    reference: Waveform,
    noise: Waveform,
    room: RoomConfig,
    mix: MixSpec,
    hardness: float,
    seed: int,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    echo_kind: str = "synthetic",
    device: Optional[PlaybackDevice] = None,
    max_lag: int = DEFAULT_MAX_LAG,
) -> UtteranceExample:
    """Build one probe/reference/target triple.

    Stems live on the microphone timeline and are cut to the target length.
    Ratios are measured against the reverberant target. After mixing, the
    undistorted reference is aligned to the probe and every stem is trimmed
    to the overlap before features are computed.
    """
    rates = {target.sample_rate, reference.sample_rate, noise.sample_rate}
    if len(rates) != 1:
        raise RateMismatch(f"input sample rates differ: {sorted(rates)}")
    fs = target.sample_rate
    n = len(target)
    if n < fs:
        raise ShortInput("inputs must be at least 1 s long")
    if echo_kind not in ECHO_KINDS:
        raise ConfigError(f"unknown echo kind {echo_kind!r}")

    tgt = _fit(target, n, "target")
    ref = _fit(reference, n, "reference")
    nse = _fit(noise, n, "noise")

    if echo_kind == "synthetic":
        ls_rir = room_sim.compute_rir(room, "loudspeaker_path", fs)
        echo = room_sim.apply_rir(loudspeaker_distort(reference.with_samples(ref), hardness), ls_rir)
    else:
        if device is None:
            raise ConfigError("re-recorded echo needs a playback device")
        echo = rerecorded_echo(reference.with_samples(ref), device)
    echo = np.asarray(echo.samples, dtype=np.float64)[:n]
    tgt_rir = room_sim.compute_rir(room, "target_path", fs)
    rev_target = np.asarray(room_sim.apply_rir(target.with_samples(tgt), tgt_rir).samples, np.float64)[:n]

    rev_w = Waveform(rev_target, fs, "target")
    g_noise = gain_for_snr(rev_w, Waveform(nse, fs, "noise"), mix.tnr_db)
    g_echo = gain_for_snr(rev_w, Waveform(echo, fs, "echoed_reference"), mix.terr_db)

    residual = (rev_target + g_noise * nse).astype(np.float32)
    probe = residual + (g_echo * echo).astype(np.float32)
    # stored echo stem is exactly probe - residual in float32
    scaled_echo = probe - residual

    probe_w = Waveform(probe, fs, "probe")
    ref_w = Waveform(ref, fs, "reference")
    lag = xcorr_align(probe_w, ref_w, max_lag)
    p_sl, r_sl = trim_to_lag(probe, ref_w.samples, lag)

    stems = {
        "probe": Waveform(probe[p_sl], fs, "probe"),
        "reference": Waveform(ref_w.samples[r_sl], fs, "reference"),
        "target": Waveform(tgt[p_sl], fs, "target"),
        "residual": Waveform(residual[p_sl], fs, "residual"),
        "echoed_reference": Waveform(scaled_echo[p_sl], fs, "echoed_reference"),
        "reverberant_target": Waveform(rev_target.astype(np.float32)[p_sl], fs, "target"),
        "noise": Waveform((g_noise * nse).astype(np.float32)[p_sl], fs, "noise"),
    }
    feats = {
        k: wave_to_log_mel(stems[k], stft_cfg, mel_cfg) for k in ("probe", "reference", "target")
    }
    return UtteranceExample(
        probe_feats=feats["probe"],
        reference_feats=feats["reference"],
        target_feats=feats["target"],
        mix=mix,
        waveforms=stems,
        provenance={
            "seed": int(seed),
            "room_id": room.room_id,
            "lag": int(lag),
            "hardness": float(hardness),
            "echo_kind": echo_kind,
            "echo_gain": float(g_echo),
            "noise_gain": float(g_noise),
        },
    )


# -- SpecAugment -------------------------------------------------------------


def _split_budget(rng: np.random.Generator, budget: int, parts: int) -> np.ndarray:
    """Uniform total in [0, budget], split at uniform cut points."""
    if parts == 0 or budget == 0:
        return np.zeros(parts, dtype=int)
    total = int(rng.integers(0, budget + 1))
    cuts = np.sort(rng.integers(0, total + 1, size=parts - 1))
    return np.diff(np.concatenate([[0], cuts, [total]])).astype(int)


def mask_layout(num_frames: int, num_mels: int, cfg: SpecAugmentConfig, seed) -> np.ndarray:
    """Boolean T x M array of the cells that ``spec_augment`` overwrites."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((num_frames, num_mels), dtype=bool)
    f_widths = _split_budget(rng, min(cfg.max_total_freq_bins, num_mels), cfg.num_freq_masks)
    for w in f_widths:
        f0 = int(rng.integers(0, num_mels - w + 1))
        mask[:, f0 : f0 + w] = True
    t_widths = _split_budget(rng, min(cfg.time_budget(num_frames), num_frames), cfg.num_time_masks)
    for w in t_widths:
        t0 = int(rng.integers(0, num_frames - w + 1))
        mask[t0 : t0 + w, :] = True
    return mask


def spec_augment(feats: LogMelFrames, cfg: SpecAugmentConfig, seed) -> LogMelFrames:
    """Frequency and time masks filled with ``cfg.mask_value``."""
    frames = feats.frames
    if frames.shape[0] < 1:
        raise ShortInput("need at least one frame")
    mask = mask_layout(frames.shape[0], frames.shape[1], cfg, seed)
    if not mask.any():
        return feats
    out = frames.copy()
    out[mask] = np.float32(cfg.mask_value)
    return LogMelFrames(out, feats.mel_config)


def augment_inputs(
    probe_feats: LogMelFrames, reference_feats: LogMelFrames, cfg: SpecAugmentConfig, seed: int
) -> Tuple[LogMelFrames, LogMelFrames]:
    """Apply SpecAugment independently to each channel named in ``cfg.channels``."""
    out = {"probe": probe_feats, "reference": reference_feats}
    for idx, name in enumerate(("probe", "reference")):
        if name in cfg.channels:
            out[name] = spec_augment(out[name], cfg, [int(seed), idx])
    return out["probe"], out["reference"]


def stack_inputs(probe_feats: LogMelFrames, reference_feats: LogMelFrames) -> np.ndarray:
    """T x M x 2 tensor; channel 0 is the probe, channel 1 the reference."""
    p, r = probe_feats.frames, reference_feats.frames
    if p.shape != r.shape:
        raise ShapeMismatch(f"probe {p.shape} vs reference {r.shape}")
    return np.stack([p, r], axis=-1)


def unstack_inputs(stacked: np.ndarray, mel_cfg: MelConfig = MelConfig()) -> Tuple[LogMelFrames, LogMelFrames]:
    if stacked.ndim != 3 or stacked.shape[-1] != 2:
        raise ShapeMismatch(f"expected T x M x 2, got {stacked.shape}")
    return LogMelFrames(stacked[..., 0], mel_cfg), LogMelFrames(stacked[..., 1], mel_cfg)


# -- feature shards ----------------------------------------------------------


def write_feature_shard(path, array: np.ndarray) -> None:
    """T x M x C float32 block behind an ``AECF`` header."""
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim != 3:
        raise ShapeMismatch("feature shard must be T x M x C")
    t, m, c = a.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<IIII", FEATURE_VERSION, t, m, c))
        fh.write(a.tobytes())


def read_feature_shard(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read feature shard {path}: {exc}") from exc
    if len(raw) < 20 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not an AECF feature shard")
    version, t, m, c = struct.unpack("<IIII", raw[4:20])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    body = raw[20:]
    if len(body) != 4 * t * m * c:
        raise ValueError(f"{path}: truncated shard")
    return np.frombuffer(body, dtype="<f4").reshape(t, m, c).astype(np.float32)


# -- datasets ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    stft: StftConfig = StftConfig()
    mel: MelConfig = MelConfig()
    room: RoomConstraints = RoomConstraints()
    hardness_range: Tuple[float, float] = (0.5, 3.0)
    synthetic_fraction: float = 0.5
    train_devices: Tuple[int, ...] = (0, 1, 2, 3)
    eval_devices: Tuple[int, ...] = (100, 101)
    max_lag: int = DEFAULT_MAX_LAG


@dataclass
class DatasetManifest:
    records: List[dict]
    stft: StftConfig
    mel: MelConfig
    root: Path

    def split(self, name: str) -> List[dict]:
        return [r for r in self.records if r["split"] == name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"stft": asdict(self.stft), "mel": asdict(self.mel)}, sort_keys=True).encode())
        for r in self.records:
            h.update(json.dumps(r, sort_keys=True).encode())
            for key in sorted(r["paths"]):
                h.update(hashlib.sha256((self.root / r["paths"][key]).read_bytes()).digest())
        return h.hexdigest()

    def validate(self) -> None:
        ids = [r["id"] for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate example ids in manifest")
        for r in self.records:
            for p in r["paths"].values():
                if not (self.root / p).exists():
                    raise FileNotFoundError(f"manifest references missing file {self.root / p}")


MANIFEST_NAME = "manifest.jsonl"
DATASET_HEADER = "dataset.json"
STEM_FILES = {
    "probe": "probe",
    "ref": "reference",
    "target": "target",
    "residual": "residual",
    "echo": "echoed_reference",
    "reverberant_target": "reverberant_target",
}


def _partition(n: int, ratios: Mapping[str, float], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Disjoint index sets per split, each non-empty."""
    names = list(ratios)
    if n < len(names):
        raise ValueError(f"need at least {len(names)} source waveforms per role, got {n}")
    perm = rng.permutation(n)
    weights = np.array([ratios[k] for k in names], dtype=float)
    sizes = np.maximum(1, np.floor(weights / weights.sum() * n)).astype(int)
    while sizes.sum() > n:
        sizes[np.argmax(sizes)] -= 1
    sizes[0] += n - sizes.sum()
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return {k: perm[bounds[i] : bounds[i + 1]] for i, k in enumerate(names)}


def build_dataset(
    source_waves: Mapping[str, Sequence[Waveform]],
    counts: Mapping[str, int],
    split_ratios: Mapping[str, float],
    seed: int,
    out_dir,
    config: DatasetConfig = DatasetConfig(),
    target_labels: Optional[Sequence[int]] = None,
    eval_splits: Iterable[str] = ("dev", "test"),
) -> DatasetManifest:
    """Synthesize every split and write stems, feature shards and the manifest.

    Source utterances are partitioned so no target, reference or noise
    waveform appears in two splits. Training examples draw TNR and TERR from
    the training ranges and mix synthetic with re-recorded echo; evaluation
    splits use re-recorded echo with TERR cycling over 0, -5 and -10 dB, each
    source tuple rendered once per level.
    """
    out = Path(out_dir)
    eval_splits = set(eval_splits)
    for role in ("target", "reference", "noise"):
        if len(source_waves.get(role, ())) < 3:
            raise ValueError(f"need at least 3 {role} waveforms")
    if set(counts) - set(split_ratios):
        raise ValueError("every split in counts needs a split ratio")
    for name in eval_splits & set(counts):
        if counts[name] % len(EVAL_TERR_LEVELS):
            raise ValueError(f"eval split {name!r} count must be a multiple of {len(EVAL_TERR_LEVELS)}")

    rng = np.random.default_rng([seed, 0x5EED])
    parts = {role: _partition(len(source_waves[role]), split_ratios, rng) for role in ("target", "reference", "noise")}
    devices = {d: playback_device(d, config.room) for d in config.train_devices + config.eval_devices}

    records: List[dict] = []
    try:
        (out / "examples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    for split_idx, split in enumerate(sorted(counts)):
        n_examples = counts[split]
        is_eval = split in eval_splits
        n_tuples = n_examples // len(EVAL_TERR_LEVELS) if is_eval else n_examples
        for i in range(n_tuples):
            ex_rng = np.random.default_rng([seed, split_idx, i])
            picks = {role: int(ex_rng.choice(parts[role][split])) for role in parts}
            room_seed = int(ex_rng.integers(0, 2**31))
            room = room_sim.sample_room_config(room_seed, config.room)
            hardness = float(ex_rng.uniform(*config.hardness_range))
            tnr = float(ex_rng.uniform(*TRAIN_TNR_RANGE))
            if is_eval:
                kind = "rerecorded"
                device_id = config.eval_devices[int(ex_rng.integers(len(config.eval_devices)))]
                terrs = list(EVAL_TERR_LEVELS)
            else:
                kind = "synthetic" if ex_rng.uniform() < config.synthetic_fraction else "rerecorded"
                device_id = config.train_devices[int(ex_rng.integers(len(config.train_devices)))]
                terrs = [float(ex_rng.uniform(*TRAIN_TERR_RANGE))]
            for terr in terrs:
                ex_id = f"{split}-{i:05d}" + (f"-terr{int(round(-terr)):02d}" if is_eval else "")
                ex_seed = int(ex_rng.integers(0, 2**31))
                example = synth_example(
                    source_waves["target"][picks["target"]],
                    source_waves["reference"][picks["reference"]],
                    source_waves["noise"][picks["noise"]],
                    room,
                    MixSpec(tnr, terr),
                    hardness,
                    ex_seed,
                    config.stft,
                    config.mel,
                    echo_kind=kind,
                    device=devices[device_id] if kind == "rerecorded" else None,
                    max_lag=config.max_lag,
                )
                records.append(
                    _write_example(out, ex_id, split, example, picks, room_seed, ex_seed, device_id, target_labels)
                )

    manifest = DatasetManifest(records, config.stft, config.mel, out)
    _write_manifest(manifest, seed)
    return manifest


def _write_example(out: Path, ex_id, split, example: UtteranceExample, picks, room_seed, ex_seed, device_id, labels) -> dict:
    rel = Path("examples") / ex_id
    (out / rel).mkdir(parents=True, exist_ok=True)
    paths = {}
    try:
        for key, stem in STEM_FILES.items():
            p = rel / f"{key}.wav"
            write_wav(out / p, example.waveforms[stem])
            paths[key] = p.as_posix()
        feats = np.stack(
            [example.probe_feats.frames, example.reference_feats.frames, example.target_feats.frames], axis=-1
        )
        write_feature_shard(out / rel / "feats.bin", feats)
    except OSError as exc:
        raise OSError(f"failed writing example {ex_id} under {out / rel}: {exc}") from exc
    paths["feats"] = (rel / "feats.bin").as_posix()
    prov = example.provenance
    return {
        "id": ex_id,
        "split": split,
        "echo_kind": prov["echo_kind"],
        "paths": paths,
        "terr_db": float(example.mix.terr_db),
        "tnr_db": float(example.mix.tnr_db),
        "room_id": prov["room_id"],
        "seeds": {"example": ex_seed, "room": room_seed, "device": int(device_id)},
        "sources": {k: int(v) for k, v in picks.items()},
        "label": None if labels is None else int(labels[picks["target"]]),
        "lag": prov["lag"],
        "hardness": prov["hardness"],
        "num_frames": example.num_frames,
    }


def _write_manifest(manifest: DatasetManifest, seed: int) -> None:
    root = manifest.root
    with open(root / MANIFEST_NAME, "w") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    header = {"stft": asdict(manifest.stft), "mel": asdict(manifest.mel), "seed": seed}
    (root / DATASET_HEADER).write_text(json.dumps(header, sort_keys=True, indent=1))


def load_manifest(path) -> DatasetManifest:
    """Accepts the dataset directory or the manifest file itself."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"dataset not found: {path}")
    root = path if path.is_dir() else path.parent
    try:
        header = json.loads((root / DATASET_HEADER).read_text())
        lines = (root / MANIFEST_NAME).read_text().splitlines()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read dataset at {root}: {exc}") from exc
    records = [json.loads(line) for line in lines if line.strip()]
    stft_cfg = StftConfig(**header["stft"])
    mel_cfg = MelConfig(**header["mel"])
    manifest = DatasetManifest(records, stft_cfg, mel_cfg, root)
    manifest.validate()
    return manifest


def load_example(manifest: DatasetManifest, record: dict, with_waveforms: bool = True) -> UtteranceExample:
    feats = read_feature_shard(manifest.root / record["paths"]["feats"])
    mel = manifest.mel
    waves = {}
    if with_waveforms:
        for key, stem in STEM_FILES.items():
            if key in record["paths"]:
                w = read_wav(manifest.root / record["paths"][key])
                waves[stem] = Waveform(w.samples, w.sample_rate, _stem_role(stem))
    return UtteranceExample(
        probe_feats=LogMelFrames(feats[..., 0], mel),
        reference_feats=LogMelFrames(feats[..., 1], mel),
        target_feats=LogMelFrames(feats[..., 2], mel),
        mix=MixSpec(record["tnr_db"], record["terr_db"]),
        waveforms=waves,
        provenance={"id": record["id"], "label": record.get("label"), "room_id": record["room_id"]},
    )


def _stem_role(stem: str) -> str:
    return "target" if stem == "reverberant_target" else stem
