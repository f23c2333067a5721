"""Metrics and the experiment runner that scores every system on the test grid."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import asr_proxy, baselines, neural_aec
from .data_pipeline import EVAL_TERR_LEVELS, DatasetManifest, load_example, load_manifest
from .errors import ConfigError, MissingArtifact, NoSignal, ShapeMismatch, Undefined
from .signal_core import LogMelFrames, StftConfig, Waveform, _stft_array, wave_to_log_mel

SDR_CAP_DB = 100.0
LN_TO_DB = 20.0 / math.log(10.0)

# -- metrics -----------------------------------------------------------------


def _common(a: np.ndarray, b: np.ndarray, edge: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Cut to the shorter length, then drop ``edge`` samples at both ends."""
    n = min(len(a), len(b))
    if edge < 0 or 2 * edge >= n:
        raise ShapeMismatch(f"edge {edge} leaves nothing of {n} samples")
    sl = slice(edge, n - edge)
    return np.asarray(a[sl], np.float64), np.asarray(b[sl], np.float64)


def sdr(estimate: Waveform, reference: Waveform, edge: int = 0) -> float:
    """Scale-invariant SDR in dB: the estimate is first scaled by its optimal gain.

    Signals are cut to the shorter length and ``edge`` samples are dropped
    at both ends. Capped at 100 dB.
    """
    est, ref = _common(estimate.samples, reference.samples, edge)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0.0:
        raise NoSignal("reference signal is silent")
    est_energy = float(np.dot(est, est))
    gain = float(np.dot(est, ref)) / est_energy if est_energy > 0 else 0.0
    err = float(np.sum((ref - gain * est) ** 2))
    if err <= ref_energy * 10 ** (-SDR_CAP_DB / 10):
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * math.log10(ref_energy / err))


def _log_spectrum_db(x: Union[Waveform, LogMelFrames], stft_cfg: StftConfig, floor: float) -> np.ndarray:
    if isinstance(x, LogMelFrames):
        return x.frames.astype(np.float64) * LN_TO_DB
    mag = np.abs(_stft_array(np.asarray(x.samples, np.float64), stft_cfg))
    return 20.0 * np.log10(np.maximum(mag, floor))


def lsd(
    estimate: Union[Waveform, LogMelFrames],
    target: Union[Waveform, LogMelFrames],
    stft_cfg: StftConfig = StftConfig(),
    floor: float = 1e-8,
) -> float:
    """Log-spectral distance in dB: mean over frames of the per-frame RMS difference.

    Waveforms are compared on STFT magnitudes, feature matrices on their
    log-mel values (converted from natural log to dB).
    """
    a = _log_spectrum_db(estimate, stft_cfg, floor)
    b = _log_spectrum_db(target, stft_cfg, floor)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ShapeMismatch("no frames to compare")
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=1))))


def erle(probe: Waveform, erased: Waveform, echo_only: np.ndarray, edge: int = 0) -> float:
    """Echo return loss enhancement (dB) over the samples flagged in ``echo_only``."""
    p, e = _common(probe.samples, erased.samples, edge)
    mask = np.asarray(echo_only, dtype=bool)[edge : edge + len(p)]
    if not mask.any():
        raise Undefined("no echo-only region")
    pp = float(np.sum(p[mask] ** 2))
    pe = float(np.sum(e[mask] ** 2))
    if pp <= 0.0:
        raise Undefined("probe is silent over the echo-only region")
    if pe <= 0.0:
        return SDR_CAP_DB
    return 10.0 * math.log10(pp / pe)


def echo_only_mask(target: Waveform, hop: int = 160, threshold_db: float = -50.0, guard: int = 1) -> np.ndarray:
    """Per-sample mask of blocks where the target component is inactive.

    A block is inactive when its power is ``threshold_db`` below the
    loudest block; ``guard`` neighbouring blocks around active ones are
    also excluded.
    """
    x = np.asarray(target.samples, np.float64)
    n_blocks = int(math.ceil(len(x) / hop))
    padded = np.zeros(n_blocks * hop)
    padded[: len(x)] = x
    pw = np.mean(padded.reshape(n_blocks, hop) ** 2, axis=1)
    peak = pw.max()
    if peak <= 0.0:
        return np.ones(len(x), dtype=bool)
    active = pw > peak * 10 ** (threshold_db / 10)
    if guard > 0:
        grown = active.copy()
        for s in range(1, guard + 1):
            grown[s:] |= active[:-s]
            grown[:-s] |= active[s:]
        active = grown
    return np.repeat(~active, hop)[: len(x)]


# -- experiment --------------------------------------------------------------

BASELINE_SYSTEMS = ("probe_passthrough", "subband_nlms", "irm_oracle", "irm_predicted")
ABLATION_LADDER = (
    "neural_full",
    "neural_no_latent",
    "neural_no_latent_no_specaug",
    "neural_no_latent_no_specaug_no_synthetic",
)
SYSTEM_LABELS = {
    "probe_passthrough": "Probe",
    "subband_nlms": "STFT subband NLMS",
    "irm_oracle": "IRM (oracle mask)",
    "irm_predicted": "IRM AEC (predicted)",
    "neural_full": "Neural AEC (full)",
    "neural_no_latent": "  - latent loss",
    "neural_no_latent_no_specaug": "    - SpecAugment",
    "neural_no_latent_no_specaug_no_synthetic": "      - synthetic data",
}
LEARNED_SYSTEMS = ("irm_predicted",) + ABLATION_LADDER
PROXY_ARCHS = ("A", "B")
METRICS = ("sdr_db", "lsd_db", "erle_db", "proxy_error_A", "proxy_error_B", "latent_mse_A", "latent_mse_B")


@dataclass(frozen=True)
class ExperimentMatrix:
    systems: Tuple[str, ...] = BASELINE_SYSTEMS + ABLATION_LADDER
    terr_levels: Tuple[float, ...] = EVAL_TERR_LEVELS
    split: str = "test"
    gl_iters: int = 60

    def __post_init__(self):
        unknown = set(self.systems) - set(SYSTEM_LABELS)
        if unknown:
            raise ConfigError(f"unknown systems {sorted(unknown)}")
        object.__setattr__(self, "systems", tuple(self.systems))
        object.__setattr__(self, "terr_levels", tuple(float(t) for t in self.terr_levels))


@dataclass
class Artifacts:
    dataset: Path
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    proxies: Dict[str, Path] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "Artifacts":
        """Load an artifact index; relative paths resolve against its directory."""
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"artifact index not found: {path}")
        raw = json.loads(path.read_text())
        base = path.parent
        fix = lambda p: Path(p) if Path(p).is_absolute() else base / p  # noqa: E731
        return cls(
            dataset=fix(raw["dataset"]),
            checkpoints={k: fix(v) for k, v in raw.get("checkpoints", {}).items()},
            proxies={k: fix(v) for k, v in raw.get("proxies", {}).items()},
        )

    def to_json(self, path) -> None:
        base = Path(path).parent
        rel = lambda p: Path(p).relative_to(base).as_posix() if Path(p).is_relative_to(base) else str(p)  # noqa: E731
        blob = {
            "dataset": rel(self.dataset),
            "checkpoints": {k: rel(v) for k, v in sorted(self.checkpoints.items())},
            "proxies": {k: rel(v) for k, v in sorted(self.proxies.items())},
        }
        Path(path).write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


@dataclass
class ExperimentReport:
    matrix: ExperimentMatrix
    per_example: List[dict]
    aggregates: Dict[str, Dict[str, Dict[str, object]]]
    config_hashes: Dict[str, str]
    cell_ids: Dict[str, str]

    def to_dict(self) -> dict:
        return {
            "matrix": asdict(self.matrix),
            "per_example": self.per_example,
            "aggregates": self.aggregates,
            "config_hashes": self.config_hashes,
            "cell_ids": self.cell_ids,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def cell(self, system: str, terr: float) -> Dict[str, object]:
        return self.aggregates[system][_terr_key(terr)]

    def table(self, metrics: Sequence[str] = ("proxy_error_A", "proxy_error_B", "sdr_db", "lsd_db", "latent_mse_A")) -> str:
        """Rows are systems, columns TERR levels; one block per metric."""
        levels = self.matrix.terr_levels
        label_w = max(len(SYSTEM_LABELS[s]) for s in self.matrix.systems) + 2
        blocks = []
        for metric in metrics:
            head = f"{metric:<{label_w}}" + "".join(f"{_terr_key(t) + ' dB':>12}" for t in levels)
            lines = [head, "-" * len(head)]
            for s in self.matrix.systems:
                row = f"{SYSTEM_LABELS[s]:<{label_w}}"
                for t in levels:
                    v = self.cell(s, t).get(metric, {}).get("mean")
                    row += f"{'n/a':>12}" if v is None else f"{v:>12.3f}"
                lines.append(row)
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "terr_db", "metric", "mean", "std", "count"])
        for s in self.matrix.systems:
            for t in self.matrix.terr_levels:
                for metric, agg in sorted(self.cell(s, t).items()):
                    if isinstance(agg, dict):
                        w.writerow([s, _terr_key(t), metric, agg["mean"], agg["std"], agg["count"]])
        return buf.getvalue()


def _terr_key(terr: float) -> str:
    return f"{float(terr):g}"


def _round(x: Optional[float]) -> Optional[float]:
    return None if x is None else float(f"{x:.6g}")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class _Loaded:
    manifest: DatasetManifest
    proxies: Dict[str, asr_proxy.ProxyRecognizer]
    models: Dict[str, object]


def _load_artifacts(matrix: ExperimentMatrix, artifacts: Artifacts) -> _Loaded:
    if not Path(artifacts.dataset).exists():
        raise MissingArtifact(f"dataset not found: {artifacts.dataset}")
    manifest = load_manifest(artifacts.dataset)
    proxies = {}
    for arch in PROXY_ARCHS:
        path = artifacts.proxies.get(arch)
        if path is None or not Path(path).exists():
            raise MissingArtifact(f"proxy recognizer {arch} missing (needed for every cell)")
        proxies[arch] = asr_proxy.load_proxy(path)
    models = {}
    for system in matrix.systems:
        if system not in LEARNED_SYSTEMS:
            continue
        path = artifacts.checkpoints.get(system)
        if path is None or not Path(path).exists():
            cells = ", ".join(f"({system}, {_terr_key(t)} dB)" for t in matrix.terr_levels)
            raise MissingArtifact(f"checkpoint for {system} missing; cells {cells} cannot be evaluated")
        if system == "irm_predicted":
            models[system] = baselines.load_irm_predictor(path)
        else:
            model, _, _ = neural_aec.load_checkpoint(path)
            if model.cfg.mel_dim != manifest.mel.num_mels:
                raise ConfigError(f"{system}: model mel_dim {model.cfg.mel_dim} != dataset {manifest.mel.num_mels}")
            models[system] = model
    return _Loaded(manifest, proxies, models)


def erase_with_system(system: str, example, loaded: _Loaded, gl_iters: int) -> Waveform:
    w = example.waveforms
    stft_cfg, mel_cfg = loaded.manifest.stft, loaded.manifest.mel
    if system == "probe_passthrough":
        return w["probe"]
    if system == "subband_nlms":
        return baselines.subband_nlms_erase(w["probe"], w["reference"], baselines.NlmsConfig(stft=stft_cfg))
    if system == "irm_oracle":
        return baselines.oracle_irm_erase(w["probe"], w["residual"], w["echoed_reference"], stft_cfg)
    if system == "irm_predicted":
        mask = baselines.predict_mask(loaded.models[system], example.probe_feats, example.reference_feats)
        return baselines.apply_mask_erase(w["probe"], mask, stft_cfg)
    return neural_aec.erase(
        w["probe"], w["reference"], loaded.models[system], stft_cfg, mel_cfg, gl_iters=gl_iters, align=False
    )


def score_example(example, erased: Waveform, label: Optional[int], loaded: _Loaded) -> dict:
    w = example.waveforms
    stft_cfg, mel_cfg = loaded.manifest.stft, loaded.manifest.mel
    # overlap-add output is unreliable within one window of either end
    # (the squared-window sum is nearly zero there), so every system is
    # scored on the interior only
    edge = stft_cfg.window_len
    feats = wave_to_log_mel(erased, stft_cfg, mel_cfg).frames
    target = example.target_feats.frames
    t = min(len(feats), len(target))
    feats, target = feats[1 : t - 1], target[1 : t - 1]
    out = {
        "sdr_db": sdr(erased, w["residual"], edge),
        "lsd_db": lsd(LogMelFrames(feats, mel_cfg), LogMelFrames(target, mel_cfg)),
    }
    try:
        out["erle_db"] = erle(w["probe"], erased, echo_only_mask(w["reverberant_target"]), edge)
    except Undefined:
        out["erle_db"] = None
    for arch, rec in loaded.proxies.items():
        if label is not None:
            pred = int(asr_proxy.predict(feats[None], rec)[0])
            out[f"proxy_error_{arch}"] = float(pred != label)
        out[f"latent_mse_{arch}"] = asr_proxy.latent_mse(feats, target, rec)
    return {k: _round(v) for k, v in out.items()}


def _aggregate(rows: List[dict]) -> Dict[str, object]:
    agg: Dict[str, object] = {"count": len(rows)}
    for m in METRICS:
        vals = [r[m] for r in rows if r.get(m) is not None]
        if vals:
            agg[m] = {"mean": _round(float(np.mean(vals))), "std": _round(float(np.std(vals))), "count": len(vals)}
    return agg


def run_experiment(matrix: ExperimentMatrix, artifacts: Artifacts) -> ExperimentReport:
    """Score every (system, TERR) cell on the same test examples."""
    torch.set_num_threads(1)
    loaded = _load_artifacts(matrix, artifacts)
    manifest = loaded.manifest
    records = sorted(manifest.split(matrix.split), key=lambda r: r["id"])
    by_level = {}
    for t in matrix.terr_levels:
        recs = [r for r in records if math.isclose(r["terr_db"], t, abs_tol=1e-9)]
        if not recs:
            raise MissingArtifact(f"no {matrix.split} examples at TERR {_terr_key(t)} dB")
        by_level[t] = recs

    per_example: List[dict] = []
    aggregates: Dict[str, Dict[str, Dict[str, object]]] = {s: {} for s in matrix.systems}
    cell_ids: Dict[str, str] = {}
    for t, recs in by_level.items():
        ids = [r["id"] for r in recs]
        id_hash = hashlib.sha256("\n".join(ids).encode()).hexdigest()
        cell_ids[_terr_key(t)] = id_hash
        examples = [load_example(manifest, r) for r in recs]
        for system in matrix.systems:
            rows = []
            for rec, ex in zip(recs, examples):
                erased = erase_with_system(system, ex, loaded, matrix.gl_iters)
                row = score_example(ex, erased, rec.get("label"), loaded)
                rows.append(row)
                per_example.append({"id": rec["id"], "system": system, "terr_db": _terr_key(t), **row})
            aggregates[system][_terr_key(t)] = {**_aggregate(rows), "id_hash": id_hash}
    # every system must have been scored on the same ids in each cell
    for t in matrix.terr_levels:
        hashes = {aggregates[s][_terr_key(t)]["id_hash"] for s in matrix.systems}
        assert len(hashes) == 1, "cell example ids differ across systems"

    hashes = {"dataset": manifest.checksum()}
    for arch, path in sorted(artifacts.proxies.items()):
        hashes[f"proxy_{arch}"] = _file_hash(path)
    for system in matrix.systems:
        if system in artifacts.checkpoints:
            hashes[system] = _file_hash(artifacts.checkpoints[system])
    return ExperimentReport(matrix, per_example, aggregates, hashes, cell_ids)


def write_report(report: ExperimentReport, out_dir, formats: Sequence[str] = ("json", "table", "csv")) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        written["json"] = out / "report.json"
        written["json"].write_text(report.to_json())
    if "table" in formats:
        written["table"] = out / "report.txt"
        written["table"].write_text(report.table())
    if "csv" in formats:
        written["csv"] = out / "report.csv"
        written["csv"].write_text(report.to_csv())
    return written
