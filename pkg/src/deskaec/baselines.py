"""Comparison systems: subband NLMS echo cancellation and ratio-mask erasure."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from . import checkpoint
from .data_pipeline import DatasetManifest, load_example, stack_inputs
from .errors import ConfigError, CorruptCheckpoint, Diverged, MissingStems, RateMismatch, ShapeMismatch
from .signal_core import (
    LogMelFrames,
    Spectrogram,
    StftConfig,
    Waveform,
    _istft_array,
    _stft_array,
    read_wav,
)

# -- subband NLMS ------------------------------------------------------------


@dataclass(frozen=True)
class NlmsConfig:
    taps_per_band: int = 8
    step_size: float = 0.5
    regularization: float = 1e-6
    stft: StftConfig = StftConfig()
    # the normalizer also gets power_floor * taps * (running microphone band
    # power), so a faint reference frame during near-end speech cannot
    # produce a huge update
    power_floor: float = 0.1
    power_smoothing: float = 0.9

    def __post_init__(self):
        if self.taps_per_band < 1:
            raise ConfigError("taps_per_band must be >= 1")
        if not 0.0 < self.step_size < 2.0:
            raise ConfigError("step_size must lie in (0, 2)")
        if self.regularization <= 0:
            raise ConfigError("regularization must be positive")
        if self.power_floor < 0 or not 0.0 <= self.power_smoothing < 1.0:
            raise ConfigError("power_floor must be >= 0 and power_smoothing in [0, 1)")


def nlms_filter_bands(probe_spec: np.ndarray, ref_spec: np.ndarray, cfg: NlmsConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Run the per-band NLMS recursion on T x F spectra.

    Each band has its own complex filter over the last ``taps_per_band``
    reference frames of that band only. The normalizer is the tap-vector
    power plus ``regularization`` plus ``power_floor * taps`` times a running
    average of the probe's band power. Returns (error spectrum, final
    filters F x L).
    """
    if probe_spec.shape != ref_spec.shape:
        raise ShapeMismatch(f"{probe_spec.shape} vs {ref_spec.shape}")
    t_frames, n_bins = probe_spec.shape
    taps = cfg.taps_per_band
    w = np.zeros((n_bins, taps), dtype=np.complex128)
    # history[:, l] holds X[t - l]
    history = np.zeros((n_bins, taps), dtype=np.complex128)
    err = np.empty_like(probe_spec, dtype=np.complex128)
    running = np.zeros(n_bins)
    a = cfg.power_smoothing
    for t in range(t_frames):
        history = np.roll(history, 1, axis=1)
        history[:, 0] = ref_spec[t]
        y_hat = np.sum(w * history, axis=1)
        e = probe_spec[t] - y_hat
        running = a * running + (1.0 - a) * np.abs(probe_spec[t]) ** 2
        norm = np.sum(np.abs(history) ** 2, axis=1) + cfg.regularization + cfg.power_floor * taps * running
        w += cfg.step_size * np.conj(history) * (e / norm)[:, None]
        err[t] = e
    return err, w


def subband_nlms_erase(probe: Waveform, reference: Waveform, cfg: NlmsConfig = NlmsConfig()) -> Waveform:
    """Adaptive linear echo cancellation in the STFT domain.

    Inputs must already be aligned; the shorter one sets the length.
    """
    if probe.sample_rate != reference.sample_rate:
        raise RateMismatch(f"{probe.sample_rate} vs {reference.sample_rate}")
    n = min(len(probe), len(reference))
    p = _stft_array(np.asarray(probe.samples[:n], np.float64), cfg.stft)
    r = _stft_array(np.asarray(reference.samples[:n], np.float64), cfg.stft)
    err, _ = nlms_filter_bands(p, r, cfg)
    return Waveform(_istft_array(err, cfg.stft), probe.sample_rate, "erased")


# -- ideal ratio mask --------------------------------------------------------


@dataclass(frozen=True)
class IrmConfig:
    exponent: float = 0.5
    floor: float = 1e-8

    def __post_init__(self):
        if self.exponent <= 0:
            raise ConfigError("IRM exponent must be positive")
        if self.floor < 0:
            raise ConfigError("IRM floor must be >= 0")


def _mask_from_arrays(residual: np.ndarray, echo: np.ndarray, cfg: IrmConfig) -> np.ndarray:
    r2 = np.abs(residual) ** 2
    e2 = np.abs(echo) ** 2
    return (r2 / (r2 + e2 + cfg.floor)) ** cfg.exponent


def ideal_ratio_mask(residual_spec: Spectrogram, echo_spec: Spectrogram, cfg: IrmConfig = IrmConfig()) -> np.ndarray:
    """T x F oracle mask in [0, 1]."""
    if residual_spec.frames.shape != echo_spec.frames.shape:
        raise ShapeMismatch(f"{residual_spec.frames.shape} vs {echo_spec.frames.shape}")
    return _mask_from_arrays(residual_spec.frames, echo_spec.frames, cfg)


def apply_mask_erase(probe: Waveform, mask: np.ndarray, cfg: StftConfig = StftConfig()) -> Waveform:
    """Scale the probe's STFT magnitude by ``mask``, keep its phase, invert."""
    spec = _stft_array(np.asarray(probe.samples, np.float64), cfg)
    mask = np.asarray(mask)
    if mask.shape != spec.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs probe STFT {spec.shape}")
    return Waveform(_istft_array(spec * mask, cfg), probe.sample_rate, "erased")


def oracle_irm_erase(probe: Waveform, residual: Waveform, echo: Waveform,
                     stft_cfg: StftConfig = StftConfig(), cfg: IrmConfig = IrmConfig()) -> Waveform:
    r = _stft_array(np.asarray(residual.samples, np.float64), stft_cfg)
    e = _stft_array(np.asarray(echo.samples, np.float64), stft_cfg)
    return apply_mask_erase(probe, _mask_from_arrays(r, e, cfg), stft_cfg)


# -- learned mask predictor --------------------------------------------------


@dataclass(frozen=True)
class IrmPredictorConfig:
    context: int = 2
    hidden: int = 128
    mel_dim: int = 80
    num_bins: int = 257
    steps: int = 1500
    batch_frames: int = 256
    lr: float = 1e-3
    feat_offset: float = -4.0
    feat_scale: float = 4.0
    irm: IrmConfig = field(default_factory=IrmConfig)

    def __post_init__(self):
        if self.context < 0 or min(self.hidden, self.mel_dim, self.num_bins, self.batch_frames) < 1:
            raise ConfigError("invalid mask predictor configuration")

    @property
    def input_dim(self) -> int:
        return (2 * self.context + 1) * 2 * self.mel_dim


class IrmPredictor(nn.Module):
    """Per-frame regressor: stacked log-mel context -> per-bin mask."""

    def __init__(self, cfg: IrmPredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Linear(cfg.input_dim, cfg.hidden),
            nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.hidden),
            nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.num_bins),
        )

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.net((x - self.cfg.feat_offset) / self.cfg.feat_scale))


def context_frames(stacked: np.ndarray, context: int) -> np.ndarray:
    """T x M x 2 -> T x (2c+1)*2M, edges padded by repetition."""
    t = stacked.shape[0]
    flat = stacked.reshape(t, -1)
    padded = np.concatenate([np.repeat(flat[:1], context, 0), flat, np.repeat(flat[-1:], context, 0)])
    return np.concatenate([padded[i : i + t] for i in range(2 * context + 1)], axis=1).astype(np.float32)


def _stem_paths(manifest: DatasetManifest, record: dict) -> Tuple[str, str]:
    paths = record.get("paths", {})
    missing = [k for k in ("residual", "echo") if k not in paths or not (manifest.root / paths[k]).exists()]
    if missing:
        raise MissingStems(f"example {record['id']} lacks stems {missing}")
    return paths["residual"], paths["echo"]


def irm_training_arrays(
    manifest: DatasetManifest,
    split: str,
    cfg: IrmPredictorConfig,
    echo_kinds: Optional[Sequence[str]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Context features and oracle masks for every frame in a split."""
    xs, ys = [], []
    for rec in manifest.split(split):
        if echo_kinds is not None and rec["echo_kind"] not in echo_kinds:
            continue
        res_path, echo_path = _stem_paths(manifest, rec)
        ex = load_example(manifest, rec, with_waveforms=False)
        res = _stft_array(read_wav(manifest.root / res_path).samples.astype(np.float64), manifest.stft)
        echo = _stft_array(read_wav(manifest.root / echo_path).samples.astype(np.float64), manifest.stft)
        mask = _mask_from_arrays(res, echo, cfg.irm)
        if mask.shape[0] != ex.num_frames:
            raise ShapeMismatch(f"{rec['id']}: stem frames {mask.shape[0]} vs features {ex.num_frames}")
        xs.append(context_frames(stack_inputs(ex.probe_feats, ex.reference_feats), cfg.context))
        ys.append(mask.astype(np.float32))
    if not xs:
        raise ValueError(f"no examples in split {split!r}")
    return np.concatenate(xs), np.concatenate(ys)


def train_irm_predictor(
    manifest: DatasetManifest,
    cfg: Optional[IrmPredictorConfig] = None,
    seed: int = 0,
    split: str = "train",
    echo_kinds: Optional[Sequence[str]] = None,
    arrays: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[IrmPredictor, list]:
    """MSE regression onto oracle masks. Returns (model, per-step losses)."""
    cfg = cfg or IrmPredictorConfig(mel_dim=manifest.mel.num_mels, num_bins=manifest.stft.num_bins)
    if cfg.mel_dim != manifest.mel.num_mels or cfg.num_bins != manifest.stft.num_bins:
        raise ConfigError("mask predictor dimensions disagree with the dataset")
    x_np, y_np = arrays if arrays is not None else irm_training_arrays(manifest, split, cfg, echo_kinds)
    x_all, y_all = torch.from_numpy(x_np), torch.from_numpy(y_np)
    torch.manual_seed(seed)
    model = IrmPredictor(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 0x1AB])
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(x_all), min(cfg.batch_frames, len(x_all)), replace=False))
        loss = (model(x_all[idx]) - y_all[idx]).pow(2).mean()
        if not torch.isfinite(loss):
            raise Diverged(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


def predict_mask(model: IrmPredictor, probe_feats: LogMelFrames, reference_feats: LogMelFrames) -> np.ndarray:
    x = context_frames(stack_inputs(probe_feats, reference_feats), model.cfg.context)
    with torch.no_grad():
        return model(torch.from_numpy(x)).numpy().astype(np.float64)


def mask_mse(model: IrmPredictor, x: np.ndarray, y: np.ndarray) -> float:
    with torch.no_grad():
        return float((model(torch.from_numpy(x)) - torch.from_numpy(y)).pow(2).mean())


def save_irm_predictor(path, model: IrmPredictor) -> None:
    blob = {"kind": "irm_predictor", "irm_predictor": asdict(model.cfg)}
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    checkpoint.write_container(path, b"NAEC", blob, tensors)


def load_irm_predictor(path) -> IrmPredictor:
    blob, tensors = checkpoint.read_container(path, b"NAEC")
    if blob.get("kind") != "irm_predictor":
        raise CorruptCheckpoint(f"{path}: not a mask predictor checkpoint")
    raw = dict(blob["irm_predictor"])
    raw["irm"] = IrmConfig(**raw["irm"])
    model = IrmPredictor(IrmPredictorConfig(**raw))
    sd = model.state_dict()
    if set(sd) != set(tensors):
        raise CorruptCheckpoint(f"{path}: tensor set does not match the architecture")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
