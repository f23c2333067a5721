"""Small keyword recognizers used as stand-ins for a pre-trained ASR model.

Architecture "A" is a stack of temporal convolutions, "B" a stack of
unidirectional LSTMs. Both keep the frame rate (latent T equals input T)
and classify by mean-pooling the latent sequence. Inputs are log-mel
frames with the per-utterance mean removed, so a uniform gain on the
waveform mostly cancels.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import checkpoint
from .errors import ConfigError, Diverged, ShapeMismatch
from .signal_core import (
    DEFAULT_SAMPLE_RATE,
    LogMelFrames,
    MelConfig,
    StftConfig,
    Waveform,
    gain_for_snr,
    wave_to_log_mel,
)
from .sources import colored_noise, keyword_templates, keyword_token, place_in_silence

ARCHITECTURES = ("A", "B")


@dataclass
class KeywordCorpus:
    waves: List[Waveform]
    labels: np.ndarray
    num_classes: int
    seed: int
    template_seed: int

    def __len__(self) -> int:
        return len(self.waves)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.labels, dtype=np.int64).tobytes())
        for w in self.waves:
            h.update(w.samples.tobytes())
        return h.hexdigest()

    def features(self, stft_cfg: StftConfig = StftConfig(), mel_cfg: MelConfig = MelConfig()) -> np.ndarray:
        """N x T x M log-mel stack (all tokens share one buffer length)."""
        return np.stack([wave_to_log_mel(w, stft_cfg, mel_cfg).frames for w in self.waves])


def _example_seed(seed: int, idx: int) -> int:
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def make_keyword_corpus(
    seed: int,
    num_classes: int = 10,
    per_class: int = 50,
    duration: float = 1.0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    template_seed: int = 1234,
) -> KeywordCorpus:
    """Class-balanced keyword tokens, each placed at a random offset in silence.

    The class templates depend only on ``template_seed``; ``seed`` controls
    the per-token pitch, duration, level and placement, so corpora with
    different seeds share classes but not tokens.
    """
    if num_classes < 2:
        raise ConfigError("need at least two keyword classes")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    templates = keyword_templates(num_classes, template_seed)
    total = int(round(duration * sample_rate))
    waves, labels = [], []
    for i in range(per_class):
        for k in range(num_classes):
            s = _example_seed(seed, i * num_classes + k)
            level = float(np.random.default_rng([s, 1]).uniform(0.2, 0.7))
            tok = keyword_token(k, s, templates, sample_rate, level)
            waves.append(place_in_silence(tok, total, s + 1, role="target"))
            labels.append(k)
    return KeywordCorpus(waves, np.array(labels), num_classes, seed, template_seed)


# -- recognizers -------------------------------------------------------------


@dataclass(frozen=True)
class ProxyConfig:
    arch: str = "A"
    num_classes: int = 10
    mel_dim: int = 80
    width: int = 32
    layers: int = 3
    kernel: int = 5
    feat_scale: float = 4.0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown proxy architecture {self.arch!r}")
        if min(self.num_classes, self.mel_dim, self.width, self.layers, self.kernel) < 1:
            raise ConfigError("proxy sizes must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd")


def default_proxy_config(arch: str, num_classes: int, mel_dim: int) -> ProxyConfig:
    if arch == "B":
        return ProxyConfig("B", num_classes, mel_dim, width=48, layers=2)
    return ProxyConfig(arch, num_classes, mel_dim, width=32, layers=3)


class ProxyRecognizer(nn.Module):
    def __init__(self, cfg: ProxyConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.arch == "A":
            dims = [cfg.mel_dim] + [cfg.width] * cfg.layers
            self.convs = nn.ModuleList(
                nn.Conv1d(a, b, cfg.kernel, padding=cfg.kernel // 2) for a, b in zip(dims[:-1], dims[1:])
            )
        else:
            self.rnn = nn.LSTM(cfg.mel_dim, cfg.width, cfg.layers, batch_first=True)
        self.head = nn.Linear(cfg.width, cfg.num_classes)
        self.frozen = False
        self.heldout_accuracy: Optional[float] = None

    def _prepare(self, feats: Tensor) -> Tensor:
        if feats.dim() != 3 or feats.shape[-1] != self.cfg.mel_dim:
            raise ShapeMismatch(f"expected B x T x {self.cfg.mel_dim}, got {tuple(feats.shape)}")
        return (feats - feats.mean(dim=(1, 2), keepdim=True)) / self.cfg.feat_scale

    def encode(self, feats: Tensor) -> Tensor:
        """B x T x M log-mel -> B x T x H latents."""
        x = self._prepare(feats)
        if self.cfg.arch == "A":
            h = x.transpose(1, 2)
            for conv in self.convs:
                h = torch.tanh(conv(h))
            return h.transpose(1, 2)
        h, _ = self.rnn(x)
        return h

    def forward(self, feats: Tensor) -> Tensor:
        return self.head(self.encode(feats).mean(dim=1))

    def freeze(self) -> "ProxyRecognizer":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self


# -- training ----------------------------------------------------------------


def _augment(wave: Waveform, seed: int) -> Waveform:
    # random gain plus light background noise; the recognizer should not
    # depend on absolute level or a perfectly clean floor
    rng = np.random.default_rng(seed)
    x = wave.samples * float(np.exp(rng.uniform(np.log(0.25), np.log(2.0))))
    noise = colored_noise(int(rng.integers(0, 2**31)), len(x) / wave.sample_rate, wave.sample_rate)
    g = gain_for_snr(wave.with_samples(x), noise, float(rng.uniform(10.0, 40.0)))
    return wave.with_samples(x + g * noise.samples[: len(x)])


def train_proxy(
    corpus: KeywordCorpus,
    arch: str = "A",
    seed: int = 0,
    heldout: Optional[KeywordCorpus] = None,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    steps: int = 600,
    batch_size: int = 32,
    lr: float = 1e-2,
    augment_copies: int = 2,
    cfg: Optional[ProxyConfig] = None,
) -> ProxyRecognizer:
    """Cross-entropy training on (clean + lightly corrupted) tokens, then freeze."""
    if len(corpus) < 2:
        raise ValueError("corpus too small")
    counts = np.bincount(corpus.labels, minlength=corpus.num_classes)
    if counts.min() < 1:
        raise ValueError("every class needs at least one example")
    cfg = cfg or default_proxy_config(arch, corpus.num_classes, mel_cfg.num_mels)
    if cfg.mel_dim != mel_cfg.num_mels:
        raise ConfigError("proxy mel_dim disagrees with the feature config")

    feats = [corpus.features(stft_cfg, mel_cfg)]
    for c in range(augment_copies):
        feats.append(
            np.stack(
                [
                    wave_to_log_mel(_augment(w, _example_seed(seed, (c + 1) * 1_000_003 + i)), stft_cfg, mel_cfg).frames
                    for i, w in enumerate(corpus.waves)
                ]
            )
        )
    x_all = torch.from_numpy(np.concatenate(feats))
    y_all = torch.from_numpy(np.tile(corpus.labels, len(feats))).long()

    torch.manual_seed(seed)
    model = ProxyRecognizer(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 0xA5])
    model.train()
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(len(x_all), min(batch_size, len(x_all)), replace=False))
        loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
        if not torch.isfinite(loss):
            raise Diverged(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
    model.freeze()
    if heldout is not None:
        model.heldout_accuracy = 1.0 - proxy_error_rate(heldout.features(stft_cfg, mel_cfg), heldout.labels, model)
    return model


# -- metrics -----------------------------------------------------------------

FeatureInput = Union[np.ndarray, Sequence[LogMelFrames], Sequence[Waveform]]


def _as_feature_list(inputs: FeatureInput, stft_cfg: StftConfig, mel_cfg: MelConfig) -> List[np.ndarray]:
    if isinstance(inputs, np.ndarray):
        if inputs.ndim == 2:
            return [inputs]
        return list(inputs)
    out = []
    for item in inputs:
        if isinstance(item, Waveform):
            out.append(wave_to_log_mel(item, stft_cfg, mel_cfg).frames)
        elif isinstance(item, LogMelFrames):
            out.append(item.frames)
        else:
            out.append(np.asarray(item, dtype=np.float32))
    return out


def predict(
    inputs: FeatureInput,
    recognizer: ProxyRecognizer,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: Optional[MelConfig] = None,
) -> np.ndarray:
    mel_cfg = mel_cfg or MelConfig(num_mels=recognizer.cfg.mel_dim)
    feats = _as_feature_list(inputs, stft_cfg, mel_cfg)
    preds = []
    with torch.no_grad():
        for f in feats:
            logits = recognizer(torch.as_tensor(f, dtype=torch.float32)[None])
            preds.append(int(logits.argmax(dim=-1)[0]))
    return np.array(preds, dtype=int)


def proxy_error_rate(
    inputs: FeatureInput,
    labels: Sequence[int],
    recognizer: ProxyRecognizer,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: Optional[MelConfig] = None,
) -> float:
    """1 - accuracy of the recognizer on features or waveforms."""
    labels = np.asarray(labels)
    preds = predict(inputs, recognizer, stft_cfg, mel_cfg)
    if len(preds) != len(labels):
        raise ShapeMismatch("one label per input required")
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(preds != labels))


def latent_mse(a: np.ndarray, b: np.ndarray, recognizer: ProxyRecognizer) -> float:
    """MSE between the recognizer's latents for two T x M feature matrices."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    with torch.no_grad():
        za = recognizer.encode(torch.as_tensor(a, dtype=torch.float32)[None])
        zb = recognizer.encode(torch.as_tensor(b, dtype=torch.float32)[None])
    return float((za - zb).pow(2).mean())


# -- persistence -------------------------------------------------------------


def save_proxy(path, recognizer: ProxyRecognizer) -> None:
    blob = {
        "kind": "proxy",
        "proxy": asdict(recognizer.cfg),
        "frozen": recognizer.frozen,
        "heldout_accuracy": recognizer.heldout_accuracy,
    }
    tensors = {k: v.detach().cpu().numpy() for k, v in recognizer.state_dict().items()}
    checkpoint.write_container(path, b"PRXY", blob, tensors)


def load_proxy(path) -> ProxyRecognizer:
    blob, tensors = checkpoint.read_container(path, b"PRXY")
    if blob.get("kind") != "proxy":
        raise checkpoint.CorruptCheckpoint(f"{path}: not a proxy recognizer checkpoint")
    model = ProxyRecognizer(ProxyConfig(**blob["proxy"]))
    sd = model.state_dict()
    if set(sd) != set(tensors):
        raise checkpoint.CorruptCheckpoint(f"{path}: tensor set does not match the architecture")
    for k in sd:
        if tuple(tensors[k].shape) != tuple(sd[k].shape):
            raise checkpoint.CorruptCheckpoint(f"{path}: shape mismatch for {k}")
        sd[k] = torch.from_numpy(tensors[k])
    model.load_state_dict(sd)
    model.heldout_accuracy = blob.get("heldout_accuracy")
    model.eval()
    if blob.get("frozen", True):
        model.freeze()
    return model
