"""Sequence-to-sequence spectral echo canceller.

A stack of unidirectional LSTMs encodes the stacked probe/reference log-mel
frames without downsampling. A frame-synchronous autoregressive decoder
(pre-net -> LSTM cell -> projection) predicts one target frame per encoder
frame, and a five-layer convolutional post-net adds a residual correction.
There is no attention and no stop-token: the output has exactly as many
frames as the input.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import checkpoint
from .data_pipeline import (
    DatasetManifest,
    SpecAugmentConfig,
    augment_inputs,
    read_feature_shard,
    stack_inputs,
)
from .errors import ConfigError, Diverged, LatentMismatch, ShapeMismatch
from .signal_core import (
    LogMelFrames,
    MelConfig,
    StftConfig,
    Waveform,
    griffin_lim,
    mel_pseudo_inverse,
    trim_to_lag,
    wave_to_log_mel,
    xcorr_align,
)


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 2
    encoder_width: int = 48
    decoder_width: int = 48
    mel_dim: int = 80
    prenet_layers: int = 2
    prenet_width: int = 32
    prenet_dropout: float = 0.5
    postnet_layers: int = 5
    postnet_filters: int = 32
    postnet_kernel: int = 5
    # fixed affine map between log-mel units and the network's internal scale
    feat_offset: float = -4.0
    feat_scale: float = 4.0

    def __post_init__(self):
        ints = (
            self.encoder_layers,
            self.encoder_width,
            self.decoder_width,
            self.mel_dim,
            self.prenet_layers,
            self.prenet_width,
            self.postnet_layers,
            self.postnet_filters,
            self.postnet_kernel,
        )
        if min(ints) < 1:
            raise ConfigError("model sizes must be positive")
        if self.postnet_kernel % 2 == 0:
            raise ConfigError("post-net kernel must be odd for same padding")
        if not 0.0 <= self.prenet_dropout < 1.0:
            raise ConfigError("prenet_dropout must be in [0, 1)")
        if self.feat_scale <= 0:
            raise ConfigError("feat_scale must be positive")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Widths for a large-data run; the defaults are sized for a CPU."""
        return cls(
            encoder_layers=3,
            encoder_width=512,
            decoder_width=512,
            mel_dim=80,
            prenet_width=256,
            postnet_filters=512,
        )


@dataclass(frozen=True)
class LossSchedule:
    lambda_final: float = 0.01
    ramp_steps: int = 2000

    def __post_init__(self):
        if self.lambda_final < 0 or self.ramp_steps < 1:
            raise ConfigError("need lambda_final >= 0 and ramp_steps >= 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 1000
    seed: int = 0
    scheduled_sampling: bool = True
    specaugment: Optional[SpecAugmentConfig] = None
    max_frames: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0 or self.lr <= 0:
            raise ConfigError("invalid training configuration")


# -- model -------------------------------------------------------------------


class Prenet(nn.Module):
    def __init__(self, n_input: int, width: int, layers: int, dropout: float):
        super().__init__()
        dims = [n_input] + [width] * layers
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.dropout = dropout

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        for layer in self.layers:
            x = F.relu(layer(x))
            if generator is not None and self.dropout > 0:
                keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= self.dropout
                x = x * keep.to(x.dtype) / (1.0 - self.dropout)
        return x


class Postnet(nn.Module):
    """Temporal convolutions; batch-norm + tanh on all but the last layer."""

    def __init__(self, mel_dim: int, filters: int, kernel: int, layers: int):
        super().__init__()
        pad = kernel // 2
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(layers):
            n_in = mel_dim if i == 0 else filters
            n_out = mel_dim if i == layers - 1 else filters
            self.convs.append(nn.Conv1d(n_in, n_out, kernel, padding=pad))
            if i < layers - 1:
                self.norms.append(nn.BatchNorm1d(n_out))

    def forward(self, x: Tensor) -> Tensor:
        # x: B x T x M
        h = x.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.norms):
                h = torch.tanh(self.norms[i](h))
        return h.transpose(1, 2)


class NeuralAEC(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        m = cfg.mel_dim
        self.encoder = nn.LSTM(2 * m, cfg.encoder_width, cfg.encoder_layers, batch_first=True)
        self.prenet = Prenet(m, cfg.prenet_width, cfg.prenet_layers, cfg.prenet_dropout)
        self.decoder_cell = nn.LSTMCell(cfg.prenet_width + cfg.encoder_width, cfg.decoder_width)
        self.projection = nn.Linear(cfg.decoder_width + cfg.encoder_width, m)
        self.postnet = Postnet(m, cfg.postnet_filters, cfg.postnet_kernel, cfg.postnet_layers)

    def normalize(self, x: Tensor) -> Tensor:
        return (x - self.cfg.feat_offset) / self.cfg.feat_scale

    def denormalize(self, x: Tensor) -> Tensor:
        return x * self.cfg.feat_scale + self.cfg.feat_offset

    def encode(self, stacked: Tensor) -> Tensor:
        """B x T x M x 2 -> B x T x H."""
        b, t, m, c = stacked.shape
        if m != self.cfg.mel_dim or c != 2:
            raise ShapeMismatch(f"expected B x T x {self.cfg.mel_dim} x 2, got {tuple(stacked.shape)}")
        out, _ = self.encoder(self.normalize(stacked).reshape(b, t, m * c))
        return out

    def initial_state(self, batch: int, like: Tensor) -> Tuple[Tensor, Tensor]:
        z = like.new_zeros(batch, self.cfg.decoder_width)
        return z, z.clone()

    def decoder_step(
        self,
        prev_frame: Tensor,
        enc_t: Tensor,
        state: Tuple[Tensor, Tensor],
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        """One frame: (B x M previous frame, B x H encoder frame) -> B x M."""
        gated = self.prenet(self.normalize(prev_frame), generator)
        h, c = self.decoder_cell(torch.cat([gated, enc_t], dim=-1), state)
        # the projection also sees the aligned encoder frame, the way
        # attention decoders feed their context vector to the output layer
        return self.denormalize(self.projection(torch.cat([h, enc_t], dim=-1))), (h, c)

    def postnet_residual(self, pre_frames: Tensor) -> Tensor:
        return self.postnet(self.normalize(pre_frames)) * self.cfg.feat_scale

    def forward(
        self,
        stacked: Tensor,
        target: Optional[Tensor] = None,
        sampling_mask: Optional[Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Returns (y_pre, y_post), both B x T x M.

        Where ``sampling_mask`` is true the decoder is fed its own previous
        pre-post-net frame, elsewhere the ground-truth previous target frame.
        Without a target the decoder runs free.
        """
        enc = self.encode(stacked)
        b, t, _ = enc.shape
        m = self.cfg.mel_dim
        if target is None:
            sampling_mask = torch.ones(b, t, dtype=torch.bool)
        elif sampling_mask is None:
            sampling_mask = torch.zeros(b, t, dtype=torch.bool)
        state = self.initial_state(b, enc)
        prev = enc.new_zeros(b, m)  # go frame
        outputs: List[Tensor] = []
        for i in range(t):
            if i > 0:
                own = outputs[-1]
                if target is None:
                    prev = own
                else:
                    prev = torch.where(sampling_mask[:, i : i + 1], own, target[:, i - 1])
            y, state = self.decoder_step(prev, enc[:, i], state, generator)
            outputs.append(y)
        y_pre = torch.stack(outputs, dim=1)
        return y_pre, y_pre + self.postnet_residual(y_pre)


def init_model(cfg: ModelConfig, seed: int, zero_postnet_output: bool = True) -> NeuralAEC:
    torch.manual_seed(seed)
    model = NeuralAEC(cfg)
    if zero_postnet_output:
        with torch.no_grad():
            model.postnet.convs[-1].weight.zero_()
            model.postnet.convs[-1].bias.zero_()
    return model


def encoder_forward(stacked: np.ndarray, model: NeuralAEC) -> np.ndarray:
    """T x M x 2 -> T x H."""
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(stacked), dtype=_dtype(model))[None]
        return model.encode(x)[0].numpy()


def postnet_forward(pre_frames: np.ndarray, model: NeuralAEC) -> np.ndarray:
    """T x M -> residual T x M (inference statistics)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(pre_frames), dtype=_dtype(model))[None]
            return model.postnet_residual(x)[0].numpy()
    finally:
        model.train(was_training)


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


# -- losses and schedules ----------------------------------------------------


def spectral_loss(y_pre: Tensor, y_post: Tensor, target: Tensor) -> Tensor:
    """Mean L1 + mean squared error, before and after the post-net."""
    if y_pre.shape != target.shape or y_post.shape != target.shape:
        raise ShapeMismatch("prediction and target shapes differ")
    d_pre, d_post = y_pre - target, y_post - target
    return d_pre.abs().mean() + d_pre.pow(2).mean() + d_post.abs().mean() + d_post.pow(2).mean()


def latent_loss(y_post: Tensor, target: Tensor, frozen_encoder: Callable[[Tensor], Tensor]) -> Tensor:
    """MSE between frozen-encoder latents of the prediction and the target.

    The target branch is computed without a graph; gradients reach
    ``y_post`` through the encoder's operations but never its parameters.
    """
    with torch.no_grad():
        z_target = frozen_encoder(target)
    z_pred = frozen_encoder(y_post)
    if z_pred.shape != z_target.shape:
        raise LatentMismatch(f"latent shapes differ: {tuple(z_pred.shape)} vs {tuple(z_target.shape)}")
    return (z_pred - z_target).pow(2).mean()


def lambda_at(step: int, sched: LossSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return min(step / sched.ramp_steps, 1.0) * sched.lambda_final


def total_loss(spectral, latent, lam: float):
    return spectral + lam * latent


def sampling_mask(rng_seed, num_frames: int) -> np.ndarray:
    """Exactly floor(T/2) positions set, chosen uniformly."""
    if num_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(rng_seed)
    mask = np.zeros(num_frames, dtype=bool)
    mask[rng.choice(num_frames, num_frames // 2, replace=False)] = True
    return mask


def model_forward(
    example,
    model: NeuralAEC,
    mask: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Single-utterance forward in inference mode; returns (y_pre, y_post) as T x M."""
    stacked = stack_inputs(example.probe_feats, example.reference_feats)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.as_tensor(stacked, dtype=_dtype(model))[None]
            tgt = torch.as_tensor(example.target_feats.frames, dtype=_dtype(model))[None]
            m = torch.as_tensor(np.asarray(mask, dtype=bool))[None]
            if m.shape[1] != x.shape[1]:
                raise ShapeMismatch("sampling mask length differs from frame count")
            y_pre, y_post = model(x, tgt, m)
    finally:
        model.train(was_training)
    return y_pre[0].numpy(), y_post[0].numpy()


def infer(stacked: np.ndarray, model: NeuralAEC) -> Tuple[np.ndarray, np.ndarray]:
    """Free-running decode of a T x M x 2 input."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y_pre, y_post = model(torch.as_tensor(stacked, dtype=_dtype(model))[None])
    finally:
        model.train(was_training)
    return y_pre[0].numpy(), y_post[0].numpy()


# -- training ----------------------------------------------------------------


@dataclass
class TrainItem:
    probe: np.ndarray
    reference: np.ndarray
    target: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.probe.shape[0]


def items_from_manifest(
    manifest: DatasetManifest, split: str = "train", echo_kinds: Optional[Sequence[str]] = None
) -> List[TrainItem]:
    items = []
    for rec in manifest.split(split):
        if echo_kinds is not None and rec["echo_kind"] not in echo_kinds:
            continue
        f = read_feature_shard(manifest.root / rec["paths"]["feats"])
        items.append(TrainItem(f[..., 0], f[..., 1], f[..., 2]))
    return items


def _step_seed(seed: int, step: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step, *extra])


def _assemble_batch(
    items: Sequence[TrainItem], cfg: TrainConfig, step: int, mel_cfg: MelConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_step_seed(cfg.seed, step))
    idx = rng.choice(len(items), cfg.batch_size, replace=len(items) < cfg.batch_size)
    t = min(items[i].num_frames for i in idx)
    if cfg.max_frames is not None:
        t = min(t, cfg.max_frames)
    xs, ys, masks = [], [], []
    for j, i in enumerate(idx):
        it = items[i]
        start = int(rng.integers(0, it.num_frames - t + 1))
        sl = slice(start, start + t)
        p = LogMelFrames(it.probe[sl], mel_cfg)
        r = LogMelFrames(it.reference[sl], mel_cfg)
        if cfg.specaugment is not None:
            p, r = augment_inputs(p, r, cfg.specaugment, int(rng.integers(0, 2**31)))
        xs.append(stack_inputs(p, r))
        ys.append(it.target[sl])
        if cfg.scheduled_sampling:
            masks.append(sampling_mask(int(rng.integers(0, 2**31)), t))
        else:
            masks.append(np.zeros(t, dtype=bool))
    return np.stack(xs), np.stack(ys), np.stack(masks)


@dataclass
class TrainState:
    model: NeuralAEC
    optimizer: torch.optim.Adam
    step: int = 0
    log: List[dict] = field(default_factory=list)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def train(
    items: Sequence[TrainItem],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sched: LossSchedule = LossSchedule(),
    frozen_encoder: Optional[Callable[[Tensor], Tensor]] = None,
    state: Optional[TrainState] = None,
    log_path: Optional[Path] = None,
) -> TrainState:
    """Run ADAM steps until ``train_cfg.max_steps``.

    Batch selection, SpecAugment masks, scheduled-sampling masks and dropout
    are all seeded from (seed, step), so a run resumed from a saved state
    continues exactly as an uninterrupted one. Without a frozen encoder the
    latent term is dropped (lambda treated as 0).
    """
    if not items:
        raise ValueError("training set is empty")
    torch.set_num_threads(1)
    mel_cfg = MelConfig(num_mels=model_cfg.mel_dim)
    if state is None:
        model = init_model(model_cfg, train_cfg.seed)
        state = TrainState(model, make_optimizer(model, train_cfg))
    model, opt = state.model, state.optimizer
    model.train()
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        while state.step < train_cfg.max_steps:
            step = state.step
            t0 = time.perf_counter()
            x, y, m = _assemble_batch(items, train_cfg, step, mel_cfg)
            gen = torch.Generator().manual_seed(int(_step_seed(train_cfg.seed, step, 7).generate_state(1)[0]))
            x_t, y_t = torch.from_numpy(x), torch.from_numpy(y)
            y_pre, y_post = model(x_t, y_t, torch.from_numpy(m), gen)
            spec = spectral_loss(y_pre, y_post, y_t)
            lam = lambda_at(step, sched) if frozen_encoder is not None else 0.0
            if frozen_encoder is not None:
                lat = latent_loss(y_post, y_t, frozen_encoder)
            else:
                lat = torch.zeros((), dtype=spec.dtype)
            loss = total_loss(spec, lat, lam)
            if not torch.isfinite(loss):
                raise Diverged(step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.step += 1
            entry = {
                "step": step,
                "spectral": float(spec.detach()),
                "latent": float(lat.detach()),
                "lambda": lam,
                "total": float(loss.detach()),
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            }
            state.log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return state


# -- inference ---------------------------------------------------------------


def erase(
    probe: Waveform,
    reference: Waveform,
    model: NeuralAEC,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: Optional[MelConfig] = None,
    gl_iters: int = 60,
    max_lag: int = 800,
    align: bool = True,
) -> Waveform:
    """Align, featurize, decode free-running and invert via Griffin-Lim.

    With ``align=False`` the inputs are taken as already aligned and only
    cut to a common length.
    """
    mel_cfg = mel_cfg or MelConfig(num_mels=model.cfg.mel_dim)
    if align:
        lag = xcorr_align(probe, reference, max_lag)
        p_sl, r_sl = trim_to_lag(probe.samples, reference.samples, lag)
    else:
        n = min(len(probe), len(reference))
        p_sl = r_sl = slice(0, n)
    p = probe.with_samples(probe.samples[p_sl])
    r = reference.with_samples(reference.samples[r_sl])
    stacked = stack_inputs(wave_to_log_mel(p, stft_cfg, mel_cfg), wave_to_log_mel(r, stft_cfg, mel_cfg))
    _, y_post = infer(stacked, model)
    mag = mel_pseudo_inverse(LogMelFrames(y_post, mel_cfg), stft_cfg, probe.sample_rate)
    wave, _ = griffin_lim(mag, stft_cfg, gl_iters, probe.sample_rate)
    return wave.with_role("erased")


# -- checkpoints -------------------------------------------------------------


def _configs_to_json(configs: Dict[str, object]) -> dict:
    out = {}
    for k, v in configs.items():
        if v is None:
            out[k] = None
        elif hasattr(v, "__dataclass_fields__"):
            out[k] = asdict(v)
        else:
            out[k] = v
    return out


def save_checkpoint(
    path,
    model: NeuralAEC,
    configs: Optional[Dict[str, object]] = None,
    state: Optional[TrainState] = None,
    magic: bytes = b"NAEC",
) -> None:
    """Model tensors, optional ADAM moments, and every config as JSON."""
    blob = {"kind": "neural_aec", "model": asdict(model.cfg)}
    blob.update(_configs_to_json(configs or {}))
    tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if state is not None:
        blob["step"] = state.step
        names = {id(p): n for n, p in model.named_parameters()}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                st = state.optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                tensors[f"optim/{n}/exp_avg"] = st["exp_avg"].numpy()
                tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
                blob.setdefault("optim_steps", {})[n] = float(st["step"])
    checkpoint.write_container(path, magic, blob, tensors)


def load_checkpoint(path, train_cfg: Optional[TrainConfig] = None) -> Tuple[NeuralAEC, dict, Optional[TrainState]]:
    """Returns (model, config blob, training state or None)."""
    blob, tensors = checkpoint.read_container(path, b"NAEC")
    if blob.get("kind") != "neural_aec":
        raise checkpoint.CorruptCheckpoint(f"{path}: not a neural AEC checkpoint")
    cfg = ModelConfig(**blob["model"])
    model = NeuralAEC(cfg)
    sd = model.state_dict()
    for k in sd:
        key = f"model/{k}"
        if key in tensors:
            if tuple(tensors[key].shape) != tuple(sd[k].shape):
                raise checkpoint.CorruptCheckpoint(f"{path}: shape mismatch for {k}")
            sd[k] = torch.from_numpy(tensors[key]).to(sd[k].dtype)
        else:
            raise checkpoint.CorruptCheckpoint(f"{path}: missing tensor {k}")
    model.load_state_dict(sd)
    model.eval()
    state = None
    if "step" in blob:
        opt = make_optimizer(model, train_cfg or TrainConfig())
        for n, p in model.named_parameters():
            if f"optim/{n}/exp_avg" in tensors:
                opt.state[p] = {
                    "step": torch.tensor(blob["optim_steps"][n]),
                    "exp_avg": torch.from_numpy(tensors[f"optim/{n}/exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim/{n}/exp_avg_sq"]),
                }
        state = TrainState(model, opt, int(blob["step"]))
    return model, blob, state
