"""Desk-scale experiment bundle: proxies, dataset, baselines and the neural ladder.

Everything is derived from one seed, so building twice into fresh
directories gives byte-identical artifacts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from . import asr_proxy, baselines, neural_aec
from .data_pipeline import DatasetConfig, SpecAugmentConfig, build_dataset
from .eval_harness import ABLATION_LADDER, Artifacts
from .signal_core import MelConfig, StftConfig
from .sources import colored_noise, speech_like

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    seed: int = 0
    mel_dim: int = 40
    num_classes: int = 10
    proxy_per_class: int = 30
    proxy_heldout_per_class: int = 10
    target_per_class: int = 16
    num_references: int = 120
    num_noises: int = 60
    train_examples: int = 320
    test_examples: int = 96
    test_fraction: float = 0.25
    model: neural_aec.ModelConfig = neural_aec.ModelConfig(mel_dim=40)
    train: neural_aec.TrainConfig = neural_aec.TrainConfig(max_steps=1500, max_frames=48)
    schedule: neural_aec.LossSchedule = neural_aec.LossSchedule(lambda_final=1.0, ramp_steps=500)
    specaugment: SpecAugmentConfig = SpecAugmentConfig(max_total_freq_bins=13)
    irm_steps: int = 1500

    @property
    def mel(self) -> MelConfig:
        return MelConfig(num_mels=self.mel_dim)


def ladder_settings(cfg: DeskConfig) -> Dict[str, Tuple[bool, Optional[SpecAugmentConfig], Optional[Tuple[str, ...]]]]:
    """(latent loss on, SpecAugment config, echo kinds used) per ladder rung."""
    return {
        "neural_full": (True, cfg.specaugment, None),
        "neural_no_latent": (False, cfg.specaugment, None),
        "neural_no_latent_no_specaug": (False, None, None),
        "neural_no_latent_no_specaug_no_synthetic": (False, None, ("rerecorded",)),
    }


def dataset_sources(cfg: DeskConfig):
    """Keyword targets with labels, speech-like references and noise, all 1 s."""
    targets = asr_proxy.make_keyword_corpus(cfg.seed + 2, cfg.num_classes, cfg.target_per_class)
    refs = [speech_like(int(s), 1.0) for s in np.random.SeedSequence([cfg.seed, 3]).generate_state(cfg.num_references)]
    noises = [colored_noise(int(s), 1.0) for s in np.random.SeedSequence([cfg.seed, 4]).generate_state(cfg.num_noises)]
    return {"target": targets.waves, "reference": refs, "noise": noises}, targets.labels


def build_proxies(cfg: DeskConfig, out: Path) -> Dict[str, Path]:
    train = asr_proxy.make_keyword_corpus(cfg.seed, cfg.num_classes, cfg.proxy_per_class)
    heldout = asr_proxy.make_keyword_corpus(cfg.seed + 1, cfg.num_classes, cfg.proxy_heldout_per_class)
    paths = {}
    for arch in asr_proxy.ARCHITECTURES:
        rec = asr_proxy.train_proxy(train, arch, cfg.seed, heldout, mel_cfg=cfg.mel)
        log.info("proxy %s held-out accuracy %.3f", arch, rec.heldout_accuracy)
        paths[arch] = out / f"proxy_{arch}.ckpt"
        asr_proxy.save_proxy(paths[arch], rec)
    return paths


def build_desk_bundle(
    out_dir,
    cfg: DeskConfig = DeskConfig(),
    systems=ABLATION_LADDER,
    proxies: Optional[Dict[str, Path]] = None,
) -> Artifacts:
    """Build everything under ``out_dir``; ``proxies`` reuses already trained recognizers."""
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if proxies is None:
        proxies = build_proxies(cfg, out)

    sources, labels = dataset_sources(cfg)
    data_cfg = DatasetConfig(stft=StftConfig(), mel=cfg.mel)
    ratios = {"train": 1.0 - cfg.test_fraction, "test": cfg.test_fraction}
    manifest = build_dataset(
        sources,
        {"train": cfg.train_examples, "test": cfg.test_examples},
        ratios,
        cfg.seed,
        out / "data",
        data_cfg,
        target_labels=labels,
        eval_splits=("test",),
    )

    checkpoints = {}
    irm_model, _ = baselines.train_irm_predictor(
        manifest,
        baselines.IrmPredictorConfig(mel_dim=cfg.mel_dim, num_bins=data_cfg.stft.num_bins, steps=cfg.irm_steps),
        cfg.seed,
    )
    checkpoints["irm_predicted"] = out / "irm_predicted.ckpt"
    baselines.save_irm_predictor(checkpoints["irm_predicted"], irm_model)

    frozen = asr_proxy.load_proxy(proxies["A"])
    for name in systems:
        latent_on, spec_cfg, kinds = ladder_settings(cfg)[name]
        items = neural_aec.items_from_manifest(manifest, "train", kinds)
        tcfg = replace(cfg.train, seed=cfg.seed, specaugment=spec_cfg)
        state = neural_aec.train(
            items,
            cfg.model,
            tcfg,
            cfg.schedule,
            frozen_encoder=frozen.encode if latent_on else None,
            log_path=out / f"{name}.log.jsonl",
        )
        checkpoints[name] = out / f"{name}.ckpt"
        neural_aec.save_checkpoint(
            checkpoints[name],
            state.model,
            {"train": _train_json(tcfg), "loss_schedule": cfg.schedule, "latent_loss": latent_on,
             "echo_kinds": list(kinds) if kinds else None},
        )
        log.info("trained %s: final spectral %.4f", name, state.log[-1]["spectral"])

    artifacts = Artifacts(out / "data", checkpoints, proxies)
    artifacts.to_json(out / "bundle.json")
    return artifacts


def _train_json(tcfg: neural_aec.TrainConfig) -> dict:
    d = asdict(tcfg)
    return json.loads(json.dumps(d, default=list))
