"""Command-line entry point: simulate | synth-data | train | erase | evaluate.

Every command reads one optional JSON run config (sections stft, mel, room,
mix, specaugment, model, train, loss_schedule, eval, irm, proxy, sources);
flags override config values, and AEC_SEED overrides the config seed. The hash
of the fully resolved config is written next to every output.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import asr_proxy, baselines, neural_aec, room_sim
from .data_pipeline import DatasetConfig, SpecAugmentConfig, build_dataset, load_manifest
from .errors import ConfigError, Diverged, MissingArtifact
from .eval_harness import Artifacts, ExperimentMatrix, run_experiment, write_report
from .room_sim import RoomConstraints
from .signal_core import MelConfig, StftConfig, read_wav, write_wav

log = logging.getLogger("deskaec")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4, 5


# -- run config --------------------------------------------------------------


@dataclass(frozen=True)
class MixSection:
    hardness_range: tuple = (0.5, 3.0)
    synthetic_fraction: float = 0.5
    train_devices: tuple = (0, 1, 2, 3)
    eval_devices: tuple = (100, 101)
    max_lag: int = 800


@dataclass(frozen=True)
class ProxySection:
    arch: str = "A"
    num_classes: int = 10
    per_class: int = 30
    heldout_per_class: int = 10
    steps: int = 600


@dataclass(frozen=True)
class SourcesSection:
    # keyword targets per class, speech-like references and noise clips
    targets_per_class: int = 16
    num_classes: int = 10
    num_references: int = 120
    num_noises: int = 60


SECTIONS = {
    "stft": StftConfig,
    "mel": MelConfig,
    "room": RoomConstraints,
    "mix": MixSection,
    "specaugment": SpecAugmentConfig,
    "model": neural_aec.ModelConfig,
    "train": neural_aec.TrainConfig,
    "loss_schedule": neural_aec.LossSchedule,
    "eval": ExperimentMatrix,
    "irm": baselines.IrmPredictorConfig,
    "proxy": ProxySection,
    "sources": SourcesSection,
}
# fields filled from other sections rather than set directly
DERIVED_FIELDS = {"train": {"specaugment"}, "irm": {"irm"}}


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _build_section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if raw is None and name == "specaugment":
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - DERIVED_FIELDS.get(name, set())
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**{k: _tuples(v) for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    sections: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(raw) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        sections = {name: _build_section(name, raw.get(name, {})) for name in SECTIONS}
        if sections["model"].mel_dim != sections["mel"].num_mels and "mel_dim" not in raw.get("model", {}):
            sections["model"] = dataclasses.replace(sections["model"], mel_dim=sections["mel"].num_mels)
        if sections["model"].mel_dim != sections["mel"].num_mels:
            raise ConfigError("model.mel_dim must equal mel.num_mels")
        return cls(seed, sections)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise MissingArtifact(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def __getitem__(self, name: str):
        return self.sections[name]

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name, value in self.sections.items():
            out[name] = None if value is None else asdict(value)
        return json.loads(json.dumps(out, default=list))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dataset_config(self) -> DatasetConfig:
        mix = self["mix"]
        return DatasetConfig(
            stft=self["stft"], mel=self["mel"], room=self["room"], hardness_range=mix.hardness_range,
            synthetic_fraction=mix.synthetic_fraction, train_devices=mix.train_devices,
            eval_devices=mix.eval_devices, max_lag=mix.max_lag,
        )


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    env_seed = os.environ.get("AEC_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"AEC_SEED must be an integer, got {env_seed!r}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _write_sidecar(path: Path, cfg: RunConfig, command: str, extra: Optional[dict] = None) -> None:
    blob = {"command": command, "config_hash": cfg.hash(), "config": cfg.to_dict(), **(extra or {})}
    path.write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


def _mkdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands ----------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _mkdir(args.out)
    seeds = np.random.SeedSequence([cfg.seed, 0x4001]).generate_state(args.rooms)
    rooms = []
    for i, s in enumerate(seeds):
        room = room_sim.sample_room_config(int(s), cfg["room"])
        for kind in room_sim.SOURCE_KINDS:
            rir = room_sim.compute_rir(room, kind)
            room_sim.save_rir(out / f"room_{i:04d}_{kind}.wav", rir, room)
        rooms.append({"index": i, "room_seed": int(s)})
    _write_sidecar(out / "simulate.json", cfg, "simulate", {"rooms": rooms})
    print(out)
    return EXIT_OK


def _parse_counts(text: str) -> Dict[str, int]:
    counts = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        if not name or not n.strip().isdigit():
            raise ConfigError(f"bad --counts entry {part!r}; expected split=N")
        counts[name.strip()] = int(n)
    return counts


def _sources(cfg: RunConfig):
    from .sources import colored_noise, speech_like

    src = cfg["sources"]
    targets = asr_proxy.make_keyword_corpus(cfg.seed + 2, src.num_classes, src.targets_per_class)
    ss = lambda k, n: np.random.SeedSequence([cfg.seed, k]).generate_state(n)  # noqa: E731
    refs = [speech_like(int(s), 1.0) for s in ss(3, src.num_references)]
    noises = [colored_noise(int(s), 1.0) for s in ss(4, src.num_noises)]
    return {"target": targets.waves, "reference": refs, "noise": noises}, targets.labels


def cmd_synth_data(args, cfg: RunConfig) -> int:
    counts = _parse_counts(args.counts)
    ratios = {k: 1.0 for k in counts}
    if "train" in counts:
        ratios["train"] = 3.0
    eval_splits = tuple(k for k in counts if k != "train")
    sources, labels = _sources(cfg)
    out = _mkdir(args.out)
    manifest = build_dataset(sources, counts, ratios, cfg.seed, out, cfg.dataset_config(), labels, eval_splits)
    manifest.validate()
    _write_sidecar(out / "run_config.json", cfg, "synth-data", {"counts": counts, "checksum": manifest.checksum()})
    print(out)
    return EXIT_OK


def _train_neural(args, cfg: RunConfig, out: Path) -> None:
    manifest = load_manifest(args.data)
    kinds = tuple(args.echo_kinds.split(",")) if args.echo_kinds else None
    items = neural_aec.items_from_manifest(manifest, "train", kinds)
    if not items:
        raise ConfigError("no training examples match the requested echo kinds")
    tcfg = dataclasses.replace(cfg["train"], seed=cfg.seed, specaugment=cfg["specaugment"])
    if args.steps is not None:
        tcfg = dataclasses.replace(tcfg, max_steps=args.steps)
    sched = cfg["loss_schedule"]
    latent_on = not args.no_latent_loss and sched.lambda_final > 0
    frozen = None
    if latent_on:
        if args.proxy is None:
            raise ConfigError("the latent loss needs --proxy (or pass --no-latent-loss)")
        frozen = asr_proxy.load_proxy(args.proxy)
        if frozen.cfg.mel_dim != cfg["model"].mel_dim:
            raise ConfigError("proxy mel_dim differs from the model's")
    if args.no_latent_loss:
        sched = dataclasses.replace(sched, lambda_final=0.0)
    state = None
    if args.resume:
        model, blob, state = neural_aec.load_checkpoint(args.resume, tcfg)
        if state is None:
            raise ConfigError(f"{args.resume} holds no optimizer state to resume from")
        if blob.get("model") != asdict(cfg["model"]):
            raise ConfigError("resume checkpoint model config differs from the run config")
    state = neural_aec.train(
        items, cfg["model"], tcfg, sched, frozen.encode if frozen else None, state, out.with_suffix(".log.jsonl")
    )
    neural_aec.save_checkpoint(
        out,
        state.model,
        {"train": json.loads(json.dumps(asdict(tcfg), default=list)), "loss_schedule": sched,
         "latent_loss": latent_on, "config_hash": cfg.hash()},
        state,
    )


def _train_irm(args, cfg: RunConfig, out: Path) -> None:
    manifest = load_manifest(args.data)
    icfg = dataclasses.replace(
        cfg["irm"], mel_dim=cfg["mel"].num_mels, num_bins=cfg["stft"].num_bins,
        **({"steps": args.steps} if args.steps is not None else {}),
    )
    model, _ = baselines.train_irm_predictor(manifest, icfg, cfg.seed)
    baselines.save_irm_predictor(out, model)


def _train_proxy(args, cfg: RunConfig, out: Path) -> None:
    p = cfg["proxy"]
    train = asr_proxy.make_keyword_corpus(cfg.seed, p.num_classes, p.per_class)
    heldout = asr_proxy.make_keyword_corpus(cfg.seed + 1, p.num_classes, p.heldout_per_class)
    steps = args.steps if args.steps is not None else p.steps
    rec = asr_proxy.train_proxy(train, p.arch, cfg.seed, heldout, cfg["stft"], cfg["mel"], steps=steps)
    log.info("proxy %s held-out accuracy %.3f", p.arch, rec.heldout_accuracy)
    asr_proxy.save_proxy(out, rec)


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _mkdir(out.parent)
    if args.kind in ("neural", "irm") and args.data is None:
        raise ConfigError(f"--data is required for --kind {args.kind}")
    {"neural": _train_neural, "irm": _train_irm, "proxy": _train_proxy}[args.kind](args, cfg, out)
    _write_sidecar(Path(str(out) + ".json"), cfg, "train", {"kind": args.kind})
    print(out)
    return EXIT_OK


def cmd_erase(args, cfg: RunConfig) -> int:
    model, _, _ = neural_aec.load_checkpoint(args.checkpoint)
    probe = read_wav(args.probe, role="probe")
    ref = read_wav(args.reference, role="reference")
    mel = MelConfig(**{**asdict(cfg["mel"]), "num_mels": model.cfg.mel_dim})
    gl_iters = args.gl_iters if args.gl_iters is not None else cfg["eval"].gl_iters
    out_wave = neural_aec.erase(probe, ref, model, cfg["stft"], mel, gl_iters, cfg["mix"].max_lag, not args.no_align)
    out = Path(args.out)
    _mkdir(out.parent)
    write_wav(out, out_wave)
    _write_sidecar(Path(str(out) + ".json"), cfg, "erase", {"checkpoint": str(args.checkpoint)})
    print(out)
    return EXIT_OK


def _parse_pairs(items: Sequence[str], what: str) -> Dict[str, Path]:
    out = {}
    for item in items or ():
        name, _, path = item.partition("=")
        if not name or not path:
            raise ConfigError(f"bad --{what} entry {item!r}; expected NAME=PATH")
        out[name] = Path(path)
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if args.artifacts:
        artifacts = Artifacts.from_json(args.artifacts)
    elif args.dataset:
        artifacts = Artifacts(Path(args.dataset))
    else:
        raise ConfigError("give --artifacts or --dataset")
    artifacts.checkpoints.update(_parse_pairs(args.checkpoint, "checkpoint"))
    artifacts.proxies.update(_parse_pairs(args.proxy, "proxy"))
    matrix = cfg["eval"]
    if args.systems:
        matrix = dataclasses.replace(matrix, systems=tuple(args.systems.split(",")))
    report = run_experiment(matrix, artifacts)
    report.config_hashes["run_config"] = cfg.hash()
    formats = args.format or ["json", "table", "csv"]
    paths = write_report(report, args.out, formats)
    for fmt in formats:
        print(paths[fmt])
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="deskaec", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=1, help="cap on torch intra-op threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="JSON run config (all fields optional)")
        p.add_argument("--seed", type=int, default=None, help="overrides AEC_SEED and the config seed")
        return p

    p = add("simulate", "sample rooms and write both RIRs of each, with JSON sidecars")
    p.add_argument("--rooms", type=int, default=10, help="number of rooms")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = add("synth-data", "synthesize a dataset with stems, feature shards and a manifest")
    p.add_argument("--counts", default="train=320,test=96", help="examples per split; non-train splits are eval splits")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = add("train", "train the neural model, the IRM mask predictor or a proxy recognizer")
    p.add_argument("--kind", choices=("neural", "irm", "proxy"), default="neural", help="what to train")
    p.add_argument("--data", default=None, help="dataset directory (neural, irm)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--proxy", default=None, help="frozen proxy checkpoint for the latent loss")
    p.add_argument("--no-latent-loss", action="store_true", help="force lambda to 0 at every step")
    p.add_argument("--resume", default=None, help="checkpoint to continue training from")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.add_argument("--echo-kinds", default=None, help="comma list of echo kinds to train on (neural)")
    p.set_defaults(func=cmd_train)

    p = add("erase", "run a neural checkpoint on a probe/reference WAV pair")
    p.add_argument("--checkpoint", required=True, help="neural model checkpoint")
    p.add_argument("--probe", required=True, help="microphone WAV")
    p.add_argument("--reference", required=True, help="playback reference WAV")
    p.add_argument("--out", required=True, help="erased WAV to write")
    p.add_argument("--gl-iters", type=int, default=None, help="Griffin-Lim iterations (default: eval.gl_iters)")
    p.add_argument("--no-align", action="store_true", help="skip cross-correlation alignment")
    p.set_defaults(func=cmd_erase)

    p = add("evaluate", "score systems on the TERR grid and write the report")
    p.add_argument("--artifacts", default=None, help="artifact index JSON (dataset, checkpoints, proxies)")
    p.add_argument("--dataset", default=None, help="dataset directory when no index is given")
    p.add_argument("--checkpoint", action="append", help="SYSTEM=PATH, repeatable")
    p.add_argument("--proxy", action="append", help="ARCH=PATH, repeatable")
    p.add_argument("--systems", default=None, help="comma list overriding eval.systems")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--format", action="append", choices=("csv", "json", "table"), help="repeatable; default all")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Diverged as exc:
        print(f"training diverged at step {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
