import pytest
import torch

from deskaec import asr_proxy
from deskaec.data_pipeline import DatasetConfig, build_dataset
from deskaec.signal_core import MelConfig
from deskaec.sources import colored_noise, speech_like

torch.set_num_threads(1)

SMALL_MEL = MelConfig(num_mels=24)


def small_sources(n=9, seed=0):
    kw = asr_proxy.make_keyword_corpus(seed, num_classes=3, per_class=n // 3)
    refs = [speech_like(seed * 100 + i, 1.0) for i in range(n)]
    noises = [colored_noise(seed * 100 + i, 1.0) for i in range(n)]
    return {"target": kw.waves, "reference": refs, "noise": noises}, kw.labels


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 training and 6 test examples at 24 mel channels."""
    sources, labels = small_sources()
    out = tmp_path_factory.mktemp("small_dataset")
    return build_dataset(
        sources,
        {"train": 12, "test": 6},
        {"train": 0.67, "test": 0.33},
        seed=5,
        out_dir=out,
        config=DatasetConfig(mel=SMALL_MEL),
        target_labels=labels,
        eval_splits=("test",),
    )


@pytest.fixture(scope="session")
def desk_proxies(tmp_path_factory):
    """Both proxy recognizers trained under the pinned desk configuration."""
    from deskaec.bundle import DeskConfig, build_proxies

    out = tmp_path_factory.mktemp("desk")
    return out, build_proxies(DeskConfig(), out)


@pytest.fixture(scope="session")
def desk_bundle(desk_proxies):
    """Full pinned-seed desk bundle: dataset, baselines and the neural ladder."""
    from deskaec.bundle import DeskConfig, build_desk_bundle

    out, proxies = desk_proxies
    return build_desk_bundle(out, DeskConfig(), proxies=proxies)


@pytest.fixture(scope="session")
def desk_report(desk_bundle):
    from deskaec.eval_harness import ExperimentMatrix, run_experiment

    return run_experiment(ExperimentMatrix(), desk_bundle)


@pytest.fixture(scope="session")
def neural_overfit(small_dataset):
    """Default-width model trained for 600 steps on the first 8 training examples."""
    from deskaec import neural_aec as na

    items = na.items_from_manifest(small_dataset, "train")[:8]
    return na.train(items, na.ModelConfig(mel_dim=24), na.TrainConfig(max_steps=600, batch_size=8))


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
