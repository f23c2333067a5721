import numpy as np
import pytest
import torch

from deskaec import asr_proxy
from deskaec.bundle import DeskConfig
from deskaec.data_pipeline import load_example
from deskaec.errors import ConfigError, CorruptCheckpoint, ShapeMismatch
from deskaec.signal_core import MelConfig, wave_to_log_mel

DESK = DeskConfig()
MEL = DESK.mel


@pytest.fixture(scope="module")
def proxies(desk_proxies):
    _, paths = desk_proxies
    return {arch: asr_proxy.load_proxy(p) for arch, p in paths.items()}


@pytest.fixture(scope="module")
def heldout():
    # same seed offset the desk bundle uses for its held-out corpus
    return asr_proxy.make_keyword_corpus(DESK.seed + 1, DESK.num_classes, DESK.proxy_heldout_per_class)


def test_corpus_bookkeeping_and_determinism():
    c = asr_proxy.make_keyword_corpus(3, 10, 50)
    assert len(c) == 500
    assert np.all(np.bincount(c.labels) == 50)
    assert c.checksum() == asr_proxy.make_keyword_corpus(3, 10, 50).checksum()
    assert c.checksum() != asr_proxy.make_keyword_corpus(4, 10, 50).checksum()
    for w in c.waves[:20]:
        assert np.all(np.isfinite(w.samples)) and len(w) == 16000
    with pytest.raises(ConfigError):
        asr_proxy.make_keyword_corpus(0, 1, 5)


def _segment_means(frames):
    """Log-mel means over thirds of the active region, level removed."""
    energy = frames.max(axis=1)
    active = frames[energy > energy.max() - 10.0]
    v = np.concatenate([part.mean(axis=0) for part in np.array_split(active, 3)])
    return v - v.mean()


def test_nearest_template_oracle_separates_classes():
    """Class centroids of clean log-mel segment means classify unseen tokens."""
    mel = MelConfig(num_mels=40)
    train = asr_proxy.make_keyword_corpus(10, 10, 20)
    test = asr_proxy.make_keyword_corpus(11, 10, 10)
    feats = lambda c: np.stack([_segment_means(wave_to_log_mel(w, mel=mel).frames) for w in c.waves])
    xtr, xte = feats(train), feats(test)
    cent = np.stack([xtr[train.labels == k].mean(axis=0) for k in range(10)])
    pred = np.argmin(((xte[:, None, :] - cent[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == test.labels) >= 0.8


@pytest.mark.parametrize("arch", ["A", "B"])
def test_latents_keep_frame_count(arch):
    rec = asr_proxy.ProxyRecognizer(asr_proxy.default_proxy_config(arch, 4, 16))
    for t in (1, 9, 101):
        assert rec.encode(torch.zeros(2, t, 16)).shape[:2] == (2, t)
    with pytest.raises(ShapeMismatch):
        rec.encode(torch.zeros(2, 9, 15))


@pytest.mark.parametrize("arch", ["A", "B"])
def test_heldout_accuracy(proxies, heldout, arch):
    rec = proxies[arch]
    assert rec.frozen
    assert rec.heldout_accuracy >= 0.95
    err = asr_proxy.proxy_error_rate(heldout.features(mel_cfg=MEL), heldout.labels, rec)
    assert err <= 0.05


def test_architectures_produce_different_latents(proxies, heldout):
    x = torch.from_numpy(heldout.features(mel_cfg=MEL)[:1])
    za, zb = proxies["A"].encode(x), proxies["B"].encode(x)
    assert za.shape[:2] == zb.shape[:2]
    assert not torch.equal(za, zb)


def test_permuted_labels_give_chance_error(proxies, heldout):
    feats = heldout.features(mel_cfg=MEL)
    rng = np.random.default_rng(0)
    errs = [asr_proxy.proxy_error_rate(feats, rng.permutation(heldout.labels), proxies["A"]) for _ in range(20)]
    assert abs(np.mean(errs) - 0.9) <= 0.03


@pytest.mark.parametrize("arch", ["A", "B"])
def test_prediction_invariant_to_uniform_gain(proxies, heldout, arch):
    rec = proxies[arch]
    base = asr_proxy.predict(heldout.waves, rec, mel_cfg=MEL)
    for g in (0.5, 0.8, 1.3, 2.0):
        scaled = [w.with_samples(w.samples * g) for w in heldout.waves]
        assert np.mean(asr_proxy.predict(scaled, rec, mel_cfg=MEL) == base) >= 0.95


def test_probe_at_minus_10_is_harder_than_clean(proxies, desk_bundle):
    from deskaec.data_pipeline import load_manifest

    manifest = load_manifest(desk_bundle.dataset)
    recs = [r for r in manifest.split("test") if r["terr_db"] == -10.0]
    exs = [load_example(manifest, r, with_waveforms=False) for r in recs]
    labels = [r["label"] for r in recs]
    for rec in proxies.values():
        probe = asr_proxy.proxy_error_rate([e.probe_feats for e in exs], labels, rec)
        clean = asr_proxy.proxy_error_rate([e.target_feats for e in exs], labels, rec)
        assert probe > clean


def test_latent_mse_basic(proxies):
    a = np.random.default_rng(0).normal(-5, 2, (30, 40)).astype(np.float32)
    b = a + 0.5
    assert asr_proxy.latent_mse(a, a, proxies["A"]) == 0.0
    assert asr_proxy.latent_mse(a, b, proxies["B"]) == pytest.approx(asr_proxy.latent_mse(b, a, proxies["B"]))
    with pytest.raises(ShapeMismatch):
        asr_proxy.latent_mse(a, a[:10], proxies["A"])


def test_error_rate_needs_one_label_per_input(proxies, heldout):
    with pytest.raises(ShapeMismatch):
        asr_proxy.proxy_error_rate(heldout.features(mel_cfg=MEL)[:5], heldout.labels[:4], proxies["A"])


def test_save_load_round_trip(proxies, tmp_path):
    rec = proxies["B"]
    asr_proxy.save_proxy(tmp_path / "b.ckpt", rec)
    again = asr_proxy.load_proxy(tmp_path / "b.ckpt")
    asr_proxy.save_proxy(tmp_path / "c.ckpt", again)
    assert (tmp_path / "b.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()
    assert again.frozen and again.heldout_accuracy == rec.heldout_accuracy
    raw = (tmp_path / "b.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NAEC" + raw[4:])
    with pytest.raises(CorruptCheckpoint):
        asr_proxy.load_proxy(tmp_path / "bad.ckpt")


def test_training_is_deterministic_and_freezes():
    c = asr_proxy.make_keyword_corpus(0, 3, 4)
    mel = MelConfig(num_mels=16)
    a = asr_proxy.train_proxy(c, "A", 1, mel_cfg=mel, steps=5, augment_copies=1)
    b = asr_proxy.train_proxy(c, "A", 1, mel_cfg=mel, steps=5, augment_copies=1)
    for p, q in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(p, q)
    assert a.frozen and all(not p.requires_grad for p in a.parameters())
