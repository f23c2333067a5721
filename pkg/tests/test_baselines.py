import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskaec.baselines import (
    IrmConfig,
    IrmPredictorConfig,
    NlmsConfig,
    apply_mask_erase,
    ideal_ratio_mask,
    irm_training_arrays,
    load_irm_predictor,
    mask_mse,
    nlms_filter_bands,
    oracle_irm_erase,
    predict_mask,
    save_irm_predictor,
    subband_nlms_erase,
    train_irm_predictor,
)
from deskaec.data_pipeline import MixSpec, playback_device, synth_example
from deskaec.errors import MissingStems, RateMismatch, ShapeMismatch
from deskaec.eval_harness import sdr
from deskaec.room_sim import sample_room_config
from deskaec.signal_core import Spectrogram, Waveform, stft
from deskaec.sources import colored_noise, keyword_templates, keyword_token, place_in_silence, speech_like

FS = 16000


def interior_snr(x, y, edge=400):
    a, b = x[edge:-edge].astype(np.float64), y[edge:-edge].astype(np.float64)
    return 10 * np.log10(np.sum(a * a) / (np.sum((a - b) ** 2) + 1e-300))


def linear_echo(seed, seconds=3.0, kind="white"):
    rng = np.random.default_rng(seed)
    n = int(seconds * FS)
    if kind == "white":
        ref = 0.3 * rng.standard_normal(n)
    else:
        ref = speech_like(seed, seconds).samples.astype(np.float64)
    fir = rng.standard_normal(20) * np.exp(-np.arange(20) / 6.0)
    probe = np.convolve(ref, fir)[:n]
    return Waveform(probe, FS), Waveform(ref, FS)


def final_second_erle(probe, erased):
    # last interior second; the final window_len samples are edge-normalized
    n = len(erased) - 400
    p = probe.samples[n - FS : n].astype(np.float64)
    e = erased.samples[n - FS : n].astype(np.float64)
    return 10 * np.log10(np.sum(p * p) / np.sum(e * e))


def double_talk(seed, terr, kind, target="keyword"):
    if target == "keyword":
        tok = keyword_token(seed % 4, seed, keyword_templates(4), level=0.5)
        target = place_in_silence(tok, FS, seed, role="target")
    else:
        target = speech_like(seed + 1000, 1.0, role="target")
    tnr = float(np.random.default_rng([seed, 7]).uniform(0.0, 20.0))
    return synth_example(
        target, speech_like(seed + 50, 1.0), colored_noise(seed + 90, 1.0), sample_room_config(seed),
        MixSpec(tnr, terr), 2.0, seed, echo_kind=kind,
        device=playback_device(100) if kind == "rerecorded" else None,
    )


# -- NLMS ---------------------------------------------------------------------


def test_zero_reference_passes_probe_through():
    probe, _ = linear_echo(0, 1.0)
    erased = subband_nlms_erase(probe, Waveform(np.zeros(len(probe)), FS))
    assert interior_snr(probe.samples[: len(erased)], erased.samples) >= 50


@pytest.mark.parametrize("kind", ["white", "speech"])
def test_linear_echo_erle_after_two_seconds(kind):
    for seed in range(20):
        probe, ref = linear_echo(seed, 3.0, kind)
        erased = subband_nlms_erase(probe, ref)
        assert final_second_erle(probe, erased) >= 20.0, seed


@pytest.mark.parametrize("kind", ["synthetic", "rerecorded"])
def test_double_talk_improves_sdr(kind):
    gains = []
    for seed in range(6):
        ex = double_talk(seed, -10.0, kind)
        w = ex.waveforms
        erased = subband_nlms_erase(w["probe"], w["reference"])
        gains.append(sdr(erased, w["reverberant_target"], 400) - sdr(w["probe"], w["reverberant_target"], 400))
    assert np.mean(gains) > 0


def test_filters_stay_bounded_on_long_runs():
    cfg = NlmsConfig()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t = 1000  # 10 s of frames
        x = rng.standard_normal((t, cfg.stft.num_bins)) + 1j * rng.standard_normal((t, cfg.stft.num_bins))
        x *= rng.uniform(0, 2, (t, 1))
        p = rng.standard_normal((t, cfg.stft.num_bins)) * 3 + 0.5 * x
        mu = float(rng.uniform(0.05, 1.95))
        err, w = nlms_filter_bands(p, x, NlmsConfig(step_size=mu))
        assert np.all(np.isfinite(err)) and np.all(np.isfinite(w))
        assert np.max(np.abs(w)) < 1e3


def test_nlms_is_frequency_local():
    rng = np.random.default_rng(0)
    t, f = 200, 257
    x = rng.standard_normal((t, f)) + 1j * rng.standard_normal((t, f))
    x[:, 40] = 0
    p = 0.7 * x + 0.1 * rng.standard_normal((t, f))
    p[:, 40] = rng.standard_normal(t)
    _, w = nlms_filter_bands(p, x, NlmsConfig())
    assert not np.any(w[40])
    assert np.any(w[41])


def test_nlms_rate_mismatch():
    with pytest.raises(RateMismatch):
        subband_nlms_erase(Waveform(np.ones(1000), FS), Waveform(np.ones(1000), 8000))


# -- IRM ----------------------------------------------------------------------


def spec_of(x):
    return stft(Waveform(x, FS))


def test_irm_limits():
    rng = np.random.default_rng(0)
    s = spec_of(rng.standard_normal(4000))
    zero = Spectrogram(np.zeros_like(s.frames))
    np.testing.assert_allclose(ideal_ratio_mask(s, zero), 1.0, atol=1e-6)
    np.testing.assert_allclose(ideal_ratio_mask(zero, s), 0.0, atol=1e-3)
    np.testing.assert_allclose(ideal_ratio_mask(s, s), np.sqrt(0.5), atol=1e-6)
    with pytest.raises(ShapeMismatch):
        ideal_ratio_mask(s, Spectrogram(s.frames[:-1]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 2))
def test_irm_is_monotone_in_echo(r, e, de, beta):
    cfg = IrmConfig(exponent=beta)
    def m(ev):
        res = Spectrogram(np.full((1, 257), r, complex))
        return ideal_ratio_mask(res, Spectrogram(np.full((1, 257), ev, complex)), cfg)[0, 0]
    assert m(e + de) <= m(e) + 1e-12


def test_mask_erase_identity_and_silence():
    x = Waveform(np.random.default_rng(1).standard_normal(8000), FS)
    t = stft(x).num_frames
    ones = apply_mask_erase(x, np.ones((t, 257)))
    assert interior_snr(x.samples[: len(ones)], ones.samples) >= 50
    assert not np.any(apply_mask_erase(x, np.zeros((t, 257))).samples)
    with pytest.raises(ShapeMismatch):
        apply_mask_erase(x, np.ones((t + 1, 257)))


def test_oracle_irm_gains_10_db_at_minus_10():
    gains = []
    for seed in range(50):
        ex = double_talk(seed, -10.0, "rerecorded" if seed % 2 else "synthetic", target="speech")
        w = ex.waveforms
        erased = oracle_irm_erase(w["probe"], w["residual"], w["echoed_reference"])
        gains.append(sdr(erased, w["residual"], 400) - sdr(w["probe"], w["residual"], 400))
    assert np.mean(gains) >= 10.0


# -- mask predictor -----------------------------------------------------------


def test_overfit_eight_examples(small_dataset):
    cfg = IrmPredictorConfig(mel_dim=24, num_bins=257, steps=1500, batch_frames=256)
    x, y = irm_training_arrays(small_dataset, "train", cfg)
    frames = np.cumsum([0] + [r["num_frames"] for r in small_dataset.split("train")])
    keep = slice(0, frames[8])
    model, losses = train_irm_predictor(small_dataset, cfg, seed=0, arrays=(x[keep], y[keep]))
    assert mask_mse(model, x[keep], y[keep]) <= 0.01


def test_predictor_beats_all_ones_and_stays_in_unit_interval(small_dataset, tmp_path):
    cfg = IrmPredictorConfig(mel_dim=24, num_bins=257, steps=400)
    model, _ = train_irm_predictor(small_dataset, cfg, seed=1)
    x, y = irm_training_arrays(small_dataset, "test", cfg)
    assert mask_mse(model, x, y) < float(np.mean((1.0 - y) ** 2))
    from deskaec.data_pipeline import load_example

    ex = load_example(small_dataset, small_dataset.split("test")[0], with_waveforms=False)
    mask = predict_mask(model, ex.probe_feats, ex.reference_feats)
    assert mask.min() >= 0 and mask.max() <= 1
    save_irm_predictor(tmp_path / "irm.ckpt", model)
    again = load_irm_predictor(tmp_path / "irm.ckpt")
    np.testing.assert_array_equal(predict_mask(again, ex.probe_feats, ex.reference_feats), mask)


def test_predictor_training_is_deterministic(small_dataset):
    cfg = IrmPredictorConfig(mel_dim=24, num_bins=257, steps=30)
    a, la = train_irm_predictor(small_dataset, cfg, seed=3)
    b, lb = train_irm_predictor(small_dataset, cfg, seed=3)
    assert la == lb
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch_equal(p, q)


def torch_equal(a, b):
    return bool((a == b).all())


def test_missing_stems(small_dataset, tmp_path):
    import copy

    m = copy.copy(small_dataset)
    rec = dict(m.records[0])
    rec["paths"] = {k: v for k, v in rec["paths"].items() if k != "residual"}
    m.records = [rec]
    with pytest.raises(MissingStems):
        irm_training_arrays(m, rec["split"], IrmPredictorConfig(mel_dim=24))
