import json
from dataclasses import replace

import numpy as np
import pytest

from modkf.errors import InputTooShortError
from modkf.pipeline import (
    FLAG_NAMES,
    EnhancementReport,
    EnhancerConfig,
    enhance,
    load_config_file,
    log_spectral_distance,
    logmmse_preclean,
    metrics,
    segmental_snr,
)
from modkf.priors import logmmse_gain
from modkf.stft import FramingConfig, analyze, read_wav, synthesize, write_wav
from modkf.update import UpdateVariant

from synth import add_white_noise, utterance

RATE = 8000
CFG = EnhancerConfig.for_rate(RATE)


def _tone(seconds=2.0, lead_in=0.25, freq=440.0):
    t = np.arange(int(RATE * seconds)) / RATE
    return np.where(t >= lead_in, 0.5 * np.sin(2 * np.pi * freq * t), 0.0)


class TestMetrics:
    def test_identity(self):
        x = utterance(0)
        m = metrics(x, x, CFG.framing)
        assert m["seg_snr_db"] == 35.0
        assert m["lsd_db"] == 0.0

    def test_seg_snr_analytic(self):
        # stationary tone plus white noise: every frame has SNR A^2 / (2 sigma^2)
        t = np.arange(16000) / RATE
        x = np.sin(2 * np.pi * 500 * t)
        for sigma2, seed in [(0.05, 0), (0.5, 1), (0.005, 2)]:
            noise = np.random.default_rng(seed).normal(scale=np.sqrt(sigma2), size=x.size)
            expected = 10 * np.log10(0.5 / sigma2)
            assert segmental_snr(x, x + noise, CFG.framing) == pytest.approx(expected, abs=0.5)

    def test_seg_snr_clamps(self):
        x = utterance(1)
        assert segmental_snr(x, -50 * x, CFG.framing) == -10.0

    def test_lsd_symmetric(self):
        x = utterance(2)
        y = add_white_noise(x, 5, 2)
        assert log_spectral_distance(x, y, CFG.framing) == pytest.approx(
            log_spectral_distance(y, x, CFG.framing), abs=1e-12)

    def test_length_mismatch(self):
        x = utterance(3)
        metrics(x, x[:-100], CFG.framing)  # within one frame: truncated
        with pytest.raises(ValueError):
            metrics(x, x[:-1000], CFG.framing)


class TestLogMmsePreclean:
    def _grid(self):
        return analyze(add_white_noise(utterance(4), 5, 4), FramingConfig.from_rate(RATE))

    def test_zero_noise_passes_through(self):
        g = self._grid()
        out = logmmse_preclean(g, np.full(g.amplitude.shape, -np.inf))
        np.testing.assert_array_equal(out, g.amplitude)

    def test_ceiling_and_suppression(self):
        g = self._grid()
        noise = np.log(g.amplitude**2 + 1e-30)  # noise as loud as the signal
        out = logmmse_preclean(g, noise)
        assert np.all(out >= 0)
        assert np.all(out <= g.amplitude * (1 + 1e-12))
        assert np.mean(out[1:] / np.maximum(g.amplitude[1:], 1e-30)) < 1.0

    def test_first_frame_gain(self):
        g = self._grid()
        noise = np.zeros(g.amplitude.shape)
        out = logmmse_preclean(g, noise)
        post = g.amplitude[0] ** 2
        xi = np.maximum(0.98 + 0.02 * np.maximum(post - 1, 0), 10 ** -2.5)
        np.testing.assert_allclose(out[0], logmmse_gain(xi, post) * g.amplitude[0], rtol=1e-12)

    def test_shape_mismatch(self):
        g = self._grid()
        with pytest.raises(ValueError):
            logmmse_preclean(g, np.zeros((2, 2)))


class TestEnhance:
    def test_clean_input_near_pass_through(self):
        x = utterance(5)
        out, report = enhance(x, CFG)
        assert out.shape == x.shape
        assert segmental_snr(x, out, CFG.framing) >= -1.0
        assert np.all(np.isfinite(out))

    def test_tone_in_noise_improves(self):
        x = _tone()
        y = add_white_noise(x, 5, 0)
        out, report = enhance(y, CFG, reference=x)
        assert report.seg_snr_after > report.seg_snr_before
        assert report.lsd_after < report.lsd_before

    def test_phase_tracking_changes_little_amplitude(self):
        y = add_white_noise(utterance(0), 30, 0)
        snt, _ = enhance(y, CFG.with_(variant="snt"))
        _, rep = enhance(y, CFG.with_(variant="snpt"))
        # rebuild the phase-tracking amplitude track with the noisy phase
        L = CFG.framing.acoustic_frame_len
        grid = analyze(np.pad(y, L, mode="reflect"), replace(CFG.framing, pad=False))
        swapped = synthesize(grid, rep.s_post, grid.phase)[L : L + y.size]
        assert log_spectral_distance(snt, swapped, CFG.framing) < 0.5

    def test_uncoupled_noise_tracking_reduces_to_speech_tracking(self):
        y = add_white_noise(utterance(1), 10, 1)
        _, st = enhance(y, CFG)
        _, snt = enhance(y, CFG.with_(variant="snt", noise_coupling=False))
        np.testing.assert_allclose(snt.s_post, st.s_post, atol=1e-6)

    def test_output_phase_is_noisy_phase_without_tracking(self):
        y = add_white_noise(utterance(2), 10, 2)
        out, rep = enhance(y, CFG.with_(variant="snt"))
        L = CFG.framing.acoustic_frame_len
        grid = analyze(np.pad(y, L, mode="reflect"), replace(CFG.framing, pad=False))
        np.testing.assert_allclose(out, synthesize(grid, rep.s_post, grid.phase)[L : L + y.size], atol=1e-12)
        assert rep.phase_magnitude is None

    @pytest.mark.parametrize("variant", [v.value for v in UpdateVariant])
    def test_every_variant_finite(self, variant):
        y = add_white_noise(utterance(3), 0, 3)
        out, rep = enhance(y, CFG.with_(variant=variant))
        assert np.all(np.isfinite(out))
        assert all(v >= 0 for v in rep.flags.values())
        assert set(rep.flags) == set(FLAG_NAMES)

    def test_deterministic_bytes(self, tmp_path):
        y = add_white_noise(utterance(6), 5, 6)
        a, _ = enhance(y, CFG.with_(variant="snpt"))
        b, _ = enhance(y, CFG.with_(variant="snpt"))
        write_wav(tmp_path / "a.wav", a, RATE)
        write_wav(tmp_path / "b.wav", b, RATE)
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    def test_global_prior_shifts_result(self):
        from modkf.priors import train_global_prior
        prior = train_global_prior([utterance(s) for s in range(10, 13)], CFG.framing)
        y = add_white_noise(utterance(7), 5, 7)
        plain, _ = enhance(y, CFG)
        with_prior, _ = enhance(y, CFG, global_prior=prior)
        assert np.all(np.isfinite(with_prior))
        assert not np.array_equal(plain, with_prior)
        off, _ = enhance(y, CFG.with_(prior_scale=0.0), global_prior=prior)
        np.testing.assert_array_equal(off, plain)

    def test_prior_mismatch_rejected(self):
        from modkf.priors import GlobalSpeechPrior
        bad = GlobalSpeechPrior(np.zeros(65), np.ones(65), RATE, 128)
        with pytest.raises(ValueError):
            enhance(utterance(0), CFG, global_prior=bad)

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            enhance(np.zeros(100), CFG)
        with pytest.raises(InputTooShortError):
            enhance(np.zeros((2, 4000)), CFG)

    def test_plugins(self):
        y = add_white_noise(utterance(8), 5, 8)
        seen = {}

        def amp(grid, noise):
            seen["noise_shape"] = noise.shape
            return grid.amplitude

        out, _ = enhance(y, CFG.with_(amp_precleaner=amp, phase_precleaner=lambda g: g.phase))
        ref, _ = enhance(y, CFG.with_(amp_precleaner="none"))
        np.testing.assert_array_equal(out, ref)
        assert len(seen["noise_shape"]) == 2

    def test_two_iterations_runs(self):
        y = add_white_noise(utterance(9), 5, 9)
        a, _ = enhance(y, CFG)
        b, _ = enhance(y, CFG.with_(iterations=2))
        assert np.all(np.isfinite(b)) and not np.array_equal(a, b)


class TestReport:
    def _report(self, name, n, flags):
        r = EnhancementReport(name, n, 3)
        for k, v in flags.items():
            r.flags[k] = v
        return r

    def test_merge_associative(self):
        a = self._report("st", 3, {"underflow": 1})
        b = self._report("st", 4, {"psd_repair": 2})
        c = self._report("snt", 5, {"underflow": 7})
        left = a.merge(b).merge(c)
        right = a.merge(b.merge(c))
        assert left.flags == right.flags
        assert left.n_frames == right.n_frames == 12
        assert left.variant == right.variant == "mixed"
        assert left.total_flags == 10

    def test_jsonl_and_tracks(self, tmp_path):
        y = add_white_noise(utterance(0), 5, 0)
        _, rep = enhance(y, CFG.with_(variant="snpt"), reference=utterance(0))
        rep.write_jsonl(tmp_path / "r.jsonl")
        lines = [json.loads(s) for s in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert lines[0]["type"] == "summary" and lines[0]["seg_snr_after"] is not None
        assert len(lines) == 1 + rep.n_frames
        files = rep.write_tracks(tmp_path / "tracks")
        assert len(files) == rep.n_bins
        table = np.loadtxt(files[5], delimiter=",", skiprows=1)
        np.testing.assert_allclose(table[:, 2], rep.s_post[:, 5], rtol=1e-8)
        assert np.all((table[:, 4] >= 0) & (table[:, 4] <= 1))


class TestConfig:
    def test_defaults(self):
        assert (CFG.p, CFG.q, CFG.sigma_R, CFG.variant) == (2, 2, 3, UpdateVariant.ST)
        assert CFG.framing.fft_size == 256

    @pytest.mark.parametrize("bad", [
        {"p": 0}, {"q": 0}, {"iterations": 3}, {"prior_scale": -1.0}, {"sigma_R": 0},
        {"amp_precleaner": "wiener"}, {"noise_snr": "x"},
        {"variant": "snpt", "integration": "segment"},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            CFG.with_(**bad)

    def test_from_file(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('variant = "snt"\nq = 3\nhop_ms = 4.0\n')
        cfg = EnhancerConfig.from_mapping(load_config_file(path), 16000)
        assert cfg.variant is UpdateVariant.SNT and cfg.q == 3
        assert cfg.framing.acoustic_hop == 64

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ValueError):
            EnhancerConfig.from_mapping({"bogus": 1}, RATE)
        path = tmp_path / "n.toml"
        path.write_text("[table]\nx = 1\n")
        with pytest.raises(ValueError):
            load_config_file(path)
