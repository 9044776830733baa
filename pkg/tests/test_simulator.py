"""Scene synthesis: source spectra, propagation physics, config parsing."""

import numpy as np
import pytest

from droneear import frontend as fe, simulator as sim
from droneear.frontend import AUDIO_RATE, BIN_WIDTH_HZ


def psd_of(signal, n_frames=8):
    frames = signal[: n_frames * 2048].reshape(n_frames, 2048)
    acc = np.zeros(1024)
    for f in frames:
        psd, _ = fe.compute_spectrum(f)
        acc += psd
    return acc / n_frames


def peak_lag(a, b, max_lag):
    """Integer argmax of the cross-correlation, by direct search."""
    lags = np.arange(-max_lag, max_lag + 1)
    vals = [np.dot(a[max(0, -l):len(a) - max(0, l)],
                   b[max(0, l):len(b) - max(0, -l)]) for l in lags]
    return int(lags[int(np.argmax(vals))])


class TestSynthSource:
    def test_unit_rms(self):
        for name, spec in sim.PRESETS.items():
            s = sim.synth_source(spec, 1.0, seed=3)
            assert np.sqrt(np.mean(s**2)) == pytest.approx(1.0, rel=1e-9), name

    def test_pure_tone_lands_on_its_bin(self):
        f0 = 100 * BIN_WIDTH_HZ
        spec = sim.SourceSpectrumSpec(fundamental=f0, harmonic_count=1,
                                      broadband_level=-200.0, band_extent=100.0)
        psd = psd_of(sim.synth_source(spec, 1.0, seed=0))
        assert int(np.argmax(psd)) == 100

    def test_rolloff_slope(self):
        # bin-centered fundamental keeps harmonics leakage-free; the comb
        # should drop by harmonic_rolloff dB per octave of harmonic number
        f0 = 50 * BIN_WIDTH_HZ
        spec = sim.SourceSpectrumSpec(fundamental=f0, harmonic_count=8,
                                      harmonic_rolloff=9.0,
                                      broadband_level=-200.0, band_extent=100.0)
        psd = psd_of(sim.synth_source(spec, 2.0, seed=1), n_frames=16)
        p1, p2, p4 = psd[50], psd[100], psd[200]
        assert 10 * np.log10(p1 / p2) == pytest.approx(9.0, abs=1.0)
        assert 10 * np.log10(p2 / p4) == pytest.approx(9.0, abs=1.0)

    def test_harmonics_above_nyquist_dropped(self):
        spec = sim.SourceSpectrumSpec(fundamental=6000.0, harmonic_count=10,
                                      broadband_level=-200.0, band_extent=100.0)
        s = sim.synth_source(spec, 1.0, seed=2)
        psd = psd_of(s)
        k0 = int(round(6000.0 / BIN_WIDTH_HZ))
        alias = int(round((AUDIO_RATE - 12000.0) / BIN_WIDTH_HZ))
        assert psd[alias] < 1e-9 * psd[k0]

    def test_broadband_extent_and_level(self):
        spec = sim.SourceSpectrumSpec(fundamental=200.0, harmonic_count=1,
                                      broadband_level=-6.0, band_extent=4000.0)
        psd = psd_of(sim.synth_source(spec, 2.0, seed=4), n_frames=16)
        k_edge = int(round(4000.0 / BIN_WIDTH_HZ))
        in_band = psd[50:k_edge - 10].mean()
        out_band = psd[k_edge + 10:900].mean()
        assert in_band > 100 * out_band

    def test_seed_determinism(self):
        spec = sim.PRESETS["quad-mid"]
        a = sim.synth_source(spec, 0.5, seed=9)
        b = sim.synth_source(spec, 0.5, seed=9)
        c = sim.synth_source(spec, 0.5, seed=10)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_band_beyond_nyquist_rejected(self):
        with pytest.raises(ValueError):
            sim.SourceSpectrumSpec(fundamental=100.0, band_extent=20000.0)


class TestPropagate:
    def test_inverse_distance_and_delay(self):
        """Doubling the range halves the amplitude and shifts by r/c exactly."""
        src = sim.synth_source(sim.PRESETS["quad-mid"], 1.0, seed=5)
        # radii chosen so the absolute delays are integer sample counts
        r1 = 343.0 * 64 / AUDIO_RATE
        r2 = 343.0 * 128 / AUDIO_RATE
        mics = np.array([[0.0, 0.0, 0.0]])
        y1 = sim.propagate(src, np.array([[r1, 0.0, 0.0]]), mics)[0]
        y2 = sim.propagate(src, np.array([[r2, 0.0, 0.0]]), mics)[0]
        seg = slice(400, 20000)
        np.testing.assert_allclose(y2[seg.start + 64:seg.stop + 64] * (r2 / r1),
                                   y1[seg], rtol=0.0, atol=2e-6)

    def test_pairwise_lags_close_the_loop(self, triangle_geom):
        src = sim.synth_source(sim.PRESETS["quad-small"], 1.0, seed=6)
        pos = np.array([[2.0, 1.5, 0.0]])
        y = sim.propagate(src, pos, triangle_geom.mic_positions)
        r = np.linalg.norm(pos[0] - triangle_geom.mic_positions, axis=1)
        lags = {}
        for i, j in [(0, 1), (1, 2), (0, 2)]:
            lag = peak_lag(y[i][1000:15000], y[j][1000:15000], 40)
            pred = (r[j] - r[i]) / 343.0 * AUDIO_RATE
            assert abs(lag - pred) <= 1.0, (i, j)
            lags[(i, j)] = lag
        assert lags[(0, 1)] + lags[(1, 2)] == lags[(0, 2)]

    def test_per_mic_gains(self):
        src = sim.synth_source(sim.PRESETS["quad-mid"], 0.3, seed=7)
        mics = np.zeros((2, 3))
        y = sim.propagate(src, np.array([[3.0, 0.0, 0.0]]), mics,
                          gains=np.array([1.0, 2.0]))
        np.testing.assert_allclose(y[1], 2.0 * y[0], rtol=1e-12)

    def test_inside_one_meter_amplitude_clamped(self):
        # constant-envelope source so a pure delay cannot move the RMS
        n = np.arange(6000)
        src = np.sin(2 * np.pi * 1000.0 / AUDIO_RATE * n)
        mics = np.zeros((1, 3))
        near = sim.propagate(src, np.array([[0.2, 0.0, 0.0]]), mics)[0]
        far = sim.propagate(src, np.array([[1.0, 0.0, 0.0]]), mics)[0]
        # both divide by max(r, 1) = 1; only the delay differs.  tolerance is
        # the fractional-delay filter's passband ripple (~3e-4), which depends
        # on the fractional part of each delay
        rms = lambda x: np.sqrt(np.mean(x[500:5500] ** 2))
        assert rms(near) == pytest.approx(rms(far), rel=1e-3)

    def test_trajectory_held_per_segment(self):
        src = sim.synth_source(sim.PRESETS["quad-mid"], 0.4, seed=9)
        mics = np.zeros((1, 3))
        traj = np.array([[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
        y = sim.propagate(src, traj, mics)[0]
        first = np.sqrt(np.mean(y[500:3500] ** 2))
        second = np.sqrt(np.mean(y[sim.SEGMENT_LEN + 500:sim.SEGMENT_LEN + 3500] ** 2))
        assert first / second == pytest.approx(2.0, rel=0.05)


class TestRenderScene:
    def test_truth_record(self):
        cfg = sim.SceneConfig(source=sim.PRESETS["quad-mid"],
                              trajectory=np.array([[5.0, 5.0, 0.0]]),
                              noise_db=-30.0, duration=1.0, seed=4,
                              preset_name="quad-mid")
        render = sim.render_scene(cfg)
        assert render.audio.shape == (3, AUDIO_RATE)
        t = render.truth
        assert t["preset"] == "quad-mid"
        assert t["seed"] == 4
        n_seg = (AUDIO_RATE + sim.SEGMENT_LEN - 1) // sim.SEGMENT_LEN
        assert len(t["segment_positions"]) == n_seg
        assert t["segment_azimuth_deg"][0] == pytest.approx(45.0)

    def test_noise_only_scene(self):
        cfg = sim.SceneConfig(source=sim.PRESETS["quad-mid"],
                              trajectory=np.array([[5.0, 0.0, 0.0]]),
                              source_db=None, noise_db=-20.0, duration=0.5, seed=1)
        audio = sim.render_scene(cfg).audio
        assert np.std(audio) == pytest.approx(0.1, rel=0.02)

    def test_silent_scene_is_zeros(self):
        cfg = sim.SceneConfig(source=sim.PRESETS["quad-mid"],
                              trajectory=np.array([[5.0, 0.0, 0.0]]),
                              source_db=None, noise_db=None, duration=0.2, seed=1)
        assert not sim.render_scene(cfg).audio.any()

    def test_render_determinism(self):
        cfg = sim.SceneConfig(source=sim.PRESETS["quad-small"],
                              trajectory=np.array([[4.0, 1.0, 0.0]]),
                              noise_db=-25.0, duration=0.4, seed=11)
        a = sim.render_scene(cfg).audio
        b = sim.render_scene(cfg).audio
        np.testing.assert_array_equal(a, b)

    def test_adc_path_determinism(self):
        cfg = sim.SceneConfig(source=sim.PRESETS["quad-small"],
                              trajectory=np.array([[4.0, 1.0, 0.0]]),
                              noise_db=-25.0, duration=0.3, seed=11)
        render = sim.render_scene(cfg)
        a = sim.render_to_adc(render)
        b = sim.render_to_adc(render)
        np.testing.assert_array_equal(a.codes, b.codes)
        assert a.sample_rate == 64 * AUDIO_RATE


class TestParseSceneConfig:
    def test_full_example(self):
        text = """
        # drone pass, custom array
        preset = quad-small
        mics = 0,0.3,0 ; -0.25,-0.15,0 ; 0.25,-0.15,0
        gains = 1.0, 0.5, 2.0
        trajectory = 5,0,0 ; 5,1,0
        noise_db = -35
        duration = 2.5
        seed = 42
        """
        cfg = sim.parse_scene_config(text)
        assert cfg.preset_name == "quad-small"
        assert cfg.source.fundamental == 220.0
        assert cfg.trajectory.shape == (2, 3)
        assert cfg.mic_positions.shape == (3, 3)
        np.testing.assert_allclose(cfg.gains, [1.0, 0.5, 2.0])
        assert cfg.noise_db == -35.0
        assert cfg.duration == 2.5
        assert cfg.seed == 42

    def test_custom_spectrum(self):
        cfg = sim.parse_scene_config(
            "fundamental = 150\nharmonics = 5\nrolloff_db = 4\nsource_pos = 3,0,0\n")
        assert cfg.source.fundamental == 150.0
        assert cfg.source.harmonic_count == 5
        assert cfg.source.harmonic_rolloff == 4.0
        assert cfg.trajectory.shape == (1, 3)
        assert cfg.noise_db is None

    def test_muted_source(self):
        cfg = sim.parse_scene_config("source_db = none\nsource_pos = 1,0,0\nnoise_db = -30\n")
        assert cfg.source_db is None

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            sim.parse_scene_config("preset = hexacopter\nsource_pos = 1,0,0\n")
        with pytest.raises(ValueError):
            sim.parse_scene_config("preset = quad-mid\n")   # no position
        with pytest.raises(ValueError):
            sim.parse_scene_config("just some words\n")


class TestPulseScene:
    def test_segments_and_truth(self, triangle_geom):
        pos = sim.endfire_ring_positions(triangle_geom.mic_positions, min_count=10)
        rec = sim.pulse_scene(pos, triangle_geom.mic_positions, seed=3)
        assert len(rec.pulses) == 10
        assert all(p.shape[0] == 3 for p in rec.pulses)
        assert rec.sample_rate == AUDIO_RATE

    def test_rejects_bad_ranges(self, triangle_geom):
        with pytest.raises(sim.SceneError):
            sim.pulse_scene(np.array([[0.1, 0.0, 0.0]]), triangle_geom.mic_positions)
        with pytest.raises(sim.SceneError):
            sim.pulse_scene(np.array([[8.0, 0.0, 0.0]]), triangle_geom.mic_positions)

    def test_rejects_duplicates(self, triangle_geom):
        pos = np.array([[2.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        with pytest.raises(sim.SceneError):
            sim.pulse_scene(pos, triangle_geom.mic_positions)


class TestEndfireRing:
    def test_covers_every_pair_line(self, triangle_geom):
        mics = triangle_geom.mic_positions
        pos = sim.endfire_ring_positions(mics, radius=2.0, min_count=10)
        assert pos.shape[0] >= 10
        np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 2.0, rtol=1e-9)
        # at least two positions land on each pair's extended line
        for i, j in [(0, 1), (0, 2), (1, 2)]:
            axis = mics[j] - mics[i]
            axis /= np.linalg.norm(axis)
            rel = pos - mics[i]
            along = rel @ axis
            off = np.linalg.norm(rel - np.outer(along, axis), axis=1)
            assert (off < 1e-6).sum() >= 2, (i, j)
