"""Detection and direction finding: gate, energy DOA, noise tracking, beamformer."""

import numpy as np
import pytest

from droneear import doa, simulator as sim
from droneear.calibration import ArrayGeometry
from droneear.frontend import AUDIO_RATE, BIN_WIDTH_HZ, SPECTRUM_BINS

from conftest import render_decimated


def plane_wave_spectra(geometry, az_deg, el_deg=0.0, bins=None, amps=None):
    """Far-field spectra for a unit plane wave: X_i[k] = A_k exp(+j 2 pi f_k (p_i.u)/c).

    Independent of steering_delays on purpose.  A mic toward the source hears
    the wavefront early; under the forward-DFT convention a time advance of a
    multiplies the spectrum by exp(+j 2 pi f a).
    """
    if bins is None:
        bins = np.arange(60, 400)
    if amps is None:
        amps = np.ones(len(bins))
    az = np.radians(az_deg)
    el = np.radians(el_deg)
    u = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    x = np.zeros((geometry.mic_count, SPECTRUM_BINS), dtype=np.complex128)
    freqs = bins * BIN_WIDTH_HZ
    for i, p in enumerate(geometry.mic_positions):
        adv = np.dot(p, u) / geometry.c
        x[i, bins] = amps * np.exp(2j * np.pi * freqs * adv)
    return x


class TestEnergyWindows:
    def test_five_per_second(self, rng):
        samples = rng.standard_normal((3, AUDIO_RATE))
        wins = doa.energy_windows(samples)
        assert len(wins) == 5
        assert doa.WINDOWS_PER_SECOND == 5
        np.testing.assert_allclose([w.t for w in wins], [0.0, 0.2, 0.4, 0.6, 0.8])
        assert [w.index for w in wins] == [0, 1, 2, 3, 4]

    def test_energies_are_sums_of_squares(self, rng):
        samples = rng.standard_normal((3, 2 * doa.WINDOW_LEN))
        wins = doa.energy_windows(samples)
        for j, w in enumerate(wins):
            seg = samples[:, j * doa.WINDOW_LEN:(j + 1) * doa.WINDOW_LEN]
            np.testing.assert_allclose(w.energies, (seg**2).sum(axis=1), rtol=1e-12)

    def test_trailing_partial_dropped(self, rng):
        samples = rng.standard_normal((3, AUDIO_RATE + 100))
        assert len(doa.energy_windows(samples)) == 5

    def test_negative_energy_rejected(self):
        with pytest.raises(ValueError):
            doa.EnergyWindow(energies=np.array([1.0, -1.0, 1.0]), t=0.0)


class TestPowerGate:
    def test_silence_stays_closed(self):
        w = doa.EnergyWindow(energies=np.zeros(3), t=0.0)
        assert doa.power_gate(w, threshold=1e-12) is False

    def test_single_hot_channel_opens(self):
        w = doa.EnergyWindow(energies=np.array([0.0, 0.0, 5.0]), t=0.0)
        assert doa.power_gate(w, threshold=1.0) is True

    def test_gain_compensation(self):
        # channel 0 is loud only because its gain is 2x; compensated it is quiet
        w = doa.EnergyWindow(energies=np.array([4.0, 1.0, 1.0]), t=0.0)
        assert doa.power_gate(w, threshold=2.0) is True
        assert doa.power_gate(w, threshold=2.0, gains=[2.0, 1.0, 1.0]) is False

    def test_nonpositive_threshold_rejected(self):
        w = doa.EnergyWindow(energies=np.ones(3), t=0.0)
        with pytest.raises(ValueError):
            doa.power_gate(w, threshold=0.0)

    def test_separates_scene_from_noise(self, triangle_geom):
        """A loud scene and a noise-only scene split cleanly on one threshold."""
        loud = render_decimated("quad-small", 2.0, seed=11, position=(4.0, 2.0, 0.0),
                                noise_db=-40.0)
        quiet = render_decimated("quad-small", 2.0, seed=12, noise_db=-40.0,
                                 source_db=None)
        loud_w = doa.energy_windows(loud.samples)
        quiet_w = doa.energy_windows(quiet.samples)
        thr = 4.0 * max(w.energies.max() for w in quiet_w)
        assert all(doa.power_gate(w, thr) for w in loud_w)
        assert not any(doa.power_gate(w, thr) for w in quiet_w)


class TestEnergyDoa:
    def test_recovers_grid_point(self, triangle_geom):
        # energies generated by the exact inverse-square law from a grid candidate
        az_true, rad_true = 40.0, float(doa.ENERGY_RANGES[3])
        src = rad_true * np.array([np.cos(np.radians(az_true)),
                                   np.sin(np.radians(az_true)), 0.0])
        r = np.linalg.norm(src - triangle_geom.mic_positions, axis=1)
        w = doa.EnergyWindow(energies=7.3 / r**2, t=0.4)
        est = doa.energy_doa(w, triangle_geom)
        assert est.method == "energy"
        assert est.azimuth_deg == pytest.approx(az_true)
        assert est.ambiguous is False
        assert est.t == 0.4
        np.testing.assert_allclose(est.position_2d, src[:2], atol=1e-9)

    def test_matches_exhaustive_argmin(self, triangle_geom, rng):
        """The packed grid scan must agree with a naive per-candidate loop."""
        for _ in range(10):
            w = doa.EnergyWindow(energies=rng.uniform(0.5, 4.0, size=3), t=0.0)
            est = doa.energy_doa(w, triangle_geom)
            y = np.log(w.energies / triangle_geom.gains**2)
            best_sse, best_az = np.inf, None
            for rad in doa.ENERGY_RANGES:
                for az in np.arange(36) * 10.0:
                    cand = rad * np.array([np.cos(np.radians(az)),
                                           np.sin(np.radians(az)), 0.0])
                    ri = np.linalg.norm(cand - triangle_geom.mic_positions, axis=1)
                    resid = y + 2.0 * np.log(ri)
                    sse = np.var(resid) * 3
                    if sse < best_sse:
                        best_sse, best_az = sse, az
            assert est.azimuth_deg == pytest.approx(best_az)
            assert est.response_power == pytest.approx(-best_sse, rel=1e-9)

    def test_equal_energies_flagged_ambiguous(self, triangle_geom):
        w = doa.EnergyWindow(energies=np.full(3, 2.0), t=0.0)
        assert doa.energy_doa(w, triangle_geom).ambiguous is True

    def test_one_percent_spread_boundary(self, triangle_geom):
        w = doa.EnergyWindow(energies=np.array([1.0, 1.0, 1.02]), t=0.0)
        assert doa.energy_doa(w, triangle_geom).ambiguous is False

    def test_zero_energy_rejected(self, triangle_geom):
        w = doa.EnergyWindow(energies=np.array([1.0, 0.0, 1.0]), t=0.0)
        with pytest.raises(ValueError, match="gate"):
            doa.energy_doa(w, triangle_geom)

    def test_gain_compensation_shifts_estimate(self, triangle_geom):
        """A hot mic must not drag the bearing once its gain is known."""
        az_true, rad_true = 120.0, float(doa.ENERGY_RANGES[2])
        src = rad_true * np.array([np.cos(np.radians(az_true)),
                                   np.sin(np.radians(az_true)), 0.0])
        r = np.linalg.norm(src - triangle_geom.mic_positions, axis=1)
        gains = np.array([1.0, 3.0, 1.0])
        geom = ArrayGeometry(sim.TRIANGLE_ARRAY.copy(), gains=gains)
        w = doa.EnergyWindow(energies=geom.gains**2 / r**2, t=0.0)
        est = doa.energy_doa(w, geom)
        assert est.azimuth_deg == pytest.approx(az_true)


class TestNoiseProfile:
    def test_first_update_copies(self, rng):
        psd = rng.uniform(0.0, 1.0, SPECTRUM_BINS)
        prof = doa.NoiseProfile()
        prof.update(psd)
        np.testing.assert_array_equal(prof.p_nn, psd)
        assert prof.p_nn is not psd
        assert prof.update_count == 1

    def test_second_update_is_exact_ema(self):
        prof = doa.NoiseProfile(lam=0.05)
        a, b = np.ones(SPECTRUM_BINS), 3.0 * np.ones(SPECTRUM_BINS)
        prof.update(a)
        prof.update(b)
        np.testing.assert_allclose(prof.p_nn, 0.95 * a + 0.05 * b, rtol=1e-15)

    def test_converges_within_one_percent(self):
        prof = doa.NoiseProfile(lam=0.05)
        prof.update(np.zeros(SPECTRUM_BINS))
        target = 2.0 * np.ones(SPECTRUM_BINS)
        for _ in range(90):
            prof.update(target)
        # (1 - 0.05)^90 ~ 0.0099, just under the 1% band
        np.testing.assert_allclose(prof.p_nn, target, rtol=0.01)

    def test_gated_on_frame_raises(self):
        prof = doa.NoiseProfile()
        with pytest.raises(doa.GateContractError):
            prof.update(np.ones(SPECTRUM_BINS), gated_on=True)

    def test_functional_wrapper_mutates_and_returns(self):
        prof = doa.NoiseProfile()
        out = doa.update_noise_profile(prof, np.ones(SPECTRUM_BINS))
        assert out is prof
        assert prof.update_count == 1

    def test_bad_psd_rejected(self):
        prof = doa.NoiseProfile()
        with pytest.raises(ValueError):
            prof.update(np.ones(100))
        with pytest.raises(ValueError):
            prof.update(-np.ones(SPECTRUM_BINS))


class TestWienerWeight:
    def test_clean_band_gets_unity(self):
        h = doa.wiener_weight(np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(h, np.ones(4))

    def test_equal_powers_give_half(self):
        h = doa.wiener_weight(np.full(8, 0.3), np.full(8, 0.3))
        np.testing.assert_allclose(h, 0.5, rtol=1e-15)

    def test_three_to_one_gives_three_quarters(self):
        assert doa.wiener_weight(3.0, 1.0) == pytest.approx(0.75)

    def test_empty_bin_gets_zero(self):
        assert doa.wiener_weight(0.0, 0.0) == 0.0

    def test_bounded_on_random_inputs(self, rng):
        p_ss = rng.uniform(0.0, 10.0, 1024)
        p_nn = rng.uniform(0.0, 10.0, 1024)
        h = doa.wiener_weight(p_ss, p_nn)
        assert np.all(h >= 0.0) and np.all(h <= 1.0)
        np.testing.assert_allclose(h, p_ss / (p_ss + p_nn), rtol=1e-12)


class TestEstimateSignalPsd:
    def test_subtracts_and_clamps(self):
        psd = np.array([3.0, 1.0, 0.5])
        p_nn = np.array([1.0, 1.0, 2.0])
        np.testing.assert_array_equal(doa.estimate_signal_psd(psd, p_nn),
                                      [2.0, 0.0, 0.0])


class TestSteeringDelays:
    def test_sign_convention(self):
        # mic on +x hears an az=0 source early; the steering delay is negative
        geom = ArrayGeometry(np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]))
        tau = doa.steering_delays(geom, [0.0, 180.0])
        d = 0.5 / geom.c
        np.testing.assert_allclose(tau[0], [-d, d], rtol=1e-12)
        np.testing.assert_allclose(tau[1], [d, -d], rtol=1e-12)

    def test_elevation_product_shape(self, triangle_geom):
        tau = doa.steering_delays(triangle_geom, np.arange(0, 360, 5.0),
                                  elevations_deg=[-30.0, 0.0, 30.0])
        assert tau.shape == (3 * 72, 3)

    def test_zenith_has_no_azimuth_dependence(self, triangle_geom):
        tau = doa.steering_delays(triangle_geom, [0.0, 90.0, 200.0],
                                  elevations_deg=[90.0])
        np.testing.assert_allclose(tau - tau[0], 0.0, atol=1e-18)


class TestDasBeamformer:
    def test_noiseless_plane_wave(self, triangle_geom):
        est = doa.das_beamform(plane_wave_spectra(triangle_geom, 30.0), triangle_geom)
        assert est.method == "beamformer"
        assert abs(est.azimuth_deg - 30.0) <= 2.0
        assert est.elevation_deg is None
        assert est.ambiguous is False

    def test_sweep_of_bearings(self, triangle_geom):
        for az in [0.0, 77.0, 191.0, 289.0]:
            est = doa.das_beamform(plane_wave_spectra(triangle_geom, az), triangle_geom)
            err = abs((est.azimuth_deg - az + 180.0) % 360.0 - 180.0)
            assert err <= 2.0, f"az {az}: got {est.azimuth_deg}"

    def test_zero_aperture_is_ambiguous(self):
        geom = ArrayGeometry(np.zeros((3, 3)))
        x = np.ones((3, SPECTRUM_BINS), dtype=np.complex128)
        est = doa.das_beamform(x, geom)
        assert est.ambiguous is True

    def test_six_mic_elevation(self):
        geom = ArrayGeometry(sim.SIX_MIC_ARRAY.copy())
        x = plane_wave_spectra(geom, 40.0, el_deg=20.0)
        est = doa.das_beamform(x, geom)
        assert est.elevation_deg is not None
        assert abs(est.azimuth_deg - 40.0) <= 2.0
        assert abs(est.elevation_deg - 20.0) <= 5.0

    def test_response_shapes(self, triangle_geom):
        x = plane_wave_spectra(triangle_geom, 10.0)
        est, resp = doa.das_beamform(x, triangle_geom, return_response=True)
        assert resp.shape == (360,)
        assert resp.max() == pytest.approx(est.response_power)
        geom6 = ArrayGeometry(sim.SIX_MIC_ARRAY.copy())
        _, resp6 = doa.das_beamform(plane_wave_spectra(geom6, 10.0), geom6,
                                    return_response=True)
        assert resp6.shape == (37, 360)

    def test_weight_selects_band(self, triangle_geom):
        """h decides which band drives the scan; zeroing a band mutes its source."""
        a = plane_wave_spectra(triangle_geom, 30.0, bins=np.arange(80, 120))
        b = plane_wave_spectra(triangle_geom, 200.0, bins=np.arange(300, 340),
                               amps=3.0 * np.ones(40))
        x = a + b
        est_all = doa.das_beamform(x, triangle_geom)
        assert abs((est_all.azimuth_deg - 200.0 + 180.0) % 360.0 - 180.0) <= 2.0
        h = np.zeros(SPECTRUM_BINS)
        h[80:120] = 1.0
        est_sel = doa.das_beamform(x, triangle_geom, h=h)
        assert abs(est_sel.azimuth_deg - 30.0) <= 2.0

    def test_gain_equalization(self, triangle_geom):
        """Per-mic gains scale the spectra; the beamformer must undo them."""
        gains = np.array([1.0, 0.5, 2.0])
        geom = ArrayGeometry(sim.TRIANGLE_ARRAY.copy(), gains=gains)
        x = plane_wave_spectra(geom, 135.0) * geom.gains[:, None]
        est = doa.das_beamform(x, geom)
        assert abs(est.azimuth_deg - 135.0) <= 2.0

    def test_bad_inputs(self, triangle_geom):
        with pytest.raises(ValueError):
            doa.das_beamform(np.ones((3, 100), dtype=complex), triangle_geom)
        with pytest.raises(ValueError):
            doa.das_beamform(np.ones((3, SPECTRUM_BINS), dtype=complex), None)

    def test_scan_cadence_matches_windows(self):
        # one DOA per 200 ms window: five per second, by construction
        assert AUDIO_RATE == doa.WINDOW_LEN * 5
