"""Detection gate and direction-of-arrival estimation.

Per-channel signal energy is measured on 200 ms windows (4375 samples, five
per second).  A gain-compensated power gate decides activity.  Active
windows get a coarse bearing from the energy pattern alone (inverse-square
least squares over a polar grid — one consistent reading of an energy-only
method; the mapping itself is an interpretation).  A frequency-domain
delay-and-sum beamformer refines the bearing on the nearest spectral frame,
with per-bin weights h = P_ss/(P_ss + P_nn) so bins drowned in background
noise stop voting.

Azimuth convention: degrees counterclockwise from the +x axis, in [0, 360).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .calibration import ArrayGeometry
from .frontend import AUDIO_RATE, BIN_WIDTH_HZ, SPECTRUM_BINS

WINDOW_LEN = 4375               # 200 ms at 21875 Hz; exactly 5 per second
WINDOWS_PER_SECOND = AUDIO_RATE // WINDOW_LEN
DEFAULT_NOISE_LAMBDA = 0.05
ENERGY_AZIMUTHS = 36
ENERGY_RANGES = np.geomspace(0.5, 50.0, 8)
BIN_FREQS = np.arange(SPECTRUM_BINS) * BIN_WIDTH_HZ


class GateContractError(ValueError):
    """Noise profile fed an active frame; that would poison the noise floor."""


@dataclass(frozen=True)
class EnergyWindow:
    """Per-channel energy of one 200 ms stretch of the stream."""

    energies: np.ndarray        # (M,) sum of squared samples
    t: float                    # window start, seconds from stream start
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "energies", np.asarray(self.energies, dtype=np.float64))
        if np.any(self.energies < 0):
            raise ValueError("energies must be non-negative")


@dataclass(frozen=True)
class DoaEstimate:
    azimuth_deg: float
    response_power: float
    method: str                 # "energy" | "beamformer"
    elevation_deg: float | None = None
    position_2d: tuple | None = None
    ambiguous: bool = False
    t: float | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "t": self.t,
            "method": self.method,
            "azimuth_deg": round(self.azimuth_deg, 3),
            "response_power": self.response_power,
            "ambiguous": self.ambiguous,
        }
        if self.elevation_deg is not None:
            doc["elevation_deg"] = round(self.elevation_deg, 3)
        if self.position_2d is not None:
            doc["position_2d"] = [round(v, 4) for v in self.position_2d]
        return doc


def energy_windows(samples, sample_rate: int = AUDIO_RATE):
    """Chop a (channels, n) stream into EnergyWindows; a trailing partial is dropped."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    count = x.shape[1] // WINDOW_LEN
    out = []
    for w in range(count):
        seg = x[:, w * WINDOW_LEN:(w + 1) * WINDOW_LEN]
        out.append(EnergyWindow(np.sum(seg**2, axis=1), t=w * WINDOW_LEN / sample_rate, index=w))
    return out


def power_gate(window: EnergyWindow, threshold: float, gains=None) -> bool:
    """True when any channel's gain-compensated energy exceeds the threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    e = window.energies
    if gains is not None:
        e = e / np.asarray(gains, dtype=np.float64) ** 2
    return bool(e.max() > threshold)


def energy_doa(window: EnergyWindow, geometry: ArrayGeometry,
               azimuths: int = ENERGY_AZIMUTHS, ranges=ENERGY_RANGES) -> DoaEstimate:
    """Bearing from the energy pattern alone, via inverse-square fitting.

    Each polar-grid candidate x predicts log energies log S - 2 log r_i(x)
    + 2 log g_i; the unknown source level S is profiled out in closed form
    (it only shifts the mean), leaving the variance of the mismatch as the
    residual.  The reported azimuth is the argmin's; response_power is the
    negative residual so "bigger is better" like the beamformer.

    A near-equal energy pattern (all within 1%) carries no direction; the
    estimate is then flagged ambiguous, not an error.
    """
    e = window.energies / geometry.gains**2
    if np.any(e <= 0):
        raise ValueError("energy DOA needs strictly positive energies; gate first")
    y = np.log(e)
    mics = geometry.mic_positions
    az_grid = np.arange(azimuths) * (360.0 / azimuths)
    phi = np.radians(az_grid)
    best = (np.inf, 0.0, (0.0, 0.0))
    for rad in np.asarray(ranges, dtype=np.float64):
        cand = np.stack([rad * np.cos(phi), rad * np.sin(phi), np.zeros_like(phi)], axis=1)
        diff = cand[:, None, :] - mics[None, :, :]          # (A, M, 3)
        r = np.sqrt((diff**2).sum(-1))
        model = -2.0 * np.log(r)
        resid = y[None, :] - model
        sse = np.var(resid, axis=1) * mics.shape[0]         # profiled-S residual
        k = int(np.argmin(sse))
        if sse[k] < best[0]:
            best = (float(sse[k]), float(az_grid[k]), (float(cand[k, 0]), float(cand[k, 1])))
    spread = (e.max() - e.min()) / e.max()
    return DoaEstimate(
        azimuth_deg=best[1],
        response_power=-best[0],
        method="energy",
        position_2d=best[2],
        ambiguous=bool(spread < 0.01),
        t=window.t,
    )


@dataclass
class NoiseProfile:
    """Exponential running estimate of the background-noise PSD.

    Only below-threshold frames may update it; feeding an active frame is a
    contract violation because the signal would bleed into the noise floor.
    """

    lam: float = DEFAULT_NOISE_LAMBDA
    p_nn: np.ndarray = field(default_factory=lambda: np.zeros(SPECTRUM_BINS))
    update_count: int = 0

    def update(self, psd, gated_on: bool = False) -> None:
        if gated_on:
            raise GateContractError("noise profile updated with an active (gated-on) frame")
        psd = np.asarray(psd, dtype=np.float64)
        if psd.shape != (SPECTRUM_BINS,):
            raise ValueError(f"psd must have {SPECTRUM_BINS} bins")
        if np.any(psd < 0):
            raise ValueError("psd bins must be non-negative")
        if self.update_count == 0:
            self.p_nn = psd.copy()
        else:
            self.p_nn = (1.0 - self.lam) * self.p_nn + self.lam * psd
        self.update_count += 1


def update_noise_profile(profile: NoiseProfile, psd, gated_on: bool = False) -> NoiseProfile:
    """Functional wrapper around NoiseProfile.update (mutates and returns it)."""
    profile.update(psd, gated_on=gated_on)
    return profile


def estimate_signal_psd(psd, p_nn):
    """Spectral subtraction: P_ss = max(psd - p_nn, 0) per bin."""
    psd = np.asarray(psd, dtype=np.float64)
    p_nn = np.asarray(p_nn, dtype=np.float64)
    return np.maximum(psd - p_nn, 0.0)


def wiener_weight(p_ss, p_nn):
    """Per-bin weight h = P_ss/(P_ss + P_nn), with 0/0 -> 0."""
    p_ss = np.asarray(p_ss, dtype=np.float64)
    p_nn = np.asarray(p_nn, dtype=np.float64)
    if np.any(p_ss < 0) or np.any(p_nn < 0):
        raise ValueError("spectral densities must be non-negative")
    total = p_ss + p_nn
    with np.errstate(invalid="ignore"):
        h = np.where(total > 0, p_ss / np.where(total > 0, total, 1.0), 0.0)
    return h


def steering_delays(geometry: ArrayGeometry, azimuths_deg, elevations_deg=None):
    """Far-field per-mic delays tau_i for each scanned direction.

    A plane wave from direction u reaches mic i earlier by (p_i . u)/c, so
    the steering delay is tau_i = -(p_i . u)/c; the beamformer advances each
    channel by its own delay to re-align the wavefront.
    Returns (T, M) seconds for the cartesian product el x az (el outer).
    """
    az = np.radians(np.atleast_1d(np.asarray(azimuths_deg, dtype=np.float64)))
    if elevations_deg is None:
        el = np.zeros(1)
    else:
        el = np.radians(np.atleast_1d(np.asarray(elevations_deg, dtype=np.float64)))
    u = np.stack([
        np.cos(el)[:, None] * np.cos(az)[None, :],
        np.cos(el)[:, None] * np.sin(az)[None, :],
        np.sin(el)[:, None] * np.ones_like(az)[None, :],
    ], axis=-1).reshape(-1, 3)
    return -(u @ geometry.mic_positions.T) / geometry.c


def das_beamform(spectra, geometry: ArrayGeometry, h=None, scan_step_deg: float = 1.0,
                 elevation_step_deg: float = 5.0, t: float | None = None,
                 return_response: bool = False):
    """Steered-response delay-and-sum across the full array, frequency domain.

    For each scanned direction the channels are phase-aligned
    (X_i[k] * exp(+j 2 pi f_k tau_i)), gain-equalized by 1/g_i, summed, and
    the per-bin powers are combined under the weight h (default all-ones).
    The argmax direction wins.  Elevation is scanned only for non-coplanar
    arrays; a planar array cannot tell up from down.
    """
    if geometry is None:
        raise ValueError("das_beamform requires a calibrated geometry")
    x = np.atleast_2d(np.asarray(spectra, dtype=np.complex128))
    if x.shape != (geometry.mic_count, SPECTRUM_BINS):
        raise ValueError(f"spectra must be (mics, {SPECTRUM_BINS})")
    if h is None:
        h = np.ones(SPECTRUM_BINS)
    h = np.asarray(h, dtype=np.float64)
    az_grid = np.arange(0.0, 360.0, scan_step_deg)
    scan_el = not geometry.is_planar()
    el_grid = np.arange(-90.0, 90.0 + 1e-9, elevation_step_deg) if scan_el else None
    tau = steering_delays(geometry, az_grid, el_grid)
    power = kernels.steered_power(x, tau, BIN_FREQS, h, 1.0 / geometry.gains)
    k = int(np.argmax(power))
    if scan_el:
        el = float(el_grid[k // az_grid.size])
        az = float(az_grid[k % az_grid.size])
    else:
        el = None
        az = float(az_grid[k])
    peak = float(power[k])
    flat = bool(np.ptp(power) <= 1e-9 * max(abs(peak), 1e-300))
    est = DoaEstimate(
        azimuth_deg=az,
        response_power=peak,
        method="beamformer",
        elevation_deg=el,
        ambiguous=flat,
        t=t,
    )
    if return_response:
        return est, power.reshape(-1, az_grid.size) if scan_el else power
    return est
