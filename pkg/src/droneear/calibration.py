"""Array self-calibration from a handful of acoustic pulses.

Ten-ish pulses are played from scattered positions near the array.  Pairwise
arrival-time differences are measured by cross-correlation; the largest
per-pair delay over the pulse set bounds that pair's distance from below and
attains it when some pulse lies on the pair's axis (endfire), so with a
well-spread pulse set c*max|tau| is the mic-pair distance.  Classical
multidimensional scaling embeds the distance matrix into 3-space, and a
log-domain least squares over pulse energies recovers per-microphone gains.

Everything here is batch and pure; geometry files are versioned JSON.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import fftconvolve

from .frontend import AUDIO_RATE

SOUND_SPEED = 343.0             # m/s at 20 C; configurable everywhere it is used
MIN_PULSES = 4
NOMINAL_PULSES = 10
MIN_PEAK_CORRELATION = 0.3
GEOMETRY_FORMAT = "drone-ear-geometry"
GEOMETRY_VERSION = 1


class CalibrationError(Exception):
    """Base for calibration failures."""


class CalibrationSignalError(CalibrationError):
    """A pulse segment has no usable transient."""


class UnreliablePulseError(CalibrationError):
    """Cross-correlation peak too weak to trust."""


class InsufficientCalibrationDataError(CalibrationError):
    """Fewer than the minimum usable pulses."""


class InconsistentDistancesError(CalibrationError):
    """Distance matrix is not close to Euclidean-embeddable."""


class GainUnobservableError(CalibrationError):
    """Pulse set cannot separate gains from source levels."""


@dataclass
class PulseRecordingSet:
    """Per-pulse multichannel segments at the decimated rate.

    `pulses` is a list of (channels, n_p) arrays; segments may differ in
    length but must share the channel count.
    """

    pulses: list
    sample_rate: int = AUDIO_RATE

    def __post_init__(self):
        if not self.pulses:
            raise ValueError("empty pulse set")
        self.pulses = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in self.pulses]
        chans = {p.shape[0] for p in self.pulses}
        if len(chans) != 1:
            raise ValueError(f"inconsistent channel counts across pulses: {sorted(chans)}")

    @property
    def pulse_count(self) -> int:
        return len(self.pulses)

    @property
    def channel_count(self) -> int:
        return self.pulses[0].shape[0]


@dataclass
class ArrayGeometry:
    """Calibrated microphone positions (meters) and per-mic gains.

    The frame is canonical: centroid at the origin, principal axes aligned
    with the coordinate axes.  Gains are normalized to geometric mean 1 —
    absolute sensitivity is unobservable from passive recordings.
    """

    mic_positions: np.ndarray   # (M, 3)
    gains: np.ndarray | None = None
    c: float = SOUND_SPEED

    def __post_init__(self):
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        if self.mic_positions.shape[1] == 2:
            z = np.zeros((self.mic_positions.shape[0], 1))
            self.mic_positions = np.hstack([self.mic_positions, z])
        if self.mic_positions.shape[1] != 3:
            raise ValueError("mic positions must be (M, 2) or (M, 3)")
        self.mic_positions = self.mic_positions - self.mic_positions.mean(axis=0)
        m = self.mic_positions.shape[0]
        if self.gains is None:
            self.gains = np.ones(m)
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.gains.shape != (m,):
            raise ValueError("one gain per microphone required")
        if np.any(self.gains <= 0):
            raise ValueError("gains must be positive")
        self.gains = self.gains / np.exp(np.mean(np.log(self.gains)))

    @property
    def mic_count(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def aperture(self) -> float:
        """Largest mic-pair distance."""
        d = self.mic_positions[:, None, :] - self.mic_positions[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def is_planar(self, rel_tol: float = 1e-6) -> bool:
        s = np.linalg.svd(self.mic_positions, compute_uv=False)
        return bool(s[2] <= rel_tol * max(s[0], 1e-12))


def detect_pulse_onsets(recordings: PulseRecordingSet):
    """Onset time of each pulse on each channel, seconds.

    Onset is the first sample whose magnitude reaches half the segment's
    peak magnitude.  A segment whose peak is under 10x its median absolute
    amplitude has no credible transient and raises CalibrationSignalError.
    Returns a (pulse_count, channels) array.
    """
    fs = recordings.sample_rate
    out = np.empty((recordings.pulse_count, recordings.channel_count))
    for p, seg in enumerate(recordings.pulses):
        env = np.abs(seg)
        for i in range(seg.shape[0]):
            peak = env[i].max()
            med = np.median(env[i])
            if peak < 10.0 * med or peak == 0.0:
                raise CalibrationSignalError(
                    f"pulse {p} channel {i}: peak {peak:.3g} < 10x median {med:.3g}"
                )
            onset = int(np.argmax(env[i] >= 0.5 * peak))
            out[p, i] = onset / fs
    return out


def _xcorr_lag(a: np.ndarray, b: np.ndarray, fs: int):
    """Delay of b relative to a, in samples (float), with its normalized peak.

    Full-range FFT cross-correlation, integer argmax, then a 3-point
    parabolic vertex for the sub-sample part.  When the two neighbors of
    the peak are equal to within 1e-9 relative, the offset is snapped to
    zero: the correlation is symmetric there, which is exactly the
    integer-shift case, and the formula would otherwise return rounding
    noise.
    """
    r = fftconvolve(b, a[::-1])
    m = int(np.argmax(r))
    ea = float(np.dot(a, a))
    eb = float(np.dot(b, b))
    denom = np.sqrt(ea * eb)
    quality = float(r[m] / denom) if denom > 0 else 0.0
    lag = float(m - (len(a) - 1))
    if 0 < m < len(r) - 1:
        rm, r0, rp = r[m - 1], r[m], r[m + 1]
        curve = rm - 2.0 * r0 + rp
        if abs(rm - rp) > 1e-9 * abs(r0) and curve < 0:
            lag += 0.5 * (rm - rp) / curve
    return lag, quality


def estimate_tdoa(pulse, sample_rate: int = AUDIO_RATE, min_quality: float = MIN_PEAK_CORRELATION):
    """Antisymmetric TDOA matrix (seconds) for one multichannel pulse.

    tau[i, j] is the arrival delay of channel j relative to channel i:
    positive when j hears the pulse later.  Computed for i < j and negated,
    so antisymmetry holds by construction.  Raises UnreliablePulseError when
    any pair's normalized correlation peak falls below `min_quality`.
    """
    seg = np.atleast_2d(np.asarray(pulse, dtype=np.float64))
    m = seg.shape[0]
    tau = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            lag, quality = _xcorr_lag(seg[i], seg[j], sample_rate)
            if quality < min_quality:
                raise UnreliablePulseError(
                    f"channels {i},{j}: correlation peak {quality:.2f} < {min_quality}"
                )
            tau[i, j] = lag / sample_rate
            tau[j, i] = -tau[i, j]
    return tau


def estimate_pairwise_distances(tdoas, c: float = SOUND_SPEED, spread_min: float = 0.7):
    """Mic-pair distances from per-pulse TDOA matrices.

    For each pair the delay magnitude is largest when a pulse lies on the
    pair's axis, where c*|tau| equals the true separation; the estimate is
    the max over pulses.  Pairs whose delays barely vary across pulses saw
    only broadside sources and are underestimated; they are flagged, not
    errors.

    Returns (distances, spread_ok) — both (M, M); spread_ok[i, j] is False
    where the pulse set's delay spread covered less than `spread_min` of the
    full endfire-to-endfire range 2*d/c.
    """
    taus = np.asarray(tdoas, dtype=np.float64)
    if taus.ndim == 2:
        taus = taus[None]
    if taus.shape[0] < MIN_PULSES:
        raise InsufficientCalibrationDataError(
            f"{taus.shape[0]} usable pulses < minimum {MIN_PULSES}"
        )
    if taus.shape[0] < NOMINAL_PULSES:
        warnings.warn(
            f"only {taus.shape[0]} pulses (nominal {NOMINAL_PULSES}); "
            "distance estimates may be endfire-starved",
            stacklevel=2,
        )
    dist = c * np.abs(taus).max(axis=0)
    np.fill_diagonal(dist, 0.0)
    dist = 0.5 * (dist + dist.T)
    span = taus.max(axis=0) - taus.min(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        coverage = np.where(dist > 0, c * span / (2.0 * dist), 1.0)
    spread_ok = coverage >= spread_min
    np.fill_diagonal(spread_ok, True)
    return dist, spread_ok


def mds_localize(distances, c: float = SOUND_SPEED) -> ArrayGeometry:
    """Embed a pairwise distance matrix into 3-space by classical MDS.

    Double-center B = -1/2 J D^2 J, eigendecompose, take the top three
    eigenpairs.  A Euclidean matrix has rank <= 3 with the rest zero;
    meaningfully negative eigenvalues beyond what M points allow mean the
    distances are inconsistent.  The embedding is unique up to rotation and
    reflection; the result is returned in canonical principal-axes frame.
    """
    d = np.asarray(distances, dtype=np.float64)
    m = d.shape[0]
    if d.shape != (m, m):
        raise ValueError("distance matrix must be square")
    if not np.allclose(d, d.T) or np.any(np.abs(np.diag(d)) > 1e-12):
        raise ValueError("distance matrix must be symmetric with zero diagonal")
    j = np.eye(m) - np.full((m, m), 1.0 / m)
    b = -0.5 * j @ (d**2) @ j
    evals, evecs = np.linalg.eigh(b)       # ascending
    evals, evecs = evals[::-1], evecs[:, ::-1]
    lam_max = max(evals[0], 0.0)
    bad = int(np.sum((evals < 0) & (np.abs(evals) > 0.01 * lam_max)))
    if bad > max(0, m - 4):
        raise InconsistentDistancesError(
            f"{bad} negative eigenvalues above 1% of the largest (allowed {max(0, m - 4)})"
        )
    top = np.clip(evals[:3], 0.0, None)
    pos = evecs[:, :3] * np.sqrt(top)
    return ArrayGeometry(canonicalize(pos), c=c)


def canonicalize(positions: np.ndarray) -> np.ndarray:
    """Center a point set and align its principal axes with x, y, z.

    Signs are fixed deterministically: each axis is flipped so its
    largest-magnitude coordinate is positive.
    """
    x = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=True)
    y = x @ vt.T
    for k in range(y.shape[1]):
        col = y[:, k]
        idx = int(np.argmax(np.abs(col)))
        if col[idx] < 0:
            y[:, k] = -col
    return y


def procrustes_align(estimated: np.ndarray, reference: np.ndarray):
    """RMS position error after optimal rigid alignment (reflection allowed).

    Aligns `estimated` onto `reference` with the best rotation/reflection
    and translation; returns (rms_error_meters, aligned_points).  Scale is
    NOT fitted — a calibration that gets the shape right but the size wrong
    must show the size error.
    """
    a = np.atleast_2d(np.asarray(estimated, dtype=np.float64))
    b = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("point sets must match in shape")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    u, _, vt = np.linalg.svd(ac.T @ bc)
    r = u @ vt
    aligned = ac @ r + b.mean(axis=0)
    rms = float(np.sqrt(np.mean(np.sum((aligned - b) ** 2, axis=1))))
    return rms, aligned


def locate_pulse(tau, geometry: ArrayGeometry, ranges=(0.5, 1.0, 2.0, 3.0, 5.0, 8.0)):
    """Source position of one pulse from its TDOA matrix, by multilateration.

    Residuals are range differences: ||x - p_j|| - ||x - p_i|| - c*tau[i,j]
    over pairs i < j.  A coarse polar grid seeds a least-squares refinement;
    planar arrays are searched in their plane (the out-of-plane component is
    unobservable up to reflection anyway).
    """
    mics = geometry.mic_positions
    c = geometry.c
    m = mics.shape[0]
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    target = np.array([c * tau[i, j] for i, j in pairs])
    planar = geometry.is_planar(rel_tol=1e-9)

    def residual(xy):
        x = np.append(xy, 0.0) if planar else xy
        r = np.linalg.norm(mics - x, axis=1)
        return np.array([r[j] - r[i] for i, j in pairs]) - target

    best, best_sse = None, np.inf
    for rad in ranges:
        for az in np.arange(0.0, 360.0, 5.0):
            phi = np.radians(az)
            cand = np.array([rad * np.cos(phi), rad * np.sin(phi)])
            if not planar:
                cand = np.append(cand, 0.0)
            sse = float(np.sum(residual(cand) ** 2))
            if sse < best_sse:
                best, best_sse = cand, sse
    sol = least_squares(residual, best, method="lm")
    x = sol.x
    return np.append(x, 0.0) if planar else x


def calibrate_gains(recordings: PulseRecordingSet, geometry: ArrayGeometry, pulse_positions):
    """Per-mic gains from pulse energies, inverse-square log least squares.

    Model: log E_pi = log S_p - 2 log r_pi + 2 log g_i, with unknown source
    log-levels S_p and gains g_i.  The global level/gain trade-off is fixed
    afterward by normalizing the gains to geometric mean 1, which also makes
    the result invariant to scaling every pulse's loudness.
    """
    mics = geometry.mic_positions
    m = mics.shape[0]
    pulses = recordings.pulses
    npulse = len(pulses)
    positions = np.atleast_2d(np.asarray(pulse_positions, dtype=np.float64))
    if positions.shape[0] != npulse:
        raise ValueError("one position per pulse required")

    rows, rhs = [], []
    for p in range(npulse):
        energy = np.sum(pulses[p] ** 2, axis=1)
        if np.any(energy <= 0):
            raise CalibrationSignalError(f"pulse {p}: a channel has zero energy")
        r = np.linalg.norm(mics - positions[p], axis=1)
        for i in range(m):
            row = np.zeros(m + npulse)
            row[i] = 2.0          # 2 log g_i
            row[m + p] = 1.0      # log S_p
            rows.append(row)
            rhs.append(np.log(energy[i]) + 2.0 * np.log(r[i]))
    a = np.array(rows)
    b = np.array(rhs)
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    # one gauge direction (level vs gain) is expected; anything lower is unobservable
    if rank < m + npulse - 1:
        raise GainUnobservableError(
            f"rank {rank} < {m + npulse - 1}: pulse set cannot separate gains from levels"
        )
    log_g = sol[:m]
    log_g -= log_g.mean()
    return np.exp(log_g)


@dataclass
class CalibrationReport:
    """Everything the calibration loop measured, for diagnostics and tests."""

    geometry: ArrayGeometry
    distances: np.ndarray
    spread_ok: np.ndarray
    tdoas: np.ndarray           # (pulses, M, M) seconds
    pulse_positions: np.ndarray
    onsets: np.ndarray
    discarded_pulses: list = field(default_factory=list)


def calibrate(recordings: PulseRecordingSet, c: float = SOUND_SPEED) -> CalibrationReport:
    """Full self-calibration: TDOA -> distances -> MDS -> pulse fixes -> gains."""
    onsets = detect_pulse_onsets(recordings)
    tdoas, kept, discarded = [], [], []
    for p, seg in enumerate(recordings.pulses):
        try:
            tdoas.append(estimate_tdoa(seg, recordings.sample_rate))
            kept.append(p)
        except UnreliablePulseError:
            discarded.append(p)
    if len(kept) < MIN_PULSES:
        raise InsufficientCalibrationDataError(
            f"only {len(kept)} reliable pulses of {recordings.pulse_count}"
        )
    tdoas = np.array(tdoas)
    distances, spread_ok = estimate_pairwise_distances(tdoas, c=c)
    geometry = mds_localize(distances, c=c)
    positions = np.array([locate_pulse(t, geometry) for t in tdoas])
    kept_set = PulseRecordingSet([recordings.pulses[p] for p in kept], recordings.sample_rate)
    gains = calibrate_gains(kept_set, geometry, positions)
    geometry = ArrayGeometry(geometry.mic_positions, gains=gains, c=c)
    return CalibrationReport(
        geometry=geometry,
        distances=distances,
        spread_ok=spread_ok,
        tdoas=tdoas,
        pulse_positions=positions,
        onsets=onsets,
        discarded_pulses=discarded,
    )


def split_pulses(samples, sample_rate: int = AUDIO_RATE, min_gap_s: float = 0.1,
                 level_ratio: float = 0.1) -> PulseRecordingSet:
    """Segment one continuous recording into pulses at its silence gaps.

    Active regions are where the cross-channel peak envelope exceeds
    `level_ratio` of its global maximum; regions closer than `min_gap_s`
    merge.  Each segment is padded out to the midpoint of its neighboring
    gaps so correlation sees identical context on every channel.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    env = np.abs(x).max(axis=0)
    peak = env.max()
    if peak <= 0:
        raise CalibrationSignalError("recording is silent")
    active = env > level_ratio * peak
    idx = np.flatnonzero(active)
    if idx.size == 0:
        raise CalibrationSignalError("no activity above the segmentation level")
    gap = int(round(min_gap_s * sample_rate))
    regions = []
    start = prev = idx[0]
    for i in idx[1:]:
        if i - prev > gap:
            regions.append((start, prev + 1))
            start = i
        prev = i
    regions.append((start, prev + 1))
    if len(regions) < 2:
        warnings.warn("single active region found; expected one region per pulse", stacklevel=2)
    segments = []
    for k, (s, e) in enumerate(regions):
        lo = 0 if k == 0 else (regions[k - 1][1] + s) // 2
        hi = x.shape[1] if k == len(regions) - 1 else (e + regions[k + 1][0]) // 2
        segments.append(x[:, lo:hi])
    return PulseRecordingSet(segments, sample_rate)


def save_geometry(path, geometry: ArrayGeometry, created: str | None = "auto") -> None:
    """Write a versioned geometry JSON file."""
    doc = {
        "format": GEOMETRY_FORMAT,
        "version": GEOMETRY_VERSION,
        "c": geometry.c,
        "mic_positions": geometry.mic_positions.tolist(),
        "gains": geometry.gains.tolist(),
    }
    if created == "auto":
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    if created:
        doc["created"] = created
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_geometry(path) -> ArrayGeometry:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != GEOMETRY_FORMAT:
        raise ValueError(f"{path}: not a geometry file")
    if doc.get("version") != GEOMETRY_VERSION:
        raise ValueError(f"{path}: geometry version {doc.get('version')} != {GEOMETRY_VERSION}")
    return ArrayGeometry(
        np.array(doc["mic_positions"], dtype=np.float64),
        gains=np.array(doc["gains"], dtype=np.float64),
        c=float(doc.get("c", SOUND_SPEED)),
    )
