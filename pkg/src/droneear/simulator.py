"""Physics-based scene generator for end-to-end verification.

Synthesizes drone-like sources (harmonic comb plus band-limited broadband),
propagates them to each microphone with fractional-sample delay and 1/r
attenuation, optionally adds per-mic Gaussian noise, and can push the result
through the analog front-end model: 64x band-limited upsampling to 1.4 Msps,
log-amp compression around the chain's DC operating point, and dithered
12-bit quantization.

Every random draw comes from a per-scene seeded generator, so identical
configs give bit-identical output.  Trajectories are piecewise-constant over
200 ms segments; at drone speeds the Doppler this ignores is far below one
frequency bin.

Azimuths follow the package convention: degrees CCW from +x.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from . import kernels
from .calibration import SOUND_SPEED, PulseRecordingSet
from .frontend import AUDIO_RATE, DECIMATION, LogAmpModel, RawAdcBlock

SEGMENT_LEN = 4375              # 200 ms trajectory/DOA segment
NYQUIST = AUDIO_RATE / 2.0
SINC_HALF_TAPS = 32             # fractional-delay kernel reach on each side
KAISER_BETA = 8.0
R_REF = 1.0                     # attenuation reference distance, meters
R_MIN = 0.1
R_MAX = 1000.0
DEFAULT_STAGE_SCALE = 0.45      # audio units -> linear excursion around the bias point

# equilateral triangle, 0.5 m sides, centroid at origin (circumradius 0.5/sqrt(3))
_RC = 0.5 / np.sqrt(3.0)
TRIANGLE_ARRAY = _RC * np.array([
    [np.cos(np.radians(90.0)), np.sin(np.radians(90.0)), 0.0],
    [np.cos(np.radians(210.0)), np.sin(np.radians(210.0)), 0.0],
    [np.cos(np.radians(330.0)), np.sin(np.radians(330.0)), 0.0],
])
# six mics: the triangle plus a rotated, raised copy (non-coplanar, gives elevation)
SIX_MIC_ARRAY = np.vstack([
    TRIANGLE_ARRAY - [0.0, 0.0, 0.1],
    (_RC * np.array([
        [np.cos(np.radians(30.0)), np.sin(np.radians(30.0)), 0.0],
        [np.cos(np.radians(150.0)), np.sin(np.radians(150.0)), 0.0],
        [np.cos(np.radians(270.0)), np.sin(np.radians(270.0)), 0.0],
    ]) + [0.0, 0.0, 0.1]),
])


class SceneError(ValueError):
    pass


class DegenerateSceneError(SceneError):
    pass


@dataclass(frozen=True)
class SourceSpectrumSpec:
    """Harmonic-comb-plus-broadband description of a rotorcraft sound."""

    fundamental: float          # Hz
    harmonic_count: int = 10
    harmonic_rolloff: float = 6.0   # dB per octave, power
    broadband_level: float = -12.0  # dB, broadband RMS relative to harmonic RMS
    band_extent: float = 8000.0     # Hz, brickwall edge of the broadband part

    def __post_init__(self):
        if self.fundamental <= 0:
            raise ValueError("fundamental must be positive")
        if self.band_extent > NYQUIST:
            raise ValueError(f"band_extent {self.band_extent} beyond Nyquist {NYQUIST}")


# qualitative stand-ins: the smaller the airframe, the higher the fundamental
# and the flatter/stronger the high-frequency content
PRESETS = {
    "quad-large": SourceSpectrumSpec(110.0, harmonic_count=14, harmonic_rolloff=9.0,
                                     broadband_level=-18.0, band_extent=4000.0),
    "quad-mid": SourceSpectrumSpec(165.0, harmonic_count=12, harmonic_rolloff=6.0,
                                   broadband_level=-12.0, band_extent=7000.0),
    "quad-small": SourceSpectrumSpec(220.0, harmonic_count=10, harmonic_rolloff=3.0,
                                     broadband_level=-8.0, band_extent=10000.0),
}


@dataclass
class SceneConfig:
    source: SourceSpectrumSpec
    trajectory: np.ndarray          # (S, 3) one position per 200 ms segment (last held)
    mic_positions: np.ndarray = field(default_factory=lambda: TRIANGLE_ARRAY.copy())
    gains: np.ndarray | None = None
    noise_db: float | None = None   # per-mic white noise, dB re unit source RMS; None = off
    source_db: float | None = 0.0   # source level; None mutes it (noise-only scene)
    duration: float = 10.0
    seed: int = 0
    c: float = SOUND_SPEED
    preset_name: str = ""

    def __post_init__(self):
        self.trajectory = np.atleast_2d(np.asarray(self.trajectory, dtype=np.float64))
        if self.trajectory.shape[1] == 2:
            self.trajectory = np.hstack([self.trajectory,
                                         np.zeros((self.trajectory.shape[0], 1))])
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        if self.gains is None:
            self.gains = np.ones(self.mic_positions.shape[0])
        self.gains = np.asarray(self.gains, dtype=np.float64)


def synth_source(spec: SourceSpectrumSpec, duration: float, seed: int):
    """Mono source signal at the decimated rate, RMS-normalized to 1.

    Harmonics get seeded random phases and a k^(-rolloff) power law;
    anything at or above Nyquist is silently dropped from the series.  The
    broadband part is white noise brickwall-limited to band_extent and mixed
    at broadband_level dB below the harmonic RMS.
    """
    n = int(round(duration * AUDIO_RATE))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / AUDIO_RATE
    sig = np.zeros(n)
    amps = []
    for k in range(1, spec.harmonic_count + 1):
        f = k * spec.fundamental
        if f >= NYQUIST:
            break
        a = 10.0 ** (-spec.harmonic_rolloff * np.log2(k) / 20.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        sig += a * np.sin(2.0 * np.pi * f * t + phase)
        amps.append(a)
    harm_rms = np.sqrt(0.5 * np.sum(np.square(amps))) if amps else 0.0
    if np.isfinite(spec.broadband_level):
        noise = rng.standard_normal(n)
        spec_n = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1.0 / AUDIO_RATE)
        spec_n[freqs > spec.band_extent] = 0.0
        noise = np.fft.irfft(spec_n, n)
        rms = np.sqrt(np.mean(noise**2))
        if rms > 0:
            level = harm_rms if harm_rms > 0 else 1.0
            sig += noise / rms * level * 10.0 ** (spec.broadband_level / 20.0)
    total = np.sqrt(np.mean(sig**2))
    if total <= 0:
        raise SceneError("source spec produced silence")
    return sig / total


def _delay_kernel(frac: float) -> np.ndarray:
    taps = np.arange(-SINC_HALF_TAPS + 1, SINC_HALF_TAPS + 1)
    return np.sinc(taps - frac) * np.kaiser(2 * SINC_HALF_TAPS, KAISER_BETA)


def propagate(signal, trajectory, mic_positions, gains=None, c: float = SOUND_SPEED):
    """Delay-and-attenuate a source to each microphone.

    y_i(t) = g_i * s(t - r_i/c) / max(r_i, 1 m), with the source position
    held constant within each 200 ms segment.  Fractional delays use a
    63-tap Kaiser-windowed sinc, accurate to well under 0.1 sample for
    band-limited input.
    """
    s = np.asarray(signal, dtype=np.float64)
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))
    traj = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    m = mics.shape[0]
    gains = np.ones(m) if gains is None else np.asarray(gains, dtype=np.float64)
    n = s.size

    r_all = np.linalg.norm(traj[:, None, :] - mics[None, :, :], axis=2)
    if np.any(r_all < R_MIN) or np.any(r_all > R_MAX):
        raise SceneError(f"source-mic range outside [{R_MIN}, {R_MAX}] m")
    max_delay = int(np.ceil(r_all.max() / c * AUDIO_RATE)) + SINC_HALF_TAPS + 1
    padded = np.concatenate([np.zeros(max_delay), s, np.zeros(SINC_HALF_TAPS + 1)])

    out = np.zeros((m, n))
    n_seg = (n + SEGMENT_LEN - 1) // SEGMENT_LEN
    for seg in range(n_seg):
        pos = traj[min(seg, traj.shape[0] - 1)]
        a, b = seg * SEGMENT_LEN, min((seg + 1) * SEGMENT_LEN, n)
        for i in range(m):
            r = float(np.linalg.norm(pos - mics[i]))
            delay = r / c * AUDIO_RATE
            di, frac = int(np.floor(delay)), delay - np.floor(delay)
            kern = _delay_kernel(frac)
            # y[n] = sum_t h[t] * s[n - di - t]; slice the padded source accordingly
            lo = a + max_delay - di - SINC_HALF_TAPS
            seg_in = padded[lo:lo + (b - a) + 2 * SINC_HALF_TAPS - 1]
            y = np.convolve(seg_in, kern, mode="valid")
            out[i, a:b] = gains[i] / max(r, R_REF) * y
    return out


def logamp_adc(staged, model: LogAmpModel, seed: int = 0,
               saturation_limit: float = 0.01) -> RawAdcBlock:
    """Upsample 64x and digitize staged (unipolar) signals through the log amp.

    `staged` must already sit inside the model's domain (bias plus scaled
    audio).  Quantization adds seeded uniform dither of +/-0.5 LSB in the
    code domain.  If more than `saturation_limit` of any channel's samples
    clip at full scale a warning is raised — the analog design this mimics
    is meant to stay out of saturation.
    """
    x = np.atleast_2d(np.asarray(staged, dtype=np.float64))
    m, n = x.shape
    rng = np.random.default_rng(seed)
    codes = np.empty((m, n * DECIMATION), dtype=np.uint16)
    for i in range(m):
        up = resample_poly(x[i], DECIMATION, 1)
        clipped = np.count_nonzero(up > model.x_max)
        if clipped > saturation_limit * up.size:
            warnings.warn(
                f"channel {i}: {clipped / up.size:.1%} of samples beyond full scale",
                stacklevel=2,
            )
        dither = rng.uniform(-0.5, 0.5, size=up.size)
        codes[i] = kernels.logamp_quantize(up, model.x_min, model.alpha,
                                           model.code_max, dither)
    return RawAdcBlock(codes=codes, sample_rate=AUDIO_RATE * DECIMATION)


def stage_audio(audio, model: LogAmpModel, stage_scale: float = DEFAULT_STAGE_SCALE):
    """Map bipolar audio onto the log amp's unipolar domain: bias + scale*y.

    The scale is a fixed design constant, not per-scene normalization —
    the detection gate compares absolute energies across scenes, so the
    staging must not adapt to content.
    """
    return model.bias + stage_scale * np.asarray(audio, dtype=np.float64)


@dataclass
class SceneRender:
    audio: np.ndarray           # (M, n) decimated-rate linear audio (un-staged)
    config: SceneConfig
    truth: dict


def render_scene(config: SceneConfig) -> SceneRender:
    """Synthesize, propagate, and add noise; returns audio plus ground truth."""
    if config.source_db is None:
        n = int(round(config.duration * AUDIO_RATE))
        audio = np.zeros((config.mic_positions.shape[0], n))
    else:
        src = synth_source(config.source, config.duration, config.seed)
        src *= 10.0 ** (config.source_db / 20.0)
        audio = propagate(src, config.trajectory, config.mic_positions,
                          config.gains, config.c)
    if config.noise_db is not None and np.isfinite(config.noise_db):
        rng = np.random.default_rng(config.seed + 1)
        sigma = 10.0 ** (config.noise_db / 20.0)
        audio = audio + sigma * rng.standard_normal(audio.shape)
    n_seg = (audio.shape[1] + SEGMENT_LEN - 1) // SEGMENT_LEN
    seg_pos = [config.trajectory[min(s, config.trajectory.shape[0] - 1)]
               for s in range(n_seg)]
    truth = {
        "preset": config.preset_name,
        "duration": config.duration,
        "seed": config.seed,
        "c": config.c,
        "noise_db": config.noise_db,
        "mic_positions": config.mic_positions.tolist(),
        "gains": config.gains.tolist(),
        "segment_positions": [p.tolist() for p in seg_pos],
        "segment_azimuth_deg": [
            float(np.degrees(np.arctan2(p[1], p[0])) % 360.0) for p in seg_pos
        ],
    }
    return SceneRender(audio=audio, config=config, truth=truth)


def render_to_adc(render: SceneRender, model: LogAmpModel | None = None,
                  stage_scale: float = DEFAULT_STAGE_SCALE) -> RawAdcBlock:
    model = model or LogAmpModel()
    return logamp_adc(stage_audio(render.audio, model, stage_scale), model,
                      seed=render.config.seed + 2)


def _click_waveform(sample_rate: int = AUDIO_RATE, length_s: float = 0.005,
                    f0: float = 500.0, f1: float = 8000.0):
    # raised-cosine-enveloped up-chirp: a pure tone's correlation has
    # near-equal lobes one period apart and TDOA picks the wrong one;
    # the chirp compresses to a single unambiguous peak
    n = int(round(length_s * sample_rate))
    t = np.arange(n) / sample_rate
    env = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) / length_s * t**2)
    return env * np.sin(phase)


def pulse_scene(pulse_positions, mic_positions, gains=None, c: float = SOUND_SPEED,
                pad_s: float = 0.1, noise_db: float | None = None,
                seed: int = 0) -> PulseRecordingSet:
    """Calibration scene: one 5 ms raised-cosine click per position.

    Each pulse becomes its own recording segment with `pad_s` of silence on
    both sides.  Positions must be distinct and 0.5-5 m from the array
    centroid.
    """
    positions = np.atleast_2d(np.asarray(pulse_positions, dtype=np.float64))
    if positions.shape[1] == 2:
        positions = np.hstack([positions, np.zeros((positions.shape[0], 1))])
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))
    centroid = mics.mean(axis=0)
    radii = np.linalg.norm(positions - centroid, axis=1)
    if np.any(radii < 0.5) or np.any(radii > 5.0):
        raise SceneError("pulse positions must be 0.5-5 m from the array centroid")
    for a in range(positions.shape[0]):
        for b in range(a + 1, positions.shape[0]):
            if np.linalg.norm(positions[a] - positions[b]) < 1e-6:
                raise DegenerateSceneError(f"pulse positions {a} and {b} coincide")

    click = _click_waveform()
    pad = int(round(pad_s * AUDIO_RATE))
    src = np.concatenate([np.zeros(pad), click, np.zeros(pad)])
    rng = np.random.default_rng(seed)
    segments = []
    for pos in positions:
        seg = propagate(src, pos[None, :], mics, gains, c)
        if noise_db is not None and np.isfinite(noise_db):
            seg = seg + 10.0 ** (noise_db / 20.0) * rng.standard_normal(seg.shape)
        segments.append(seg)
    return PulseRecordingSet(segments, AUDIO_RATE)


def endfire_ring_positions(mic_positions, radius: float = 2.0, min_count: int = 10):
    """Pulse positions that make the pairwise-distance estimator exact.

    For every mic pair, the two points where the pair's line pierces the
    radius-`radius` sphere around the centroid: a source collinear with a
    pair sees the full separation as path difference, so c*|tau| equals the
    distance with no far-field approximation.  Ring fillers pad the set up
    to `min_count` for gain observability.
    """
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))
    centroid = mics.mean(axis=0)
    pts = []
    m = mics.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            p, d = mics[i] - centroid, mics[j] - mics[i]
            a = float(d @ d)
            b = 2.0 * float(p @ d)
            cc = float(p @ p) - radius * radius
            disc = b * b - 4.0 * a * cc
            if disc <= 0:
                continue
            for t in ((-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a)):
                pts.append(mics[i] + t * d)
    out = list(pts)
    k = 0
    while len(out) < min_count:
        phi = np.radians(45.0 + 90.0 * k)
        filler = centroid + radius * np.array([np.cos(phi), np.sin(phi), 0.0])
        if all(np.linalg.norm(filler - q) > 1e-3 for q in out):
            out.append(filler)
        k += 1
    return np.array(out)


def parse_scene_config(text: str) -> SceneConfig:
    """Parse the plain key=value scene description.

    Keys: preset | fundamental/harmonics/rolloff_db/broadband_db/band_hz,
    mics (semicolon-separated x,y,z triples), gains, source_pos or
    trajectory (triples per 200 ms segment), noise_db, duration, seed, c.
    '#' starts a comment.
    """
    kv = {}
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad scene config line: {raw_line!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()

    def triples(s):
        return np.array([[float(x) for x in part.split(",")]
                         for part in s.split(";") if part.strip()])

    preset = kv.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        spec = PRESETS[preset]
    elif kv.get("source_db", "").lower() in ("none", "off") and "fundamental" not in kv:
        spec = PRESETS["quad-mid"]      # placeholder; the source is muted anyway
    else:
        spec = SourceSpectrumSpec(
            fundamental=float(kv["fundamental"]),
            harmonic_count=int(kv.get("harmonics", 10)),
            harmonic_rolloff=float(kv.get("rolloff_db", 6.0)),
            broadband_level=float(kv.get("broadband_db", -12.0)),
            band_extent=float(kv.get("band_hz", 8000.0)),
        )
    if "trajectory" in kv:
        traj = triples(kv["trajectory"])
    elif "source_pos" in kv:
        traj = triples(kv["source_pos"])
    else:
        raise ValueError("scene config needs source_pos or trajectory")
    mics = triples(kv["mics"]) if "mics" in kv else TRIANGLE_ARRAY.copy()
    gains = None
    if "gains" in kv:
        gains = np.array([float(x) for x in kv["gains"].split(",")])
    noise_db = None
    if kv.get("noise_db", "none").lower() not in ("none", ""):
        noise_db = float(kv["noise_db"])
    source_db = 0.0
    if kv.get("source_db", "0").lower() in ("none", "off"):
        source_db = None
    elif "source_db" in kv:
        source_db = float(kv["source_db"])
    return SceneConfig(
        source=spec,
        trajectory=traj,
        mic_positions=mics,
        gains=gains,
        noise_db=noise_db,
        source_db=source_db,
        duration=float(kv.get("duration", 10.0)),
        seed=int(kv.get("seed", 0)),
        c=float(kv.get("c", SOUND_SPEED)),
        preset_name=preset,
    )


def format_truth(truth: dict) -> str:
    buf = io.StringIO()
    json.dump(truth, buf, indent=2)
    buf.write("\n")
    return buf.getvalue()
