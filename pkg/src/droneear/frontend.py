"""Digital front end: log-amp linearization, 64:1 decimation, framing, power spectra.

The acquisition chain runs each channel at 1.4 Msps through a logarithmic
amplifier and a 12-bit converter.  The digital side undoes the log curve,
averages blocks of 64 samples down to 21875 Hz (gaining ~6 effective bits),
and computes 1024-bin one-sided power spectra from non-overlapping
2048-sample Hann-windowed frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

ADC_RATE = 1_400_000            # per-channel conversion rate, samples/s
DECIMATION = 64
AUDIO_RATE = ADC_RATE // DECIMATION     # 21875 Hz
FRAME_LEN = 2048
SPECTRUM_BINS = FRAME_LEN // 2          # one-sided, Nyquist bin dropped
BIN_WIDTH_HZ = AUDIO_RATE / FRAME_LEN   # ~10.681 Hz
CODE_BITS = 12
CODE_MAX = (1 << CODE_BITS) - 1         # 4095
EFFECTIVE_BITS = CODE_BITS + 6


@dataclass(frozen=True)
class LogAmpModel:
    """Transfer curve of the analog log amplifier feeding the 12-bit ADC.

    Linear amplitudes in [x_min, x_max] map onto codes [0, code_max] via

        code = round(code_max * ln(x / x_min) / alpha)

    with ``alpha = ln(x_max / x_min)`` fixing the compressed dynamic range.
    ``v_ref`` is the converter's full-scale voltage; codes are dimensionless
    and the model works in normalized amplitude units.

    The map is strictly increasing on its domain, forward(x_min) == 0,
    forward(x_max) == code_max, and inverse() round-trips within half a
    code step in the log domain.
    """

    v_ref: float = 3.3
    code_max: int = CODE_MAX
    alpha: float = 6.0
    x_min: float = field(default=math.exp(-6.0))

    def __post_init__(self):
        if self.x_min <= 0:
            raise ValueError("x_min must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.code_max < 1:
            raise ValueError("code_max must be >= 1")

    @property
    def x_max(self) -> float:
        return self.x_min * math.exp(self.alpha)

    @property
    def bias(self) -> float:
        """Designed DC operating point at the converter input (mid-domain)."""
        return 0.5 * (self.x_min + self.x_max)

    @property
    def half_range(self) -> float:
        """Linear headroom on either side of the bias point."""
        return 0.5 * (self.x_max - self.x_min)

    def forward(self, x):
        """Linear amplitude(s) -> integer code(s), clamping outside the domain."""
        x = np.clip(np.asarray(x, dtype=np.float64), self.x_min, self.x_max)
        codes = np.rint(self.code_max * np.log(x / self.x_min) / self.alpha)
        return codes.astype(np.uint16)

    def inverse(self, code):
        """Integer code(s) -> linear amplitude(s)."""
        code = np.asarray(code)
        return self.x_min * np.exp(self.alpha * code.astype(np.float64) / self.code_max)

    def code_table(self) -> np.ndarray:
        """Lookup table inverse(0..code_max), for bulk linearization."""
        return self.inverse(np.arange(self.code_max + 1, dtype=np.uint16))


@dataclass
class RawAdcBlock:
    """A burst of 12-bit log-domain codes, one row per channel."""

    codes: np.ndarray           # (channels, n) uint16
    sample_rate: int = ADC_RATE

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 2:
            raise ValueError("codes must be (channels, samples)")
        if self.codes.shape[0] not in (3, 6):
            raise ValueError(f"channel_count must be 3 or 6, got {self.codes.shape[0]}")
        if self.codes.dtype != np.uint16:
            if self.codes.min() < 0 or self.codes.max() > CODE_MAX:
                raise ValueError("codes out of [0, 4095]")
            self.codes = self.codes.astype(np.uint16)
        elif self.codes.size and self.codes.max() > CODE_MAX:
            raise ValueError("codes out of [0, 4095]")

    @property
    def channel_count(self) -> int:
        return self.codes.shape[0]

    @property
    def block_len(self) -> int:
        return self.codes.shape[1]


@dataclass
class DecimatedStream:
    """Linear-amplitude multichannel stream at the decimated 21875 Hz rate."""

    samples: np.ndarray         # (channels, n) float64
    sample_rate: int = AUDIO_RATE
    effective_bits: int = EFFECTIVE_BITS

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass
class SpectrumFrame:
    """One 2048-sample analysis frame and its one-sided spectra."""

    frame_index: int
    time_samples: np.ndarray    # (channels, 2048)
    psd: np.ndarray             # (channels, 1024), |X[k]|^2
    phase: np.ndarray           # (channels, 1024), radians
    spectrum: np.ndarray        # (channels, 1024), complex X[k]
    bin_width: float = BIN_WIDTH_HZ

    @property
    def start_sample(self) -> int:
        return self.frame_index * FRAME_LEN

    @property
    def second(self) -> int:
        """Stream second this frame counts toward (the one containing its last sample)."""
        return ((self.frame_index + 1) * FRAME_LEN - 1) // AUDIO_RATE


def linearize(code, model: LogAmpModel):
    """Undo the log-amp compression: ADC code(s) -> linear amplitude(s).

    Raises ValueError for codes outside [0, model.code_max].
    """
    arr = np.asarray(code)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.rint(arr)):
            raise ValueError("codes must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > model.code_max):
        raise ValueError(f"code out of [0, {model.code_max}]")
    out = model.inverse(arr)
    if np.isscalar(code) or arr.ndim == 0:
        return float(out)
    return out


def decimate64(block):
    """Mean of exactly 64 linear samples: one output sample per block."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape[-1] != DECIMATION:
        raise ValueError(f"decimation block must have {DECIMATION} samples, got {block.shape[-1]}")
    return block.mean(axis=-1)


def decimate_stream(samples: np.ndarray) -> np.ndarray:
    """Block-mean an entire (channels, n) stream by 64. n must divide evenly."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = samples.shape[1]
    if n % DECIMATION:
        raise ValueError(f"stream length {n} not divisible by {DECIMATION}")
    return kernels.block_mean(samples, DECIMATION)


def hann_window(n: int = FRAME_LEN) -> np.ndarray:
    # periodic form: a bin-centered tone occupies exactly three bins
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOW = hann_window()


def compute_spectrum(frame):
    """PSD and phase of one Hann-windowed 2048-sample frame.

    Returns (psd, phase): 1024 one-sided bins each (Nyquist bin dropped),
    psd[k] = |X[k]|^2 and phase[k] = arg X[k].  Accepts (2048,) or
    (channels, 2048) input.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != FRAME_LEN:
        raise ValueError(f"frame must have {FRAME_LEN} samples, got {frame.shape[-1]}")
    spec = np.fft.rfft(frame * _WINDOW, axis=-1)[..., :SPECTRUM_BINS]
    psd = spec.real**2 + spec.imag**2
    phase = np.angle(spec)
    return psd, phase


def frame_complex_spectrum(frame):
    """Complex one-sided spectrum of a Hann-windowed frame (beamformer input)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != FRAME_LEN:
        raise ValueError(f"frame must have {FRAME_LEN} samples, got {frame.shape[-1]}")
    return np.fft.rfft(frame * _WINDOW, axis=-1)[..., :SPECTRUM_BINS]


def normalize_psd(psd: np.ndarray) -> np.ndarray:
    """Scale a PSD to unit L1 mass. Raises ValueError on an all-zero input."""
    psd = np.asarray(psd, dtype=np.float64)
    if np.any(psd < 0):
        raise ValueError("psd bins must be non-negative")
    total = psd.sum()
    if total <= 0.0:
        raise ValueError("cannot normalize an all-zero psd; gate on power first")
    return psd / total


def recover_stream(raw: RawAdcBlock, model: LogAmpModel) -> DecimatedStream:
    """Full front end: linearize codes, remove the analog bias, decimate 64:1.

    The constant subtracted is the chain's designed operating point
    (model.bias); the analog stage is AC-coupled, so anything left at DC
    is staging offset, not signal.  Trailing samples short of a full
    64-block are dropped.
    """
    n = raw.block_len - raw.block_len % DECIMATION
    table = model.code_table()
    linear = table[raw.codes[:, :n]]
    linear -= model.bias
    rate = raw.sample_rate // DECIMATION
    if rate * DECIMATION != raw.sample_rate:
        raise ValueError(f"sample rate {raw.sample_rate} not divisible by {DECIMATION}")
    return DecimatedStream(decimate_stream(linear), sample_rate=rate)


def iter_frames(stream: DecimatedStream):
    """Yield successive non-overlapping SpectrumFrames (hop == frame length)."""
    samples = stream.samples
    n_frames = samples.shape[1] // FRAME_LEN
    for i in range(n_frames):
        chunk = samples[:, i * FRAME_LEN:(i + 1) * FRAME_LEN]
        spec = frame_complex_spectrum(chunk)
        psd = spec.real**2 + spec.imag**2
        yield SpectrumFrame(
            frame_index=i,
            time_samples=chunk,
            psd=psd,
            phase=np.angle(spec),
            spectrum=spec,
        )


def frame_count(n_samples: int) -> int:
    return n_samples // FRAME_LEN
