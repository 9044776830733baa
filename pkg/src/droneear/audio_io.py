"""File ingestion and emission: raw ADC captures and multichannel PCM WAV.

Two on-disk audio forms are understood.  Raw captures hold the untouched
12-bit log-domain codes and replay through the full front end.  WAV files
carry linear audio and enter the pipeline at the decimated stage, resampled
to 21875 Hz when needed.

Raw capture layout (little-endian):

    magic   4 bytes  b"DEAR"
    chans   u8
    rate    u32      per-channel sample rate
    codes   u16 * chans * n, channel-interleaved (frame-major)
"""

from __future__ import annotations

import math
import struct
import wave
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .frontend import AUDIO_RATE, CODE_MAX, DecimatedStream, LogAmpModel, RawAdcBlock, recover_stream

RAW_MAGIC = b"DEAR"
_HEADER = struct.Struct("<4sBI")


def write_raw_adc(path, raw: RawAdcBlock) -> None:
    """Write a RawAdcBlock to the raw capture format."""
    codes = np.ascontiguousarray(raw.codes, dtype=np.uint16)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RAW_MAGIC, raw.channel_count, raw.sample_rate))
        # interleave: sample-major so a capture can stream out incrementally
        fh.write(codes.T.astype("<u2").tobytes())


def read_raw_adc(path) -> RawAdcBlock:
    """Read a raw capture. Raises ValueError on a bad header or truncation."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, chans, rate = _HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
    if chans not in (3, 6):
        raise ValueError(f"{path}: channel count {chans} not supported")
    body = data[_HEADER.size:]
    if len(body) % (2 * chans):
        raise ValueError(f"{path}: payload not a whole number of {chans}-channel samples")
    codes = np.frombuffer(body, dtype="<u2").reshape(-1, chans).T
    if codes.size and codes.max() > CODE_MAX:
        raise ValueError(f"{path}: codes exceed {CODE_MAX}")
    return RawAdcBlock(codes=np.ascontiguousarray(codes), sample_rate=rate)


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    """Write (channels, n) float samples in [-1, 1] as integer PCM WAV."""
    if bits not in (16, 24, 32):
        raise ValueError(f"bits must be 16, 24, or 32, got {bits}")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    chans, n = samples.shape
    full = float(2 ** (bits - 1) - 1)
    ints = np.rint(np.clip(samples, -1.0, 1.0) * full).astype(np.int64)
    interleaved = ints.T.reshape(-1)
    if bits == 24:
        # no 3-byte dtype: emit the low three bytes of each little-endian i32
        as32 = interleaved.astype("<i4").view(np.uint8).reshape(-1, 4)
        payload = as32[:, :3].tobytes()
    else:
        payload = interleaved.astype(f"<i{bits // 8}").tobytes()
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(chans)
        wf.setsampwidth(bits // 8)
        wf.setframerate(sample_rate)
        wf.writeframes(payload)


def read_wav(path):
    """Read integer PCM WAV. Returns ((channels, n) float64 in [-1, 1], rate)."""
    with wave.open(str(path), "rb") as wf:
        chans = wf.getnchannels()
        width = wf.getsampwidth()
        rate = wf.getframerate()
        payload = wf.readframes(wf.getnframes())
    if width == 2:
        ints = np.frombuffer(payload, dtype="<i2").astype(np.float64)
    elif width == 3:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3)
        as32 = np.zeros((raw.shape[0], 4), dtype=np.uint8)
        as32[:, 1:] = raw          # shift into the high bytes, then arithmetic-shift back
        ints = (as32.view("<i4").reshape(-1) >> 8).astype(np.float64)
    elif width == 4:
        ints = np.frombuffer(payload, dtype="<i4").astype(np.float64)
    else:
        raise ValueError(f"{path}: {8 * width}-bit WAV not supported (16/24/32 only)")
    bits = 8 * width
    samples = ints.reshape(-1, chans).T / float(2 ** (bits - 1) - 1)
    return samples, rate


def resample_to_audio_rate(samples, sample_rate: int):
    """Band-limited resample of (channels, n) audio to the 21875 Hz pipeline rate."""
    if sample_rate == AUDIO_RATE:
        return np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if sample_rate <= 0:
        raise ValueError("sample rate must be positive")
    g = math.gcd(AUDIO_RATE, sample_rate)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return resample_poly(samples, AUDIO_RATE // g, sample_rate // g, axis=-1)


def load_decimated(path, model: LogAmpModel | None = None, fmt: str | None = None) -> DecimatedStream:
    """Open a raw capture or WAV file as a DecimatedStream.

    Raw captures run through the full front end (linearize, de-bias,
    decimate) using `model` (default LogAmpModel()).  WAV input is linear
    already and is only resampled.  `fmt` forces "raw-adc" or "wav";
    otherwise the file's leading magic decides.
    """
    path = Path(path)
    if fmt is None:
        with open(path, "rb") as fh:
            magic = fh.read(4)
        if magic == RAW_MAGIC:
            fmt = "raw-adc"
        elif magic == b"RIFF":
            fmt = "wav"
        else:
            raise ValueError(f"{path}: unrecognized format (magic {magic!r})")
    if fmt == "raw-adc":
        return recover_stream(read_raw_adc(path), model or LogAmpModel())
    if fmt == "wav":
        samples, rate = read_wav(path)
        return DecimatedStream(resample_to_audio_rate(samples, rate))
    raise ValueError(f"unknown format {fmt!r}")
