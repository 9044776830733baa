"""Pure-numpy implementations of the hot kernels.

Reference backend: the compiled extension in ``_kernels.pyx`` must match
these results (same math, different loop structure).
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def block_mean(samples: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping block mean along the last axis. Length must divide evenly."""
    samples = np.asarray(samples, dtype=np.float64)
    lead = samples.shape[:-1]
    n = samples.shape[-1]
    return samples.reshape(lead + (n // factor, factor)).mean(axis=-1)


def steered_power(spectra, delays, freqs, weights, channel_scale):
    """Steered response power over a grid of per-channel delays.

    P[t] = sum_k weights[k] * |sum_i channel_scale[i] * X[i,k]
                               * exp(+2j*pi*freqs[k]*delays[t,i])|^2

    spectra: (M, K) complex128, delays: (T, M), freqs: (K,), weights: (K,),
    channel_scale: (M,).  Returns (T,) float64.
    """
    spectra = np.asarray(spectra, dtype=np.complex128)
    delays = np.atleast_2d(np.asarray(delays, dtype=np.float64))
    freqs = np.asarray(freqs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    scaled = np.asarray(channel_scale, dtype=np.float64)[:, None] * spectra
    out = np.empty(delays.shape[0])
    # chunk the steering grid: a full (T, M, K) complex cube can be large
    chunk = max(1, min(delays.shape[0], 512))
    for a in range(0, delays.shape[0], chunk):
        d = delays[a:a + chunk]
        steer = np.exp((2j * np.pi) * d[:, :, None] * freqs[None, None, :])
        beam = np.einsum("tmk,mk->tk", steer, scaled)
        out[a:a + chunk] = ((beam.real**2 + beam.imag**2) * weights).sum(axis=1)
    return out


def weighted_sq_distances(psd, means, stds):
    """Per-slot sum_k ((psd[k]-means[s,k])/stds[s,k])^2. Returns (S,) float64."""
    psd = np.asarray(psd, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    z = (psd[None, :] - means) / stds
    return (z * z).sum(axis=1)


def logamp_quantize(x, x_min, alpha, code_max, dither):
    """Forward log-amp map with additive code-domain dither, clamped to the domain.

    x below x_min (including zero/negative) pins to code 0; above
    x_min*exp(alpha) pins to code_max.
    """
    x = np.asarray(x, dtype=np.float64)
    x_max = x_min * np.exp(alpha)
    clamped = np.clip(x, x_min, x_max)
    codes = np.rint(code_max * np.log(clamped / x_min) / alpha + dither)
    return np.clip(codes, 0, code_max).astype(np.uint16)
