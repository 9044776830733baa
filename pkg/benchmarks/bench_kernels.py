"""Compiled vs pure-numpy kernel timings on pipeline-shaped workloads.

Run:  python benchmarks/bench_kernels.py [--repeat N]

Each kernel is timed on the sizes the pipeline actually feeds it: one second
of 3-channel raw ADC for the decimator, a full 360-direction scan for the
beamformer, a 32-slot library for the classifier distance, and one second of
staged samples for the log-amp quantizer.  Output is a plain table plus the
max |difference| between the two backends on identical inputs.
"""

import argparse
import time

import numpy as np

import droneear._kernels_py as kpy

try:
    import droneear._kernels as kc
except ImportError:
    kc = None


def timeit(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5,
                    help="repetitions per kernel; best time wins (default 5)")
    args = ap.parse_args()

    rng = np.random.default_rng(0)

    # one second of pipeline-scale input per kernel
    adc = rng.standard_normal((3, 64 * 21875))
    spectra = (rng.standard_normal((3, 1024))
               + 1j * rng.standard_normal((3, 1024)))
    delays = rng.uniform(-1e-3, 1e-3, (360, 3))
    freqs = np.arange(1024) * (21875.0 / 2048.0)
    weights = rng.uniform(0.0, 1.0, 1024)
    scale = np.ones(3)
    psd = rng.uniform(0.0, 1.0, 1024)
    means = rng.uniform(0.0, 1.0, (32, 1024))
    stds = rng.uniform(0.01, 0.1, (32, 1024))
    staged = rng.uniform(0.01, 0.9, 64 * 21875)
    dither = rng.uniform(-0.5, 0.5, staged.size)

    cases = [
        ("block_mean (3ch x 1.4 Ms, /64)", "block_mean", (adc, 64)),
        ("steered_power (360 dirs x 1024)", "steered_power",
         (spectra, delays, freqs, weights, scale)),
        ("weighted_sq_distances (32 slots)", "weighted_sq_distances",
         (psd, means, stds)),
        ("logamp_quantize (1.4 Ms)", "logamp_quantize",
         (staged, 1e-4, 6.0, 4095, dither)),
    ]

    print(f"{'kernel':36s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for label, name, inputs in cases:
        t_py, out_py = timeit(getattr(kpy, name), inputs, args.repeat)
        if kc is None:
            print(f"{label:36s} {t_py * 1e3:9.2f}ms {'n/a':>10s} {'n/a':>8s} {'n/a':>10s}")
            continue
        t_c, out_c = timeit(getattr(kc, name), inputs, args.repeat)
        diff = np.max(np.abs(np.asarray(out_py, dtype=np.float64)
                             - np.asarray(out_c, dtype=np.float64)))
        print(f"{label:36s} {t_py * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms "
              f"{t_py / t_c:7.2f}x {diff:10.3e}")
    if kc is None:
        print("\ncompiled backend not built; showing pure-numpy timings only")


if __name__ == "__main__":
    main()
