"""Stream orchestration: gate -> classify -> DOA -> events.

The stream is processed on two interleaved clocks.  Energy windows (200 ms,
five per second) drive the power gate and the DOA cadence; spectral frames
(2048 samples, ~93.6 ms) drive classification.  A frame inherits the gate
state of the window containing its center sample.  Gated-off frames feed
the noise-floor estimate; gated-on frames are classified and folded into
per-second decisions, and an identity confirmed on two consecutive seconds
becomes a DetectionEvent.

Output is line-oriented JSON, fully determined by the input bytes and
config — the wall clock appears only in the stderr summary.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .audio_io import load_decimated
from .calibration import ArrayGeometry, load_geometry
from .classifier import (
    DetectionEvent,
    SecondDecision,
    SignatureLibrary,
    TemporalState,
    classify,
    decide_second,
    load_library,
    temporal_confirm,
)
from .doa import (
    DoaEstimate,
    NoiseProfile,
    das_beamform,
    energy_doa,
    energy_windows,
    estimate_signal_psd,
    power_gate,
    wiener_weight,
    WINDOW_LEN,
)
from .frontend import (
    AUDIO_RATE,
    DecimatedStream,
    FRAME_LEN,
    LogAmpModel,
    SPECTRUM_BINS,
    iter_frames,
    normalize_psd,
)


@dataclass
class PipelineConfig:
    input: str
    geometry: str
    library: str
    gate_threshold: float
    fmt: str | None = None              # "raw-adc" | "wav" | None = sniff
    scan_step_deg: float = 1.0
    noise_lambda: float = 0.05
    output: str | None = None           # None = stdout
    beamform: bool = True
    model: LogAmpModel = field(default_factory=LogAmpModel)


@dataclass
class PipelineResult:
    doa_records: list
    events: list
    seconds: list
    frames_processed: int = 0
    windows_processed: int = 0
    gated_on_windows: int = 0
    elapsed_s: float = 0.0
    stream_duration_s: float = 0.0

    @property
    def throughput_x(self) -> float:
        return self.stream_duration_s / self.elapsed_s if self.elapsed_s > 0 else float("inf")

    def summary(self) -> dict:
        return {
            "frames": self.frames_processed,
            "windows": self.windows_processed,
            "gated_on_windows": self.gated_on_windows,
            "gated_on_ratio": (self.gated_on_windows / self.windows_processed
                               if self.windows_processed else 0.0),
            "seconds_classified": len(self.seconds),
            "events": len(self.events),
            "stream_seconds": self.stream_duration_s,
            "throughput_x_realtime": round(self.throughput_x, 2),
            "kernel_backend": kernels.BACKEND,
        }


def channel_mean_psd(psd) -> np.ndarray:
    """Collapse a (channels, bins) PSD to the single spectrum the classifier sees."""
    psd = np.atleast_2d(np.asarray(psd, dtype=np.float64))
    return psd.mean(axis=0)


def process_stream(stream: DecimatedStream, geometry: ArrayGeometry,
                   library: SignatureLibrary, gate_threshold: float,
                   scan_step_deg: float = 1.0, noise_lambda: float = 0.05,
                   beamform: bool = True) -> PipelineResult:
    """Run the full detection pipeline over an in-memory stream."""
    if geometry.mic_count != stream.channel_count:
        raise ValueError(
            f"geometry has {geometry.mic_count} mics, stream has {stream.channel_count}"
        )
    t_start = time.perf_counter()
    windows = energy_windows(stream.samples, stream.sample_rate)
    gate = [power_gate(w, gate_threshold, geometry.gains) for w in windows]
    frames = list(iter_frames(stream))
    noise = NoiseProfile(lam=noise_lambda)
    state = TemporalState()

    def window_of(frame) -> int:
        center = frame.start_sample + FRAME_LEN // 2
        return min(center // WINDOW_LEN, len(windows) - 1) if windows else 0

    def frame_near(t: float):
        i = int(round(t * AUDIO_RATE / FRAME_LEN - 0.5))
        return frames[min(max(i, 0), len(frames) - 1)] if frames else None

    doa_records = []
    events = []
    second_results: dict[int, list] = {}
    frames_by_window: dict[int, list] = {}
    for f in frames:
        frames_by_window.setdefault(window_of(f), []).append(f)

    seconds_done = []
    gated_on = 0
    for w, win in enumerate(windows):
        active = gate[w]
        gated_on += int(active)
        for f in frames_by_window.get(w, []):
            psd = channel_mean_psd(f.psd)
            if not active:
                noise.update(psd, gated_on=False)
                continue
            if len(library):
                label, dist = classify(normalize_psd(psd), library)
                second_results.setdefault(f.second, []).append((label, dist))
        if active:
            est = energy_doa(win, geometry)
            doa_records.append(est)
            if beamform:
                f = frame_near(win.t + 0.5 * WINDOW_LEN / AUDIO_RATE)
                if f is not None:
                    psd = channel_mean_psd(f.psd)
                    h = wiener_weight(estimate_signal_psd(psd, noise.p_nn), noise.p_nn)
                    doa_records.append(das_beamform(
                        f.spectrum, geometry, h=h, scan_step_deg=scan_step_deg, t=win.t,
                    ))

    # per-second decisions and the two-second confirmation
    for s in sorted(second_results):
        decision = decide_second(second_results[s], second=s)
        seconds_done.append(decision)
        state, event = temporal_confirm(state, decision, library.distance_threshold,
                                        name=library.name_of(decision.uav_id))
        if event is not None:
            # attach the last DOA at or before the confirming boundary
            best = None
            for rec in doa_records:
                if rec.t is not None and rec.t <= event.t:
                    best = rec
            events.append(DetectionEvent(
                t=event.t, uav_id=event.uav_id, uav_name=event.uav_name,
                distance=event.distance, prev_distance=event.prev_distance,
                second_pair=event.second_pair, doa=best,
            ))

    elapsed = time.perf_counter() - t_start
    return PipelineResult(
        doa_records=doa_records,
        events=events,
        seconds=seconds_done,
        frames_processed=len(frames),
        windows_processed=len(windows),
        gated_on_windows=gated_on,
        elapsed_s=elapsed,
        stream_duration_s=stream.duration,
    )


def result_to_jsonl(result: PipelineResult) -> str:
    """Merge DOA records and events into one time-ordered JSONL stream."""
    tagged = []
    for i, rec in enumerate(result.doa_records):
        tagged.append((rec.t if rec.t is not None else 0.0, 0, i, rec.to_json_dict()))
    for i, ev in enumerate(result.events):
        tagged.append((ev.t, 1, i, ev.to_json_dict()))
    tagged.sort(key=lambda r: (r[0], r[1], r[2]))
    return "".join(json.dumps(doc, separators=(",", ":")) + "\n" for _, _, _, doc in tagged)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """File-to-file pipeline run. Fails fast on unreadable inputs."""
    for p, what in ((config.input, "input"), (config.geometry, "geometry"),
                    (config.library, "library")):
        if not Path(p).exists():
            raise FileNotFoundError(f"{what} file not found: {p}")
    geometry = load_geometry(config.geometry)
    library = load_library(config.library)
    if not len(library):
        raise ValueError(f"{config.library}: library is empty")
    stream = load_decimated(config.input, model=config.model, fmt=config.fmt)
    result = process_stream(
        stream, geometry, library,
        gate_threshold=config.gate_threshold,
        scan_step_deg=config.scan_step_deg,
        noise_lambda=config.noise_lambda,
        beamform=config.beamform,
    )
    text = result_to_jsonl(result)
    if config.output:
        Path(config.output).write_text(text)
    else:
        print(text, end="")
    return result


def emit_plot_data(stream: DecimatedStream, out_path=None) -> str:
    """Stream-averaged per-channel PSD as CSV (1024 rows plus header)."""
    frames = list(iter_frames(stream))
    if not frames:
        raise ValueError("input shorter than one frame; nothing to plot")
    acc = np.zeros((stream.channel_count, SPECTRUM_BINS))
    for f in frames:
        acc += f.psd
    acc /= len(frames)
    freqs = np.arange(SPECTRUM_BINS) * (AUDIO_RATE / FRAME_LEN)
    lines = ["bin_hz," + ",".join(f"ch{i}" for i in range(stream.channel_count))]
    for k in range(SPECTRUM_BINS):
        lines.append(f"{freqs[k]:.4f}," + ",".join(f"{acc[i, k]:.10g}"
                                                   for i in range(stream.channel_count)))
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    return text


def threshold_sweep(noise_stream: DecimatedStream, signal_stream: DecimatedStream,
                    gains=None) -> dict:
    """Propose a gate threshold from labeled noise-only and signal recordings.

    Window energies are gain-compensated maxima across channels, matching
    the gate.  The proposal is the log-midpoint between the loudest noise
    window and the quietest signal window; `clean` says whether that
    separates them perfectly.
    """
    def window_stats(stream):
        wins = energy_windows(stream.samples, stream.sample_rate)
        if not wins:
            raise ValueError("stream shorter than one 200 ms window")
        g = np.ones(stream.channel_count) if gains is None else np.asarray(gains)
        return np.array([(w.energies / g**2).max() for w in wins])

    noise_e = window_stats(noise_stream)
    signal_e = window_stats(signal_stream)
    noise_max = float(noise_e.max())
    signal_min = float(signal_e.min())
    proposed = float(np.sqrt(noise_max * signal_min))
    return {
        "noise_windows": int(noise_e.size),
        "signal_windows": int(signal_e.size),
        "noise_energy_max": noise_max,
        "signal_energy_min": signal_min,
        "proposed_threshold": proposed,
        "clean": bool(signal_min > noise_max),
        "margin_db": float(10.0 * np.log10(signal_min / noise_max))
        if noise_max > 0 else float("inf"),
    }
