"""Command-line entry points: drone-ear <command>.

Commands
  simulate         render a scene config to raw ADC / WAV plus ground truth
  calibrate        recover array geometry and gains from a pulse recording
  train            add a spectral signature to a library file
  classify         per-second nearest-signature decisions for one input
  run              full pipeline: gate, classify, confirm, DOA, events
  threshold-sweep  propose a gate threshold from labeled recordings
  plot             stream-averaged per-channel PSD as CSV
  library          list / add / remove signature library slots

Machine output goes to stdout (or --output); progress and summaries go to
stderr.  Exit code 0 on success, 2 on startup/usage errors, 1 on processing
errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import load_decimated, write_raw_adc, write_wav
from .calibration import (
    CalibrationError,
    calibrate,
    load_geometry,
    save_geometry,
    split_pulses,
)
from .classifier import (
    MAX_SLOTS,
    SignatureLibrary,
    calibrate_threshold,
    classify as classify_psd,
    decide_second,
    load_library,
    save_library,
    train_signature,
)
from .doa import energy_windows, power_gate
from .frontend import AUDIO_RATE, DecimatedStream, iter_frames, normalize_psd
from .pipeline import (
    PipelineConfig,
    channel_mean_psd,
    emit_plot_data,
    run_pipeline,
    threshold_sweep,
)
from .simulator import (
    SceneError,
    endfire_ring_positions,
    format_truth,
    parse_scene_config,
    pulse_scene,
    render_scene,
    render_to_adc,
    TRIANGLE_ARRAY,
)

DEFAULT_WAV_SCALE = 0.2


def _err(msg: str) -> None:
    print(f"drone-ear: {msg}", file=sys.stderr)


def _cmd_simulate(args) -> int:
    text = Path(args.scene).read_text()
    kv_lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    is_pulse_scene = any(ln.startswith("pulses") and "=" in ln for ln in kv_lines if ln)
    if is_pulse_scene:
        return _simulate_pulses(args, text)
    config = parse_scene_config(text)
    render = render_scene(config)
    wrote = []
    if args.raw:
        write_raw_adc(args.raw, render_to_adc(render))
        wrote.append(args.raw)
    if args.wav:
        write_wav(args.wav, args.wav_scale * render.audio, AUDIO_RATE)
        wrote.append(args.wav)
    if not wrote:
        _err("simulate: give --raw and/or --wav")
        return 2
    if args.truth:
        Path(args.truth).write_text(format_truth(render.truth))
        wrote.append(args.truth)
    _err("wrote " + ", ".join(wrote))
    return 0


def _simulate_pulses(args, text: str) -> int:
    kv = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    mics = TRIANGLE_ARRAY.copy()
    if "mics" in kv:
        mics = np.array([[float(x) for x in part.split(",")]
                         for part in kv["mics"].split(";") if part.strip()])
    gains = None
    if "gains" in kv:
        gains = np.array([float(x) for x in kv["gains"].split(",")])
    if kv["pulses"] == "ring":
        positions = endfire_ring_positions(
            mics, radius=float(kv.get("pulse_radius", 2.0)),
            min_count=int(kv.get("pulse_count", 10)))
    else:
        positions = np.array([[float(x) for x in part.split(",")]
                              for part in kv["pulses"].split(";") if part.strip()])
    noise_db = None
    if kv.get("noise_db", "none").lower() not in ("none", ""):
        noise_db = float(kv["noise_db"])
    rec = pulse_scene(positions, mics, gains=gains, noise_db=noise_db,
                      seed=int(kv.get("seed", 0)))
    stream = np.concatenate(rec.pulses, axis=1)
    if not args.wav:
        _err("simulate: pulse scenes need --wav")
        return 2
    # 24-bit: keep WAV quantization far below the sub-sample TDOA error budget
    write_wav(args.wav, args.wav_scale * stream, rec.sample_rate, bits=24)
    _err(f"wrote {args.wav} ({rec.pulse_count} pulses, {stream.shape[1] / rec.sample_rate:.2f} s)")
    if args.truth:
        Path(args.truth).write_text(json.dumps({
            "pulse_positions": positions.tolist(),
            "mic_positions": mics.tolist(),
            "gains": None if gains is None else gains.tolist(),
        }, indent=2) + "\n")
    return 0


def _cmd_calibrate(args) -> int:
    stream = load_decimated(args.input, fmt=args.format)
    recordings = split_pulses(stream.samples, stream.sample_rate,
                              min_gap_s=args.min_gap)
    report = calibrate(recordings, c=args.c)
    save_geometry(args.out, report.geometry)
    _err(f"calibrated {report.geometry.mic_count} mics from "
         f"{recordings.pulse_count} pulses ({len(report.discarded_pulses)} discarded)")
    _err(f"aperture {report.geometry.aperture:.3f} m, gains "
         + np.array2string(report.geometry.gains, precision=3))
    if not report.spread_ok.all():
        _err("warning: some mic pairs saw a narrow pulse-direction spread; "
             "their distances may be underestimated")
    _err(f"wrote {args.out}")
    return 0


def _gated_psds(stream: DecimatedStream, threshold, gains):
    """Normalized channel-mean PSDs of gated-on frames (all frames if no threshold)."""
    wins = energy_windows(stream.samples, stream.sample_rate)
    gate = [True] * len(wins) if threshold is None else [
        power_gate(w, threshold, gains) for w in wins]
    out = []
    for f in iter_frames(stream):
        w = min((f.start_sample + 1024) // 4375, len(wins) - 1) if wins else 0
        if wins and not gate[w]:
            continue
        psd = channel_mean_psd(f.psd)
        if psd.sum() > 0:
            out.append((f.second, normalize_psd(psd)))
    return out


def _cmd_train(args) -> int:
    lib = load_library(args.library) if Path(args.library).exists() else SignatureLibrary()
    gains = load_geometry(args.geometry).gains if args.geometry else None
    frames = []
    for path in args.inputs:
        stream = load_decimated(path)
        frames.extend(psd for _, psd in _gated_psds(stream, args.gate_threshold, gains))
    if not frames:
        _err("train: no usable frames (gate too high?)")
        return 1
    sig = train_signature(np.array(frames), args.name)
    slot = lib.add(sig)
    if args.calibrate_threshold:
        self_d = [classify_psd(p, SignatureLibrary(slots=[sig]))[1] for p in frames]
        new_t = calibrate_threshold(self_d)
        old_t = lib.distance_threshold
        lib.distance_threshold = new_t if not np.isfinite(old_t) else max(old_t, new_t)
        _err(f"distance threshold -> {lib.distance_threshold:.1f}")
    save_library(args.library, lib)
    _err(f"trained '{args.name}' in slot {slot} from {len(frames)} frames "
         f"-> {args.library} ({len(lib)}/{MAX_SLOTS} slots)")
    return 0


def _cmd_classify(args) -> int:
    lib = load_library(args.library)
    gains = load_geometry(args.geometry).gains if args.geometry else None
    stream = load_decimated(args.input, fmt=args.format)
    by_second: dict[int, list] = {}
    for second, psd in _gated_psds(stream, args.gate_threshold, gains):
        by_second.setdefault(second, []).append(classify_psd(psd, lib))
    lines = []
    for s in sorted(by_second):
        d = decide_second(by_second[s], second=s)
        lines.append(json.dumps({
            "second": d.second, "uav_id": d.uav_id, "uav_name": lib.name_of(d.uav_id),
            "distance": d.distance, "frames": d.frame_count,
        }, separators=(",", ":")))
    print("\n".join(lines))
    return 0


def _cmd_run(args) -> int:
    config = PipelineConfig(
        input=args.input,
        geometry=args.geometry,
        library=args.library,
        gate_threshold=args.gate_threshold,
        fmt=args.format,
        scan_step_deg=args.scan_step_deg,
        noise_lambda=args.noise_lambda,
        output=args.output,
        beamform=not args.no_beamform,
    )
    result = run_pipeline(config)
    print(json.dumps(result.summary()), file=sys.stderr)
    return 0


def _cmd_threshold_sweep(args) -> int:
    gains = load_geometry(args.geometry).gains if args.geometry else None
    noise = load_decimated(args.noise)
    signal = load_decimated(args.signal)
    stats = threshold_sweep(noise, signal, gains=gains)
    print(json.dumps(stats, indent=2))
    if not stats["clean"]:
        _err("warning: noise and signal window energies overlap; no clean threshold")
    return 0


def _cmd_plot(args) -> int:
    stream = load_decimated(args.input, fmt=args.format)
    text = emit_plot_data(stream, args.out)
    if args.out:
        _err(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_library(args) -> int:
    if args.action == "list":
        lib = load_library(args.library)
        print(f"# {args.library}: {len(lib)}/{MAX_SLOTS} slots, "
              f"threshold {lib.distance_threshold:g}")
        for s in lib.slots:
            print(f"{s.id:3d}  {s.name:24s}  {s.train_frames} frames")
        return 0
    if args.action == "add":
        dest = load_library(args.library) if Path(args.library).exists() else SignatureLibrary()
        src = load_library(args.source)
        for sig in src.slots:
            sig.id = None           # re-slot into the destination
            dest.add(sig)
        save_library(args.library, dest)
        _err(f"added {len(src)} signature(s) -> {args.library} ({len(dest)}/{MAX_SLOTS})")
        return 0
    if args.action == "remove":
        lib = load_library(args.library)
        sig = lib.remove(args.slot)
        save_library(args.library, lib)
        _err(f"removed slot {args.slot} ('{sig.name}') from {args.library}")
        return 0
    raise ValueError(f"unknown library action {args.action!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drone-ear",
                                description="acoustic UAV detection pipeline")
    p.add_argument("--version", action="version", version=f"drone-ear {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="render a scene config")
    sim.add_argument("scene", help="key=value scene config file")
    sim.add_argument("--raw", help="write raw ADC capture here")
    sim.add_argument("--wav", help="write decimated-rate WAV here")
    sim.add_argument("--truth", help="write ground-truth JSON here")
    sim.add_argument("--wav-scale", type=float, default=DEFAULT_WAV_SCALE,
                     help="linear scale for WAV output (default %(default)s)")
    sim.set_defaults(fn=_cmd_simulate)

    calp = sub.add_parser("calibrate", help="geometry+gains from a pulse recording")
    calp.add_argument("input", help="pulse recording (WAV or raw ADC)")
    calp.add_argument("--out", required=True, help="geometry JSON to write")
    calp.add_argument("--format", choices=["raw-adc", "wav"])
    calp.add_argument("--c", type=float, default=343.0, help="speed of sound, m/s")
    calp.add_argument("--min-gap", type=float, default=0.1,
                      help="minimum inter-pulse silence, seconds")
    calp.set_defaults(fn=_cmd_calibrate)

    tr = sub.add_parser("train", help="train a signature into a library")
    tr.add_argument("library", help="library file (created if missing)")
    tr.add_argument("inputs", nargs="+", help="training recordings")
    tr.add_argument("--name", required=True)
    tr.add_argument("--gate-threshold", type=float, default=None,
                    help="train only on gated-on frames (default: all frames)")
    tr.add_argument("--geometry", help="geometry JSON for gain compensation")
    tr.add_argument("--calibrate-threshold", action="store_true",
                    help="set the library distance threshold from training self-distances")
    tr.set_defaults(fn=_cmd_train)

    cl = sub.add_parser("classify", help="per-second decisions for one input")
    cl.add_argument("input")
    cl.add_argument("--library", required=True)
    cl.add_argument("--geometry")
    cl.add_argument("--gate-threshold", type=float, default=None)
    cl.add_argument("--format", choices=["raw-adc", "wav"])
    cl.set_defaults(fn=_cmd_classify)

    run = sub.add_parser("run", help="full detection pipeline")
    run.add_argument("input")
    run.add_argument("--geometry", required=True)
    run.add_argument("--library", required=True)
    run.add_argument("--gate-threshold", type=float, required=True)
    run.add_argument("--scan-step-deg", type=float, default=1.0)
    run.add_argument("--noise-lambda", type=float, default=0.05)
    run.add_argument("--output", help="JSONL output path (default stdout)")
    run.add_argument("--format", choices=["raw-adc", "wav"])
    run.add_argument("--no-beamform", action="store_true",
                     help="energy DOA only; skip the delay-and-sum refinement")
    run.set_defaults(fn=_cmd_run)

    ts = sub.add_parser("threshold-sweep", help="propose a gate threshold")
    ts.add_argument("--noise", required=True, help="noise-only recording")
    ts.add_argument("--signal", required=True, help="recording with the target present")
    ts.add_argument("--geometry")
    ts.set_defaults(fn=_cmd_threshold_sweep)

    pl = sub.add_parser("plot", help="stream-averaged PSD as CSV")
    pl.add_argument("input")
    pl.add_argument("--out", help="CSV path (default stdout)")
    pl.add_argument("--format", choices=["raw-adc", "wav"])
    pl.set_defaults(fn=_cmd_plot)

    lb = sub.add_parser("library", help="inspect or edit a signature library")
    lbsub = lb.add_subparsers(dest="action", required=True)
    ll = lbsub.add_parser("list")
    ll.add_argument("library")
    la = lbsub.add_parser("add")
    la.add_argument("library", help="destination library")
    la.add_argument("source", help="library whose slots to add")
    lr = lbsub.add_parser("remove")
    lr.add_argument("library")
    lr.add_argument("--slot", type=int, required=True)
    lb.set_defaults(fn=_cmd_library)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        _err(str(exc))
        return 2
    except (CalibrationError, SceneError) as exc:
        _err(str(exc))
        return 1
    except ValueError as exc:
        _err(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
