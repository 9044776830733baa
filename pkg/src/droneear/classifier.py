"""Spectral-signature nearest-neighbor classifier with temporal confirmation.

A signature is the per-bin mean and standard deviation of a UAV's
normalized PSD.  Frames are labeled by minimum inverse-variance-weighted
squared distance (diagonal Mahalanobis — the canonical weighted-Euclidean
reading of a mean+std template).  Frame labels are folded into one decision
per second, and a detection is only reported when two consecutive seconds
agree on the same UAV with both distances under the library threshold.

The library holds at most 32 slots; means and stds are stored as f32 on
disk (flash-budget mirror) and widened to f64 in memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .frontend import SPECTRUM_BINS

MAX_SLOTS = 32
STD_FLOOR = 1e-6
MIN_TRAIN_FRAMES = 10
LIBRARY_MAGIC = b"DSIG"
LIBRARY_VERSION = 1
_LIB_HEADER = struct.Struct("<4sHBd")   # magic, version, slot_count, threshold


class ClassifierError(Exception):
    pass


class InsufficientTrainingDataError(ClassifierError):
    pass


class EmptyLibraryError(ClassifierError):
    """Classification asked of a library with no slots."""


class LibraryFullError(ClassifierError):
    pass


class SequenceError(ClassifierError):
    """Per-second decisions arrived out of order."""


@dataclass
class Signature:
    name: str
    mean: np.ndarray            # (1024,) normalized PSD, L1 = 1
    std: np.ndarray             # (1024,) >= STD_FLOOR
    train_frames: int
    id: int | None = None       # slot index, assigned when added to a library

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (SPECTRUM_BINS,) or self.std.shape != (SPECTRUM_BINS,):
            raise ValueError(f"mean and std must have {SPECTRUM_BINS} bins")
        # small slack: f32 storage rounds the floor itself down by ~3e-9 relative
        if np.any(self.std < STD_FLOOR * (1.0 - 1e-6)):
            raise ValueError(f"std below floor {STD_FLOOR}")
        if abs(self.mean.sum() - 1.0) > 1e-6:
            raise ValueError("mean must be a normalized PSD")


def train_signature(frames, name: str) -> Signature:
    """Per-bin sample mean and standard deviation over normalized PSD frames.

    Uses the n-1 denominator; zero-variance bins are floored at STD_FLOOR
    so the distance never divides by zero.  The mean is renormalized to
    unit mass (averaging preserves it only up to rounding).
    """
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if x.shape[0] < MIN_TRAIN_FRAMES:
        raise InsufficientTrainingDataError(
            f"{x.shape[0]} frames < minimum {MIN_TRAIN_FRAMES}"
        )
    if x.shape[1] != SPECTRUM_BINS:
        raise ValueError(f"frames must have {SPECTRUM_BINS} bins")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0, ddof=1), STD_FLOOR)
    mean = mean / mean.sum()
    return Signature(name=name, mean=mean, std=std, train_frames=x.shape[0])


@dataclass
class SignatureLibrary:
    slots: list = field(default_factory=list)
    distance_threshold: float = np.inf
    version: int = LIBRARY_VERSION

    def __post_init__(self):
        if len(self.slots) > MAX_SLOTS:
            raise LibraryFullError(f"{len(self.slots)} slots exceed the {MAX_SLOTS}-slot budget")

    def add(self, sig: Signature) -> int:
        """Add a signature; assigns the lowest free slot id unless it has one."""
        if len(self.slots) >= MAX_SLOTS:
            raise LibraryFullError(f"library already holds {MAX_SLOTS} signatures")
        used = {s.id for s in self.slots}
        if sig.id is None:
            sig.id = min(set(range(MAX_SLOTS)) - used)
        elif sig.id in used:
            raise ValueError(f"slot id {sig.id} already taken")
        elif not 0 <= sig.id < MAX_SLOTS:
            raise ValueError(f"slot id {sig.id} out of [0, {MAX_SLOTS})")
        self.slots.append(sig)
        self.slots.sort(key=lambda s: s.id)
        return sig.id

    def remove(self, slot_id: int) -> Signature:
        for k, s in enumerate(self.slots):
            if s.id == slot_id:
                return self.slots.pop(k)
        raise KeyError(f"no signature in slot {slot_id}")

    def get(self, slot_id: int) -> Signature:
        for s in self.slots:
            if s.id == slot_id:
                return s
        raise KeyError(f"no signature in slot {slot_id}")

    def name_of(self, slot_id: int) -> str:
        return self.get(slot_id).name

    def __len__(self):
        return len(self.slots)

    def _stacked(self):
        means = np.stack([s.mean for s in self.slots])
        stds = np.stack([s.std for s in self.slots])
        return means, stds


def classify(psd, library: SignatureLibrary):
    """Nearest signature by weighted squared distance.

    d_s = sum_k ((psd[k] - mean_s[k]) / std_s[k])^2; returns (slot_id,
    distance) of the argmin, ties to the lowest slot id (slots are kept
    id-sorted, and argmin takes the first minimum).
    """
    if not library.slots:
        raise EmptyLibraryError("cannot classify against an empty library")
    psd = np.asarray(psd, dtype=np.float64)
    if psd.shape != (SPECTRUM_BINS,):
        raise ValueError(f"psd must have {SPECTRUM_BINS} bins")
    means, stds = library._stacked()
    d = kernels.weighted_sq_distances(psd, means, stds)
    k = int(np.argmin(d))
    return library.slots[k].id, float(d[k])


def calibrate_threshold(self_distances, percentile: float = 99.0) -> float:
    """Distance threshold from training self-distances (their 99th percentile)."""
    d = np.asarray(self_distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no self-distances given")
    return float(np.percentile(d, percentile))


@dataclass(frozen=True)
class SecondDecision:
    second: int
    uav_id: int
    distance: float
    frame_count: int = 0


def decide_second(frame_results, second: int = 0) -> SecondDecision:
    """Fold one second's frame labels into a single decision.

    Majority vote over labels (ties to the lowest id), distance = median
    distance among the winning label's frames.
    """
    results = list(frame_results)
    if not results:
        raise ValueError("a second decision needs at least one frame result")
    ids = np.array([r[0] for r in results])
    dists = np.array([r[1] for r in results])
    labels, counts = np.unique(ids, return_counts=True)
    winner = int(labels[counts == counts.max()].min())
    return SecondDecision(
        second=second,
        uav_id=winner,
        distance=float(np.median(dists[ids == winner])),
        frame_count=len(results),
    )


@dataclass
class TemporalState:
    last_second: int | None = None
    last_id: int | None = None
    last_distance: float | None = None
    confirmed: bool = False


@dataclass(frozen=True)
class DetectionEvent:
    """A UAV identity confirmed over two consecutive seconds."""

    t: float                    # end of the confirming second
    uav_id: int
    uav_name: str
    distance: float             # confirming second's distance
    prev_distance: float
    second_pair: tuple          # (s, s+1)
    doa: object | None = None   # DoaEstimate attached by the pipeline

    def to_json_dict(self) -> dict:
        doc = {
            "t": self.t,
            "event": "uav-confirmed",
            "uav_id": self.uav_id,
            "uav_name": self.uav_name,
            "distance": self.distance,
            "prev_distance": self.prev_distance,
            "second_pair": list(self.second_pair),
        }
        if self.doa is not None:
            doc["doa"] = self.doa.to_json_dict()
        return doc


def temporal_confirm(state: TemporalState, decision: SecondDecision,
                     threshold: float, name: str = ""):
    """Advance the two-consecutive-seconds rule by one per-second decision.

    Emits a DetectionEvent iff this second and the previous one picked the
    same UAV and both distances are under the threshold.  A gap in second
    indices (nothing classified in between) breaks consecutiveness and just
    restarts; a second index at or before the last one is a SequenceError.
    Returns (state, event_or_None); state is updated in place regardless.
    """
    if state.last_second is not None and decision.second <= state.last_second:
        raise SequenceError(
            f"second {decision.second} arrived after second {state.last_second}"
        )
    event = None
    consecutive = state.last_second is not None and decision.second == state.last_second + 1
    if (
        consecutive
        and state.last_id == decision.uav_id
        and state.last_distance < threshold
        and decision.distance < threshold
    ):
        event = DetectionEvent(
            t=float(decision.second + 1),
            uav_id=decision.uav_id,
            uav_name=name,
            distance=decision.distance,
            prev_distance=state.last_distance,
            second_pair=(decision.second - 1, decision.second),
        )
        state.confirmed = True
    else:
        state.confirmed = False
    state.last_second = decision.second
    state.last_id = decision.uav_id
    state.last_distance = decision.distance
    return state, event


def save_library(path, library: SignatureLibrary) -> None:
    """Write the binary library format (little-endian, f32 payload)."""
    blob = bytearray()
    threshold = library.distance_threshold
    blob += _LIB_HEADER.pack(LIBRARY_MAGIC, library.version, len(library.slots),
                             float(threshold))
    for s in library.slots:
        name = s.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValueError("signature name too long")
        blob += struct.pack("<BH", s.id, len(name)) + name
        blob += s.mean.astype("<f4").tobytes()
        blob += s.std.astype("<f4").tobytes()
        blob += struct.pack("<I", s.train_frames)
    Path(path).write_bytes(bytes(blob))


def load_library(path) -> SignatureLibrary:
    data = Path(path).read_bytes()
    if len(data) < _LIB_HEADER.size:
        raise ValueError(f"{path}: truncated library header")
    magic, version, count, threshold = _LIB_HEADER.unpack_from(data)
    if magic != LIBRARY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != LIBRARY_VERSION:
        raise ValueError(f"{path}: library version {version} != {LIBRARY_VERSION}")
    off = _LIB_HEADER.size
    lib = SignatureLibrary(distance_threshold=threshold, version=version)
    vec = 4 * SPECTRUM_BINS
    for _ in range(count):
        slot_id, name_len = struct.unpack_from("<BH", data, off)
        off += 3
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        mean = np.frombuffer(data, dtype="<f4", count=SPECTRUM_BINS, offset=off).astype(np.float64)
        off += vec
        std = np.frombuffer(data, dtype="<f4", count=SPECTRUM_BINS, offset=off).astype(np.float64)
        off += vec
        (train_frames,) = struct.unpack_from("<I", data, off)
        off += 4
        # no renormalize/re-floor here: load -> save must reproduce the bytes
        sig = Signature(name=name, mean=mean, std=std, train_frames=train_frames, id=slot_id)
        lib.add(sig)
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return lib
