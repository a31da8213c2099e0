"""Recordings, windowing, class balancing and cross-validation folds."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

NORMAL = "normal"
ABNORMAL = "abnormal"
UNLABELED = "unlabeled"

REAL = "real"
SYNTHETIC = "synthetic"

# All downstream processing runs at 2 kHz on 1 s windows hopped by 0.1 s.
RATE_HZ = 2000
WINDOW_SAMPLES = 2000
HOP_SAMPLES = 200


@dataclass
class Recording:
    """A single heart sound recording."""

    id: str
    samples: np.ndarray
    sample_rate_hz: int
    label: str = UNLABELED
    source: str = REAL

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class Window:
    """A 1 s excerpt of a recording, identified by its hop index."""

    recording_id: str
    index: int
    start_s: float
    samples: np.ndarray
    label: str = UNLABELED

    @property
    def window_id(self) -> str:
        return f"{self.recording_id}#{self.index:04d}"


@dataclass
class FoldPlan:
    """Recording-stratified folds over a balanced database, as window ids."""

    k: int
    folds: list = field(default_factory=list)  # (train_ids, val_ids) tuples
    rest_ids: tuple = ()


def load_wav(path) -> Recording:
    """Parse a PCM WAV file into a Recording.

    Only mono 16-bit PCM is accepted; anything else raises DataError naming
    the offending field. Samples are scaled by 1/32768 into [-1, 1).
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    if len(raw) < 12 or raw[0:4] != b"RIFF":
        raise DataError(f"{path}: not a RIFF file")
    if raw[8:12] != b"WAVE":
        raise DataError(f"{path}: not a WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_size]
        if len(body) < chunk_size:
            raise DataError(f"{path}: truncated {chunk_id.decode('ascii', 'replace')} chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None:
        raise DataError(f"{path}: missing fmt chunk")
    if data is None:
        raise DataError(f"{path}: missing data chunk")
    if len(fmt) < 16:
        raise DataError(f"{path}: fmt chunk too short")
    audio_format, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if audio_format != 1:
        raise DataError(f"{path}: unsupported audio format {audio_format} (PCM required)")
    if channels != 1:
        raise DataError(f"{path}: unsupported channel count {channels}")
    if bits != 16:
        raise DataError(f"{path}: unsupported bit depth {bits}")

    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    stem = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    if stem.lower().endswith(".wav"):
        stem = stem[:-4]
    return Recording(id=stem, samples=samples, sample_rate_hz=sample_rate)


def write_wav(path, samples: np.ndarray, sample_rate_hz: int) -> None:
    """Write float samples in [-1, 1] as a mono 16-bit PCM WAV file."""
    ints = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, sample_rate_hz, sample_rate_hz * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def load_labels(path) -> dict:
    """Read a reference CSV of `id,-1|1` lines into {id: NORMAL|ABNORMAL}."""
    labels = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read labels {path}: {exc}")
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'id,label', got {line!r}")
            rec_id, lab = parts
            if rec_id in labels:
                raise DataError(f"{path}:{lineno}: duplicate id {rec_id}")
            if lab == "-1":
                labels[rec_id] = NORMAL
            elif lab == "1":
                labels[rec_id] = ABNORMAL
            else:
                raise DataError(f"{path}:{lineno}: invalid label {lab} for {rec_id}")
    return labels


def resample(recording: Recording, target_hz: int) -> Recording:
    """Linearly interpolate a recording onto a new sample rate.

    Output length is round(n * target / source). Equal rates return a copy
    with bitwise-identical samples.
    """
    src = recording.samples
    if recording.sample_rate_hz == target_hz:
        out = src.copy()
    else:
        n_out = int(round(len(src) * target_hz / recording.sample_rate_hz))
        positions = np.arange(n_out) * (recording.sample_rate_hz / target_hz)
        out = np.interp(positions, np.arange(len(src)), src)
    return Recording(id=recording.id, samples=out, sample_rate_hz=target_hz,
                     label=recording.label, source=recording.source)


def window_signal(recording: Recording) -> list:
    """Cut a 2 kHz recording into 1 s windows hopped by 0.1 s.

    A recording shorter than one window yields no windows; otherwise the
    window count is floor((n - 2000) / 200) + 1.
    """
    if recording.sample_rate_hz != RATE_HZ:
        raise DataError(f"{recording.id}: windowing expects {RATE_HZ} Hz, "
                        f"got {recording.sample_rate_hz}")
    n = len(recording.samples)
    if n < WINDOW_SAMPLES:
        return []
    count = (n - WINDOW_SAMPLES) // HOP_SAMPLES + 1
    windows = []
    for i in range(count):
        lo = i * HOP_SAMPLES
        windows.append(Window(
            recording_id=recording.id,
            index=i,
            start_s=i * (HOP_SAMPLES / RATE_HZ),
            samples=recording.samples[lo:lo + WINDOW_SAMPLES].copy(),
            label=recording.label,
        ))
    return windows


def build_balanced_db(windows, seed: int = 0):
    """Balance abnormal and normal windows into (bal_db, rest).

    Every abnormal window is kept. Normal windows are drawn round-robin over
    normal recordings (one window per recording per pass, seeded shuffle
    within each recording) until the counts match; leftovers become `rest`.
    """
    abnormal = sorted((w for w in windows if w.label == ABNORMAL),
                      key=lambda w: (w.recording_id, w.index))
    by_rec = {}
    for w in windows:
        if w.label == NORMAL:
            by_rec.setdefault(w.recording_id, []).append(w)
    if not abnormal:
        raise DataError("cannot balance: no abnormal windows")
    if not by_rec:
        raise DataError("cannot balance: no normal windows")

    rng = np.random.default_rng(seed)
    queues = []
    for rec_id in sorted(by_rec):
        q = sorted(by_rec[rec_id], key=lambda w: w.index)
        order = rng.permutation(len(q))
        queues.append([q[j] for j in order])

    target = len(abnormal)
    total_normal = sum(len(q) for q in queues)
    if total_normal < target:
        raise DataError(f"cannot balance: {total_normal} normal windows "
                        f"for {target} abnormal")
    picked = []
    depth = 0
    while len(picked) < target:
        for q in queues:
            if depth < len(q):
                picked.append(q[depth])
                if len(picked) == target:
                    break
        depth += 1

    chosen = {id(w) for w in picked}
    rest = [w for q in queues for w in sorted(q, key=lambda x: x.index)
            if id(w) not in chosen]
    rest.sort(key=lambda w: (w.recording_id, w.index))
    return abnormal + picked, rest


def make_folds(bal_db, k: int = 10, seed: int = 0, rest=()) -> FoldPlan:
    """Split a balanced database into k recording-stratified folds.

    Recordings (not windows) are dealt into folds per class, so no recording
    straddles a train/validation boundary. Each class needs at least k
    recordings.
    """
    recs = {}
    for w in bal_db:
        recs.setdefault(w.recording_id, set()).add(w.label)
    for rec_id, labs in recs.items():
        if len(labs) != 1:
            raise DataError(f"recording {rec_id} carries mixed labels")
    by_class = {NORMAL: sorted(r for r, labs in recs.items() if NORMAL in labs),
                ABNORMAL: sorted(r for r, labs in recs.items() if ABNORMAL in labs)}
    for lab, ids in by_class.items():
        if len(ids) < k:
            raise DataError(f"class {lab} has {len(ids)} recordings, "
                            f"need at least k={k}")

    rng = np.random.default_rng(seed)
    fold_of = {}
    for ids in by_class.values():
        ids = list(ids)
        rng.shuffle(ids)
        for pos, rec_id in enumerate(ids):
            fold_of[rec_id] = pos % k

    folds = []
    for i in range(k):
        val = tuple(w.window_id for w in bal_db if fold_of[w.recording_id] == i)
        train = tuple(w.window_id for w in bal_db if fold_of[w.recording_id] != i)
        folds.append((train, val))
    return FoldPlan(k=k, folds=folds, rest_ids=tuple(w.window_id for w in rest))


def write_window_manifest(windows, path) -> None:
    """Write windows as `recording_id,window_index,start_s,label` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("recording_id,window_index,start_s,label\n")
        for w in windows:
            fh.write(f"{w.recording_id},{w.index},{w.start_s:.1f},{w.label}\n")


def read_window_manifest(path) -> list:
    """Read a window manifest back as (recording_id, index, start_s, label) rows."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "recording_id,window_index,start_s,label":
            raise DataError(f"{path}: unrecognized manifest header {header!r}")
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            rows.append((parts[0], int(parts[1]), float(parts[2]), parts[3]))
    return rows


def write_fold_plan(plan: FoldPlan, path) -> None:
    """Write a fold plan as `fold,role,window_id` lines.

    The shared rest partition is written once under the fold column `all`.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k={plan.k}\n")
        for i, (train, val) in enumerate(plan.folds):
            for wid in train:
                fh.write(f"{i},train,{wid}\n")
            for wid in val:
                fh.write(f"{i},val,{wid}\n")
        for wid in plan.rest_ids:
            fh.write(f"all,rest,{wid}\n")


def read_fold_plan(path) -> FoldPlan:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("k="):
            raise DataError(f"{path}: missing k= header")
        k = int(header[2:])
        train = [[] for _ in range(k)]
        val = [[] for _ in range(k)]
        rest = []
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            fold, role, wid = line.split(",", 2)
            if role == "rest":
                rest.append(wid)
            elif role == "train":
                train[int(fold)].append(wid)
            elif role == "val":
                val[int(fold)].append(wid)
            else:
                raise DataError(f"{path}:{lineno}: unknown role {role!r}")
    return FoldPlan(k=k, folds=[(tuple(t), tuple(v)) for t, v in zip(train, val)],
                    rest_ids=tuple(rest))
