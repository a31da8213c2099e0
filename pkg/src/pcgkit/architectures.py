"""Model variants, the heuristic S1/S2 segmenter, and input assembly.

The experiment-I variants share a convolutional encoder that flattens to
exactly 360 features; `model1` taps a 100-wide segmenter embedding into the
dense head (giving the documented 460-feature intermediate, segmenter
features first), `model2` tiles the segmenter's frame states as an extra
input channel, `model3` is the encoder alone. Starred variants take the
single-channel cepstral map instead of the 3-channel one. The `final`
variant is the segmentation-free wide-band model on [26 x 99 x 1] maps.
"""

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .errors import ConfigError, DataError, ShapeError
from .features import build_feature_map
from .net import Concat, Conv2D, Dense, Flatten, MaxPool, NetworkSpec
from .tensorio import load_tensor, save_tensor

ENCODER_WIDTH = 360
EMBEDDING_WIDTH = 100
N_FRAMES = 99

# frame-state code per segmenter phase
STATE_S1 = 1.0
STATE_S2 = 0.66
STATE_SYSTOLE = 0.33
STATE_DIASTOLE = 0.0

S1_HALF_WIDTH_S = 0.05
S2_HALF_WIDTH_S = 0.04


@dataclass
class ModelVariant:
    name: str
    feature_variant: str
    input_shape: tuple
    uses_embedding: bool = False
    uses_state_channel: bool = False


VARIANTS = {
    "model1": ModelVariant("model1", "exp1_6band_3ch", (6, 99, 3), uses_embedding=True),
    "model1_star": ModelVariant("model1_star", "exp1_6band_1ch", (6, 99, 1),
                                uses_embedding=True),
    "model2": ModelVariant("model2", "exp1_6band_3ch", (6, 99, 4),
                           uses_state_channel=True),
    "model2_star": ModelVariant("model2_star", "exp1_6band_1ch", (6, 99, 2),
                                uses_state_channel=True),
    "model3": ModelVariant("model3", "exp1_6band_3ch", (6, 99, 3)),
    "model3_star": ModelVariant("model3_star", "exp1_6band_1ch", (6, 99, 1)),
    "final": ModelVariant("final", "exp2_26band_1ch", (26, 99, 1)),
}


def get_variant(name: str) -> ModelVariant:
    canonical = name.replace("*", "_star")
    if canonical not in VARIANTS:
        raise ConfigError(f"unknown model variant {name!r}, "
                          f"expected one of {sorted(VARIANTS)}")
    return VARIANTS[canonical]


def _dense_head():
    return [Dense(128, "relu", dropout=0.5, max_norm=3.0),
            Dense(64, "relu", dropout=0.5, max_norm=3.0),
            Dense(1, "sigmoid")]


def _narrowband_encoder():
    return [Conv2D(20, (3, 3), dropout=0.2, max_norm=2.7),
            MaxPool((2, 2)),
            Conv2D(40, (3, 3), dropout=0.2, max_norm=2.7),
            MaxPool((3, 4)),
            Conv2D(30, (1, 1), dropout=0.2, max_norm=2.7),
            Flatten()]


def build_model(name: str) -> NetworkSpec:
    """Build the named variant's network spec and check its widths."""
    variant = get_variant(name)
    if variant.name == "final":
        layers = [Conv2D(16, (3, 3), dropout=0.2, max_norm=2.7),
                  MaxPool((2, 2)),
                  Conv2D(32, (3, 3), dropout=0.2, max_norm=2.7),
                  MaxPool((2, 2)),
                  Conv2D(60, (3, 3), dropout=0.2, max_norm=2.7),
                  MaxPool((2, 4)),
                  Flatten()] + _dense_head()
        spec = NetworkSpec(variant.input_shape, layers)
        flat = spec.shapes[6]
        if flat != (1080,):
            raise ShapeError(f"final encoder flattens to {flat}, expected 1080")
        return spec

    layers = _narrowband_encoder()
    if variant.uses_embedding:
        layers = layers + [Concat(EMBEDDING_WIDTH)]
    layers = layers + _dense_head()
    spec = NetworkSpec(variant.input_shape, layers)
    flat = spec.shapes[5]
    if flat != (ENCODER_WIDTH,):
        raise ShapeError(f"encoder flattens to {flat}, expected {ENCODER_WIDTH}")
    return spec


@dataclass
class SegmenterOutput:
    frame_states: np.ndarray  # [99] state codes at frame centers
    embedding: np.ndarray     # [100] = states + normalized beat rate
    s1_times: tuple = ()
    s2_times: tuple = ()


def _shannon_envelope(x, fs):
    peak = np.max(np.abs(x))
    if peak <= 0:
        return np.zeros_like(x)
    xn = x / peak
    sq = np.clip(xn * xn, 1e-12, None)
    energy = -sq * np.log(sq)
    width = max(int(0.020 * fs), 1)
    kernel = np.ones(width) / width
    return np.convolve(energy, kernel, mode="same")


def heuristic_segmenter(samples: np.ndarray, fs: int = 2000) -> SegmenterOutput:
    """Label frames S1/S2/systole/diastole from the Shannon energy envelope.

    Peaks at least 200 ms apart are taken as heart sounds; consecutive peaks
    separated by the shorter gap are paired as (S1, S2), since systole is
    briefer than diastole. With no usable peaks the output degrades to all
    diastole and a zero beat rate.
    """
    x = np.asarray(samples, dtype=np.float64)
    duration = len(x) / fs
    env = _shannon_envelope(x, fs)
    top = env.max()
    if top <= 0:
        return _degraded()
    peaks, _ = scipy.signal.find_peaks(env, distance=int(0.200 * fs),
                                       height=0.3 * top, prominence=0.1 * top)
    if len(peaks) == 0:
        return _degraded()
    times = peaks / fs

    s1_times, s2_times = _pair_peaks(times)
    centers = frame_centers()
    states = np.full(N_FRAMES, STATE_DIASTOLE)
    for t_s1 in s1_times:
        states[np.abs(centers - t_s1) <= S1_HALF_WIDTH_S] = STATE_S1
    for t_s2 in s2_times:
        states[np.abs(centers - t_s2) <= S2_HALF_WIDTH_S] = STATE_S2
    for t_s1 in s1_times:
        later = [t for t in s2_times if t > t_s1]
        if later:
            t_s2 = min(later)
            inside = ((centers > t_s1 + S1_HALF_WIDTH_S)
                      & (centers < t_s2 - S2_HALF_WIDTH_S))
            states[inside & (states == STATE_DIASTOLE)] = STATE_SYSTOLE

    if len(s1_times) >= 2:
        rate = 1.0 / float(np.mean(np.diff(sorted(s1_times))))
    else:
        rate = len(times) / 2.0 / duration
    embedding = np.concatenate([states, [rate / 4.0]])
    return SegmenterOutput(frame_states=states, embedding=embedding,
                           s1_times=tuple(s1_times), s2_times=tuple(s2_times))


def _degraded():
    states = np.full(N_FRAMES, STATE_DIASTOLE)
    return SegmenterOutput(frame_states=states,
                           embedding=np.concatenate([states, [0.0]]))


def _pair_peaks(times):
    """Split detected peak times into S1 and S2 lists by gap length."""
    if len(times) == 1:
        return [times[0]], []
    gaps = np.diff(times)
    if len(gaps) >= 2 and gaps.max() - gaps.min() > 0.1 * gaps.mean():
        threshold = (gaps.min() + gaps.max()) / 2.0
    else:
        threshold = 0.45  # lone gap: resting systole is shorter than this
    s1, s2 = [], []
    i = 0
    while i < len(times):
        if i < len(times) - 1 and gaps[i] < threshold:
            s1.append(times[i])
            s2.append(times[i + 1])
            i += 2
        else:
            # peak followed by a long gap: treat as an S1 whose S2 was missed
            s1.append(times[i])
            i += 1
    return s1, s2


def frame_centers() -> np.ndarray:
    """Center time of each analysis frame within a 1 s window."""
    return 0.010 * np.arange(N_FRAMES) + 0.010


def tile_segmentation_channel(states: np.ndarray, n_mel: int) -> np.ndarray:
    """Repeat the frame-state row across mel rows, shaped [n_mel, 99]."""
    states = np.asarray(states)
    if states.shape != (N_FRAMES,):
        raise ShapeError(f"expected {N_FRAMES} frame states, got {states.shape}")
    return np.tile(states, (n_mel, 1))


@dataclass
class WindowDataset:
    """Parallel arrays for a featurized set of windows."""

    window_ids: list
    x: np.ndarray
    aux: np.ndarray | None
    labels: np.ndarray       # 1 = abnormal
    recording_ids: list

    def rows_for(self, ids):
        index = {wid: i for i, wid in enumerate(self.window_ids)}
        missing = [w for w in ids if w not in index]
        if missing:
            raise DataError(f"{len(missing)} window ids not in dataset, "
                            f"first: {missing[0]}")
        return np.array([index[w] for w in ids], dtype=np.intp)


def assemble_inputs(windows, variant_name: str, segmenter="heuristic") -> WindowDataset:
    """Featurize windows for a model variant.

    `segmenter` is "heuristic", a mapping window_id -> SegmenterOutput (or a
    100-wide embedding), or None for variants that need no segmentation.
    """
    from .data import ABNORMAL

    variant = get_variant(variant_name)
    needs_seg = variant.uses_embedding or variant.uses_state_channel
    xs, auxs, ids, labels, recs = [], [], [], [], []
    for w in windows:
        fm = build_feature_map(w.samples, variant.feature_variant)
        seg = None
        if needs_seg:
            if segmenter == "heuristic":
                seg = heuristic_segmenter(w.samples)
            elif segmenter is None:
                raise ConfigError(f"variant {variant.name} needs a segmenter")
            else:
                seg = segmenter[w.window_id]
        values = fm.values
        if variant.uses_state_channel:
            states = seg.frame_states if isinstance(seg, SegmenterOutput) else \
                np.asarray(seg)[:N_FRAMES]
            tiled = tile_segmentation_channel(states, values.shape[0])
            values = np.concatenate([values, tiled[:, :, None]], axis=2)
        if values.shape != variant.input_shape:
            raise ShapeError(f"{variant.name}: built {values.shape}, "
                             f"expected {variant.input_shape}")
        xs.append(values.astype(np.float32))
        if variant.uses_embedding:
            emb = seg.embedding if isinstance(seg, SegmenterOutput) else np.asarray(seg)
            if emb.shape != (EMBEDDING_WIDTH,):
                raise ShapeError(f"embedding width {emb.shape}, "
                                 f"expected ({EMBEDDING_WIDTH},)")
            auxs.append(emb.astype(np.float32))
        ids.append(w.window_id)
        labels.append(1 if w.label == ABNORMAL else 0)
        recs.append(w.recording_id)
    x = np.stack(xs) if xs else np.zeros((0,) + variant.input_shape, np.float32)
    aux = np.stack(auxs) if auxs else None
    return WindowDataset(window_ids=ids, x=x, aux=aux,
                         labels=np.array(labels), recording_ids=recs)


def save_segmenter_features(embeddings: np.ndarray, window_ids, path) -> None:
    """Write embeddings [n x 100] as a tensor plus a window-id manifest."""
    arr = np.asarray(embeddings)
    if arr.ndim != 2 or arr.shape[1] != EMBEDDING_WIDTH:
        raise ShapeError(f"expected [n x {EMBEDDING_WIDTH}] embeddings, "
                         f"got {arr.shape}")
    if arr.shape[0] != len(window_ids):
        raise DataError(f"{arr.shape[0]} embeddings for {len(window_ids)} ids")
    save_tensor(path, arr)
    with open(f"{path}.ids", "w", encoding="utf-8") as fh:
        for wid in window_ids:
            fh.write(f"{wid}\n")


def load_segmenter_features(path) -> dict:
    """Read embeddings back as {window_id: [100] array}."""
    arr = load_tensor(path).astype(np.float64)
    if arr.ndim != 2 or arr.shape[1] != EMBEDDING_WIDTH:
        raise ShapeError(f"{path}: expected width {EMBEDDING_WIDTH}, "
                         f"got {arr.shape}")
    with open(f"{path}.ids", "r", encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if len(ids) != arr.shape[0]:
        raise DataError(f"{path}: {arr.shape[0]} rows but {len(ids)} ids")
    return {wid: arr[i] for i, wid in enumerate(ids)}
