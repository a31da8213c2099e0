"""Attribution: Shapley values (exact and sampled), occlusion, heatmaps.

Model functions passed in here map a batch of inputs [B, ...] to a vector of
[B] outputs. Set-function evaluations replace masked-out features with the
corresponding baseline entries (interventional replacement); all bookkeeping
runs in f64 so the efficiency identity sum(phi) = f(x) - f(baseline) holds to
tight tolerance by construction.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .net import concat_index, forward_from, forward_upto

EXACT_LIMIT = 20


@dataclass
class AttributionMap:
    """Per-feature attribution with the two anchoring model outputs."""

    values: np.ndarray
    base_value: float
    target_output: float
    group_values: np.ndarray | None = None
    groups: list | None = None


@dataclass
class OcclusionMap:
    """Model probability for each placement of an occluding patch."""

    values: np.ndarray
    kernel: tuple
    fill: float
    intact_output: float


def _eval_chunked(model_fn, xs, chunk):
    out = np.empty(len(xs), dtype=np.float64)
    for lo in range(0, len(xs), chunk):
        hi = min(lo + chunk, len(xs))
        out[lo:hi] = np.asarray(model_fn(xs[lo:hi]), dtype=np.float64)
    return out


def shapley_exact(model_fn, instance, baseline, chunk: int = 8192) -> AttributionMap:
    """Exact Shapley values by full subset enumeration.

    Cost doubles per feature; above 20 features this refuses and the sampled
    estimator should be used instead.
    """
    x = np.asarray(instance, dtype=np.float64).ravel()
    b = np.asarray(baseline, dtype=np.float64).ravel()
    if x.shape != b.shape:
        raise ShapeError(f"instance {x.shape} and baseline {b.shape} differ")
    n = len(x)
    if n > EXACT_LIMIT:
        raise ConfigError(f"{n} features is too many for exact enumeration; "
                          f"use sampling")
    total = 1 << n
    bits = ((np.arange(total)[:, None] >> np.arange(n)) & 1).astype(np.float64)
    values = _eval_chunked(lambda m: model_fn(b + m * (x - b)), bits, chunk)

    sizes = bits.sum(axis=1).astype(np.intp)
    fact = [math.factorial(i) for i in range(n + 1)]
    size_weight = np.array([fact[s] * fact[n - 1 - s] / fact[n]
                            for s in range(n)])
    phi = np.zeros(n)
    masks = np.arange(total)
    for i in range(n):
        without = (masks & (1 << i)) == 0
        idx = masks[without]
        w = size_weight[sizes[idx]]
        phi[i] = float(np.sum(w * (values[idx | (1 << i)] - values[idx])))
    return AttributionMap(values=phi, base_value=float(values[0]),
                          target_output=float(values[-1]))


def shapley_sampled(model_fn, instance, baseline, m: int = 2000, seed: int = 0,
                    chunk: int = 2048) -> AttributionMap:
    """Permutation-sampling Shapley estimate.

    Each sampled permutation walks from the baseline to the instance one
    feature at a time; the output deltas along the walk are that
    permutation's marginal contributions, so their sum telescopes to
    f(x) - f(baseline) exactly and the efficiency identity survives
    averaging over any m.
    """
    x = np.asarray(instance, dtype=np.float64).ravel()
    b = np.asarray(baseline, dtype=np.float64).ravel()
    if x.shape != b.shape:
        raise ShapeError(f"instance {x.shape} and baseline {b.shape} differ")
    if m < 1:
        raise ConfigError(f"need at least one permutation, got {m}")
    n = len(x)
    v_empty = float(np.asarray(model_fn(b[None, :]), dtype=np.float64)[0])
    v_full = float(np.asarray(model_fn(x[None, :]), dtype=np.float64)[0])
    phi = np.zeros(n)
    if n == 1:
        phi[0] = (v_full - v_empty)
        return AttributionMap(values=phi, base_value=v_empty, target_output=v_full)

    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(n) for _ in range(m)])

    # intermediate coalition masks for every permutation, evaluated in chunks
    steps = n - 1
    perms_per_chunk = max(1, chunk // steps)
    for lo in range(0, m, perms_per_chunk):
        batch = perms[lo:lo + perms_per_chunk]
        # feature f joins the walk of row r at position inv[r, f]
        inv = np.argsort(batch, axis=1)
        masks = (inv[:, None, :] <= np.arange(steps)[None, :, None])
        flat = masks.reshape(-1, n).astype(np.float64)
        vals = _eval_chunked(lambda ms: model_fn(b + ms * (x - b)), flat, chunk)
        vals = vals.reshape(len(batch), steps)
        for row, perm in enumerate(batch):
            walk = np.concatenate([[v_empty], vals[row], [v_full]])
            deltas = np.diff(walk)
            phi[perm] += deltas
    phi /= m
    return AttributionMap(values=phi, base_value=v_empty, target_output=v_full)


def shapley_linear(coefficients, intercept, instance, baseline) -> AttributionMap:
    """Closed-form Shapley values for a linear model: beta_i (x_i - b_i)."""
    beta = np.asarray(coefficients, dtype=np.float64)
    x = np.asarray(instance, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    phi = beta * (x - b)
    base = float(intercept + beta @ b)
    return AttributionMap(values=phi, base_value=base,
                          target_output=float(intercept + beta @ x))


def column_groups(shape) -> list:
    """One group per frame column: flat indices of [:, t, ...] for each t."""
    if len(shape) < 2:
        raise ShapeError(f"column grouping needs at least 2 dims, got {shape}")
    flat = np.arange(int(np.prod(shape))).reshape(shape)
    return [np.ascontiguousarray(flat[:, t].ravel()) for t in range(shape[1])]


def _check_partition(groups, size):
    seen = np.concatenate([np.asarray(g).ravel() for g in groups])
    if len(seen) != size or not np.array_equal(np.sort(seen), np.arange(size)):
        raise ConfigError("groups must partition the feature cells exactly")


def shapley_grouped(model_fn, instance, baseline, groups=None, m: int = 2000,
                    seed: int = 0, exact: bool = False,
                    chunk: int = 2048) -> AttributionMap:
    """Shapley values over groups of cells of a feature map.

    Groups default to one per frame column. The group game toggles whole
    groups between baseline and instance content; every cell of a group
    receives its group's value in the returned map.
    """
    x = np.asarray(instance, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if x.shape != b.shape:
        raise ShapeError(f"instance {x.shape} and baseline {b.shape} differ")
    if groups is None:
        groups = column_groups(x.shape)
    size = x.size
    _check_partition(groups, size)

    shape = x.shape
    x_flat, b_flat = x.ravel(), b.ravel()
    lift = np.zeros((len(groups), size))
    for gi, idx in enumerate(groups):
        lift[gi, idx] = x_flat[idx] - b_flat[idx]

    def group_fn(masks):
        flats = b_flat[None, :] + masks @ lift
        return model_fn(flats.reshape((-1,) + shape))

    ones = np.ones(len(groups))
    zeros = np.zeros(len(groups))
    if exact:
        attr = shapley_exact(group_fn, ones, zeros, chunk=chunk)
    else:
        attr = shapley_sampled(group_fn, ones, zeros, m=m, seed=seed, chunk=chunk)

    values = np.zeros(size)
    for gi, idx in enumerate(groups):
        values[idx] = attr.values[gi]
    return AttributionMap(values=values.reshape(shape),
                          base_value=attr.base_value,
                          target_output=attr.target_output,
                          group_values=attr.values, groups=groups)


def intermediate_baseline(spec, weights, xs, auxs, min_background: int = 50) -> np.ndarray:
    """Mean branch-tap activation over a background batch of windows."""
    ci = concat_index(spec)
    if ci is None:
        raise ConfigError("network has no branch tap to explain")
    if len(xs) < min_background:
        raise ConfigError(f"background needs at least {min_background} windows, "
                          f"got {len(xs)}")
    acts = forward_upto(spec, weights, xs, aux=auxs, stop=ci)
    return acts.astype(np.float64).mean(axis=0)


def shapley_intermediate(spec, weights, x, aux, baseline, m: int = 500,
                         seed: int = 0):
    """Explain the dense head over the concatenated intermediate features.

    Returns (AttributionMap over the tap vector, mass split dict). The first
    segment of the tap holds the segmenter embedding, the remainder the
    flattened CNN features; the mass split sums |phi| over each segment.
    """
    ci = concat_index(spec)
    if ci is None:
        raise ConfigError("network has no branch tap to explain")
    width = spec.layers[ci].width
    v = forward_upto(spec, weights, x, aux=aux, stop=ci).astype(np.float64)

    def head_fn(batch):
        return forward_from(spec, weights, batch, start=ci + 1)

    attr = shapley_sampled(head_fn, v, baseline, m=m, seed=seed)
    mass = {"segmenter": float(np.abs(attr.values[:width]).sum()),
            "cnn": float(np.abs(attr.values[width:]).sum())}
    return attr, mass


def occlusion_map(model_fn, instance, kernel=(3, 3), fill: float = 0.0,
                  chunk: int = 4096) -> OcclusionMap:
    """Slide a fill-valued patch over the map and record the model output.

    Only complete placements are scored, so an [H x W] map yields an
    [H-kh+1 x W-kw+1] grid of probabilities.
    """
    x = np.asarray(instance)
    kh, kw = kernel
    if x.ndim < 2:
        raise ShapeError(f"occlusion needs [H, W, ...] input, got {x.shape}")
    h, w = x.shape[:2]
    if kh > h or kw > w or kh < 1 or kw < 1:
        raise ShapeError(f"kernel {kernel} does not fit input {x.shape}")
    oh, ow = h - kh + 1, w - kw + 1
    intact = float(np.asarray(model_fn(x[None, ...]), dtype=np.float64)[0])
    probs = np.empty(oh * ow, dtype=np.float64)
    positions = [(i, j) for i in range(oh) for j in range(ow)]
    for lo in range(0, len(positions), chunk):
        batch = positions[lo:lo + chunk]
        stack = np.repeat(x[None, ...], len(batch), axis=0)
        for row, (i, j) in enumerate(batch):
            stack[row, i:i + kh, j:j + kw, ...] = fill
        probs[lo:lo + len(batch)] = np.asarray(model_fn(stack), dtype=np.float64)
    return OcclusionMap(values=probs.reshape(oh, ow), kernel=(kh, kw),
                        fill=fill, intact_output=intact)


def frame_to_time(index: int) -> float:
    """Center time (s) of an analysis frame within its window."""
    if not 0 <= index <= 98:
        raise ConfigError(f"frame index {index} out of range 0..98")
    return 0.010 * index + 0.010


def render_heatmap(values: np.ndarray, path_base: str, mode: str = "absolute") -> list:
    """Write a 2-D map as CSV plus 8-bit grayscale PGM images.

    absolute: one image of |v| scaled by max |v|. signed: separate images for
    the positive and negative parts on a shared scale. A .meta sidecar keeps
    the raw min/max so pixel values stay interpretable.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"heatmap needs a 2-D map, got {v.shape}")
    if mode not in ("absolute", "signed"):
        raise ConfigError(f"unknown render mode {mode!r}")
    paths = []

    csv_path = f"{path_base}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in v:
            fh.write(",".join(f"{cell:.8g}" for cell in row) + "\n")
    paths.append(csv_path)

    def _write_pgm(img, path):
        h, w = img.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.astype(np.uint8).tobytes())
        paths.append(path)

    if mode == "absolute":
        mag = np.abs(v)
        top = mag.max()
        img = np.round(255.0 * mag / top) if top > 0 else np.zeros_like(mag)
        _write_pgm(img, f"{path_base}.pgm")
    else:
        pos = np.clip(v, 0.0, None)
        neg = np.clip(-v, 0.0, None)
        top = max(pos.max(), neg.max())
        for part, tag in ((pos, "pos"), (neg, "neg")):
            img = np.round(255.0 * part / top) if top > 0 else np.zeros_like(part)
            _write_pgm(img, f"{path_base}_{tag}.pgm")

    meta_path = f"{path_base}.meta"
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write(f"min={v.min():.9g},max={v.max():.9g}\n")
    paths.append(meta_path)
    return paths


def write_explanation_manifest(path, fields: dict) -> None:
    """Record what produced an explanation: instance, method, m, seed, baseline."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in fields.items():
            fh.write(f"{k}={v}\n")
