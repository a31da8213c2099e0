"""A small feed-forward network engine on numpy arrays.

Layers are declarative dataclasses assembled into a NetworkSpec; weights live
in a plain dict keyed by layer name. Forward/backward are batched, training
is Adam on binary cross-entropy with per-unit max-norm projection. Weights
are stored as f32; computations run in the dtype of the weights except for
the output sigmoid and all loss bookkeeping, which use f64.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, ShapeError, TrainingDiverged

_PROB_EPS = 1e-12  # probability clip shared by the output layer and the loss


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple = (3, 3)
    dropout: float = 0.0
    max_norm: float | None = None


@dataclass(frozen=True)
class MaxPool:
    pool: tuple = (2, 2)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "relu"  # relu | sigmoid | linear
    dropout: float = 0.0
    max_norm: float | None = None


@dataclass(frozen=True)
class Concat:
    """Branch tap: prepends `width` auxiliary features to the activations."""

    width: int


class NetworkSpec:
    """An ordered layer stack with a declared input shape.

    The spec validates itself on construction: shapes must propagate, and the
    stack must end in exactly one sigmoid unit.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        self.names = tuple(f"{_kind(l)}{i}" for i, l in enumerate(self.layers))
        self._validate()

    def _validate(self):
        if not self.layers:
            raise ShapeError("network has no layers")
        last = self.layers[-1]
        if not (isinstance(last, Dense) and last.units == 1
                and last.activation == "sigmoid"):
            raise ShapeError("network must end in Dense(1, sigmoid)")
        for layer in self.layers[:-1]:
            if isinstance(layer, Dense) and layer.activation == "sigmoid":
                raise ShapeError("sigmoid is reserved for the output layer")
        if sum(isinstance(l, Concat) for l in self.layers) > 1:
            raise ShapeError("at most one Concat tap is supported")
        self.shapes = self.propagate()

    def propagate(self):
        """Return the output shape after each layer, validating as it goes."""
        shapes = []
        s = self.input_shape
        for layer, name in zip(self.layers, self.names):
            if isinstance(layer, Conv2D):
                if len(s) != 3:
                    raise ShapeError(f"{name}: expects [H, W, C] input, got {s}")
                s = (s[0], s[1], layer.filters)
            elif isinstance(layer, MaxPool):
                if len(s) != 3:
                    raise ShapeError(f"{name}: expects [H, W, C] input, got {s}")
                ph, pw = layer.pool
                s = (s[0] // ph, s[1] // pw, s[2])
                if s[0] < 1 or s[1] < 1:
                    raise ShapeError(f"{name}: pool {layer.pool} empties input")
            elif isinstance(layer, Flatten):
                s = (int(np.prod(s)),)
            elif isinstance(layer, Concat):
                if len(s) != 1:
                    raise ShapeError(f"{name}: expects flat input, got {s}")
                s = (s[0] + layer.width,)
            elif isinstance(layer, Dense):
                if len(s) != 1:
                    raise ShapeError(f"{name}: expects flat input, got {s}")
                s = (layer.units,)
            else:
                raise ShapeError(f"{name}: unknown layer type {type(layer).__name__}")
            shapes.append(s)
        return shapes


def _kind(layer):
    return {Conv2D: "conv", MaxPool: "pool", Flatten: "flatten",
            Dense: "dense", Concat: "concat"}[type(layer)]


def concat_index(spec: NetworkSpec):
    """Index of the Concat tap, or None when the spec has no auxiliary input."""
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Concat):
            return i
    return None


def init_weights(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> dict:
    """He-uniform kernels for ReLU layers, Glorot-uniform for the sigmoid
    output, zero biases. Draws happen in layer order under one seeded rng."""
    rng = np.random.default_rng(seed)
    weights = {}
    s = spec.input_shape
    for layer, name, out in zip(spec.layers, spec.names, spec.shapes):
        if isinstance(layer, Conv2D):
            kh, kw = layer.kernel
            fan_in = kh * kw * s[2]
            limit = np.sqrt(6.0 / fan_in)
            shape = (kh, kw, s[2], layer.filters)
            weights[f"{name}.kernel"] = rng.uniform(-limit, limit, shape).astype(dtype)
            weights[f"{name}.bias"] = np.zeros(layer.filters, dtype=dtype)
        elif isinstance(layer, Dense):
            fan_in, fan_out = s[0], layer.units
            if layer.activation == "sigmoid":
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            else:
                limit = np.sqrt(6.0 / fan_in)
            weights[f"{name}.kernel"] = rng.uniform(-limit, limit,
                                                    (fan_in, fan_out)).astype(dtype)
            weights[f"{name}.bias"] = np.zeros(fan_out, dtype=dtype)
        s = out
    return weights


def count_params(weights: dict) -> int:
    return int(sum(v.size for v in weights.values()))


def _im2col(x, kh, kw):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), ((kh - 1) // 2, kh // 2),
                    ((kw - 1) // 2, kw // 2), (0, 0)))
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # one transpose-copy beats per-offset slab writes; axis order must stay
    # (kh, kw, c) to match the kernel reshape in the conv matmul
    cols = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n, h, w, kh * kw * c)


def _col2im(dcols, in_shape, kh, kw):
    n, h, w, c = in_shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    dxp = np.zeros((n, h + kh - 1, w + kw - 1, c), dtype=dcols.dtype)
    i = 0
    for di in range(kh):
        for dj in range(kw):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[..., i * c:(i + 1) * c]
            i += 1
    return dxp[:, pt:pt + h, pl:pl + w, :]


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)


def _run_layers(spec, weights, a, aux, train_mode, rng, need_cache,
                start=0, stop=None):
    """Run layers [start, stop) on a batched activation, collecting caches."""
    caches = []
    stop = len(spec.layers) if stop is None else stop
    for pos in range(start, stop):
        layer, name = spec.layers[pos], spec.names[pos]
        cache = {"pos": pos}
        if isinstance(layer, Conv2D):
            kh, kw = layer.kernel
            w = weights[f"{name}.kernel"]
            k = kh * kw * a.shape[3]
            cols = _im2col(a, kh, kw)
            z = cols.reshape(-1, k) @ w.reshape(k, layer.filters)
            z += weights[f"{name}.bias"]
            if need_cache:
                act = np.maximum(z.reshape(a.shape[0], a.shape[1], a.shape[2],
                                           layer.filters), 0)
                cache.update(in_shape=a.shape, cols=cols, act=act)
            else:
                np.maximum(z, 0, out=z)
                act = z.reshape(a.shape[0], a.shape[1], a.shape[2],
                                layer.filters)
            a = act
            if train_mode and layer.dropout > 0.0:
                if rng is None:
                    raise ConfigError("dropout needs an rng in training mode")
                mask = _dropout_mask(rng, a.shape, layer.dropout, a.dtype.type)
                cache["mask"] = mask
                a = a * mask
        elif isinstance(layer, MaxPool):
            ph, pw = layer.pool
            n, h, w_, c = a.shape
            hq, wq = h // ph, w_ // pw
            xr = a[:, :hq * ph, :wq * pw, :].reshape(n, hq, ph, wq, pw, c)
            if need_cache:
                xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, hq, wq, c,
                                                            ph * pw)
                idx = xr.argmax(-1)
                a = np.take_along_axis(xr, idx[..., None], -1)[..., 0]
                cache.update(idx=idx, in_shape=(n, h, w_, c))
            else:
                # same maxima as the argmax route without the transpose copy
                a = xr.max(axis=(2, 4))
        elif isinstance(layer, Flatten):
            cache["in_shape"] = a.shape
            a = a.reshape(a.shape[0], -1)
        elif isinstance(layer, Concat):
            if aux is None:
                raise ShapeError(f"{name}: auxiliary features required")
            if aux.shape != (a.shape[0], layer.width):
                raise ShapeError(f"{name}: expected auxiliary shape "
                                 f"{(a.shape[0], layer.width)}, got {aux.shape}")
            a = np.concatenate([aux.astype(a.dtype, copy=False), a], axis=1)
            cache["width"] = layer.width
        elif isinstance(layer, Dense):
            w = weights[f"{name}.kernel"]
            if a.shape[1] != w.shape[0]:
                raise ShapeError(f"{name}: expected {w.shape[0]} inputs, "
                                 f"got {a.shape[1]}")
            z = a @ w + weights[f"{name}.bias"]
            cache["a_in"] = a
            if layer.activation == "relu":
                act = np.maximum(z, 0)
            elif layer.activation == "sigmoid":
                act = expit(z.astype(np.float64))
                if need_cache:
                    cache["act_clip"] = np.clip(act, _PROB_EPS, 1.0 - _PROB_EPS)
            elif layer.activation == "linear":
                act = z
            else:
                raise ConfigError(f"{name}: unknown activation {layer.activation!r}")
            cache["act"] = act
            a = act
            if train_mode and layer.dropout > 0.0:
                if rng is None:
                    raise ConfigError("dropout needs an rng in training mode")
                mask = _dropout_mask(rng, a.shape, layer.dropout, a.dtype.type)
                cache["mask"] = mask
                a = a * mask
        caches.append(cache)
    return a, caches


def _as_batch(x, input_shape):
    x = np.asarray(x)
    if x.shape == tuple(input_shape):
        return x[None, ...], True
    if x.shape[1:] == tuple(input_shape):
        return x, False
    raise ShapeError(f"input: expected shape {tuple(input_shape)} or batched "
                     f"[n, ...], got {x.shape}")


def forward(spec, weights, x, aux=None, train_mode=False, rng=None,
            need_cache=True):
    """Run the network. Returns (probabilities, cache).

    Accepts a single instance or a batch; a single instance returns a float.
    need_cache=False skips the bookkeeping backward() relies on, which makes
    inference cheaper but the returned caches unusable for gradients.
    """
    xb, single = _as_batch(x, spec.input_shape)
    dtype = next(iter(weights.values())).dtype
    a = xb.astype(dtype, copy=False)
    auxb = None
    if aux is not None:
        auxb = np.asarray(aux)
        if auxb.ndim == 1:
            auxb = auxb[None, :]
    out, caches = _run_layers(spec, weights, a, auxb, train_mode, rng,
                              need_cache)
    probs = out[:, 0]
    if single:
        return float(probs[0]), caches
    return probs, caches


def backward(spec, weights, caches, d_prob) -> dict:
    """Gradients of the scalar loss w.r.t. every weight, given dloss/dprob."""
    dtype = next(iter(weights.values())).dtype
    d = np.asarray(d_prob, dtype=np.float64).reshape(-1, 1)
    grads = {}
    for cache in reversed(caches):
        pos = cache["pos"]
        layer, name = spec.layers[pos], spec.names[pos]
        if isinstance(layer, Dense):
            if "mask" in cache:
                d = d * cache["mask"]
            if layer.activation == "relu":
                dz = d * (cache["act"] > 0)
            elif layer.activation == "sigmoid":
                ac = cache["act_clip"]
                dz = (d * ac * (1.0 - ac)).astype(dtype)
            else:
                dz = d
            a_in = cache["a_in"]
            grads[f"{name}.kernel"] = a_in.T @ dz
            grads[f"{name}.bias"] = dz.sum(axis=0)
            d = dz @ weights[f"{name}.kernel"].T
        elif isinstance(layer, Concat):
            d = d[:, cache["width"]:]
        elif isinstance(layer, Flatten):
            d = d.reshape(cache["in_shape"])
        elif isinstance(layer, MaxPool):
            ph, pw = layer.pool
            n, h, w_, c = cache["in_shape"]
            hq, wq = h // ph, w_ // pw
            idx = cache["idx"]
            dxr = np.zeros((n, hq, wq, c, ph * pw), dtype=d.dtype)
            np.put_along_axis(dxr, idx[..., None], d[..., None], -1)
            dx = dxr.reshape(n, hq, wq, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
            dx = dx.reshape(n, hq * ph, wq * pw, c)
            if hq * ph != h or wq * pw != w_:
                dx = np.pad(dx, ((0, 0), (0, h - hq * ph),
                                 (0, w_ - wq * pw), (0, 0)))
            d = dx
        elif isinstance(layer, Conv2D):
            if "mask" in cache:
                d = d * cache["mask"]
            dz = (d * (cache["act"] > 0)).astype(dtype, copy=False)
            kh, kw = layer.kernel
            n, h, w_, c = cache["in_shape"]
            k = kh * kw * c
            cols = cache["cols"]
            dz_mat = dz.reshape(-1, layer.filters)
            grads[f"{name}.kernel"] = (cols.reshape(-1, k).T @ dz_mat).reshape(
                kh, kw, c, layer.filters)
            grads[f"{name}.bias"] = dz_mat.sum(axis=0)
            wmat = weights[f"{name}.kernel"].reshape(k, layer.filters)
            dcols = (dz_mat @ wmat.T).reshape(n, h, w_, k)
            d = _col2im(dcols, (n, h, w_, c), kh, kw)
    return {k: np.asarray(v, dtype=dtype) for k, v in grads.items()}


def bce_loss(probs, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the probabilities."""
    p = np.clip(np.asarray(probs, dtype=np.float64), _PROB_EPS, 1.0 - _PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    dprob = (p - y) / (p * (1.0 - p)) / len(p)
    return loss, dprob


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0


def init_opt_state(weights: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in weights.items()},
            "v": {k: np.zeros_like(v) for k, v in weights.items()}}


def _max_norm_project(spec, weights):
    """Rescale kernels whose per-unit incoming vector exceeds the layer cap."""
    out = dict(weights)
    for layer, name in zip(spec.layers, spec.names):
        cap = getattr(layer, "max_norm", None)
        if cap is None:
            continue
        key = f"{name}.kernel"
        w = out[key]
        if isinstance(layer, Conv2D):
            norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=(0, 1, 2)))
        else:
            norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=0))
        scale = np.minimum(1.0, cap / np.maximum(norms, 1e-30))
        if np.any(scale < 1.0):
            out[key] = (w * scale.astype(w.dtype)).astype(w.dtype)
    return out


def train_step(spec, weights, opt_state, batch_x, batch_y, cfg: TrainConfig,
               aux=None, rng=None):
    """One Adam step on a batch. Returns (weights, opt_state, loss)."""
    probs, caches = forward(spec, weights, batch_x, aux=aux,
                            train_mode=True, rng=rng)
    loss, dprob = bce_loss(probs, batch_y)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}", weights=weights,
                               opt_state=opt_state)
    grads = backward(spec, weights, caches, dprob)

    t = opt_state["t"] + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k]
        m = b1 * opt_state["m"][k] + (1.0 - b1) * g
        v = b2 * opt_state["v"][k] + (1.0 - b2) * g * g
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        new_w[k] = w - step.astype(w.dtype)
        new_m[k] = m
        new_v[k] = v
    new_w = _max_norm_project(spec, new_w)
    return new_w, {"t": t, "m": new_m, "v": new_v}, loss


def predict_batch(spec, weights, xs, aux=None, chunk: int = 1024) -> np.ndarray:
    """Deterministic eval-mode probabilities for a batch, computed in chunks."""
    xs = np.asarray(xs)
    n = xs.shape[0]
    if n == 0:
        return np.zeros(0)
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        sub_aux = None if aux is None else aux[lo:hi]
        probs, _ = forward(spec, weights, xs[lo:hi], aux=sub_aux,
                           need_cache=False)
        out[lo:hi] = probs
    return out


def forward_upto(spec, weights, x, aux=None, stop: int = 0) -> np.ndarray:
    """Eval-mode activations after layer index `stop` (inclusive)."""
    xb, single = _as_batch(x, spec.input_shape)
    dtype = next(iter(weights.values())).dtype
    auxb = None
    if aux is not None:
        auxb = np.asarray(aux)
        if auxb.ndim == 1:
            auxb = auxb[None, :]
    a, _ = _run_layers(spec, weights, xb.astype(dtype, copy=False), auxb,
                       False, None, False, start=0, stop=stop + 1)
    return a[0] if single else a


def forward_from(spec, weights, activation, start: int) -> np.ndarray:
    """Eval-mode probabilities from an activation injected at layer `start`."""
    a = np.asarray(activation)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    dtype = next(iter(weights.values())).dtype
    out, _ = _run_layers(spec, weights, a.astype(dtype, copy=False), None,
                         False, None, False, start=start)
    probs = out[:, 0]
    return float(probs[0]) if single else probs


def train_network(spec, weights, x_train, y_train, x_val, y_val,
                  cfg: TrainConfig, aux_train=None, aux_val=None,
                  metrics_path=None):
    """Mini-batch training with early stopping on validation accuracy.

    Returns (best_weights, history) where history rows are
    (epoch, train_loss, val_acc). Best-epoch weights are restored; when the
    validation set is empty the (negated) train loss drives early stopping.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = init_opt_state(weights)
    n = len(y_train)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    best_score = -np.inf
    best_weights = {k: v.copy() for k, v in weights.items()}
    stall = 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            sub_aux = None if aux_train is None else aux_train[sel]
            weights, opt, loss = train_step(spec, weights, opt, x_train[sel],
                                            y_train[sel], cfg,
                                            aux=sub_aux, rng=rng)
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if len(y_val):
            val_probs = predict_batch(spec, weights, x_val, aux=aux_val)
            val_acc = float(np.mean((val_probs >= 0.5) == (y_val >= 0.5)))
            score = val_acc
        else:
            val_acc = float("nan")
            score = -train_loss
        history.append((epoch, train_loss, val_acc))
        if score > best_score:
            best_score = score
            best_weights = {k: v.copy() for k, v in weights.items()}
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_acc\n")
            for epoch, train_loss, val_acc in history:
                fh.write(f"{epoch},{train_loss:.6f},{val_acc:.6f}\n")
    return best_weights, history


_W_MAGIC = b"PCGW"
_W_VERSION = 1


def save_weights(path, weights: dict) -> None:
    """Write named tensors as f32, little-endian, in dict order."""
    with open(path, "wb") as fh:
        fh.write(_W_MAGIC)
        fh.write(struct.pack("<B", _W_VERSION))
        for name, arr in weights.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _W_MAGIC:
        raise DataError(f"{path}: not a weights file")
    if raw[4] != _W_VERSION:
        raise DataError(f"{path}: unsupported weights version {raw[4]}")
    weights = {}
    pos = 5
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise DataError(f"{path}: unexpected end of file")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + name_len + 1 > len(raw):
            raise DataError(f"{path}: unexpected end of file")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = raw[pos]
        pos += 1
        if pos + 4 * rank > len(raw):
            raise DataError(f"{path}: unexpected end of file")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if pos + 4 * count > len(raw):
            raise DataError(f"{path}: unexpected end of file")
        weights[name] = np.frombuffer(raw[pos:pos + 4 * count],
                                      dtype="<f4").reshape(dims).copy()
        pos += 4 * count
    return weights
