"""MFCC feature maps: framing, mel filterbanks, cepstra and their deltas.

All feature maps share one time base: 40-sample (20 ms) frames hopped by
20 samples (10 ms) over a 2000-sample window, giving 99 frames. Spectra come
from a 64-point DFT, so bins are 31.25 Hz apart.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import ConfigError, ShapeError
from .tensorio import load_tensor, read_sidecar, save_tensor, write_sidecar

FRAME_LEN = 40
FRAME_HOP = 20
N_FFT = 64
N_BINS = N_FFT // 2 + 1
RATE_HZ = 2000
BIN_HZ = RATE_HZ / N_FFT
LOG_FLOOR = 1e-10

# variant name -> (n_filters, f_lo_hz, f_hi_hz, channels)
VARIANTS = {
    "exp1_6band_3ch": (6, 30.0, 300.0, 3),
    "exp1_6band_1ch": (6, 30.0, 300.0, 1),
    "exp2_26band_1ch": (26, 0.0, 500.0, 1),
}


@dataclass
class MelFilterbank:
    n_filters: int
    f_lo_hz: float
    f_hi_hz: float
    weights: np.ndarray  # [n_filters, N_BINS]
    centers_hz: np.ndarray


@dataclass
class FeatureMap:
    """Stacked cepstral channels shaped [n_mel, n_frames, n_channels]."""

    values: np.ndarray
    variant: str
    band_hz: tuple
    frame_hop_s: float = 0.010
    frame_len_s: float = 0.020


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_antiderivative(f):
    # d/df [(700+f) ln(1+f/700) - f] = ln(1+f/700), scaled to the mel formula
    c = 2595.0 / np.log(10.0)
    return c * ((700.0 + f) * np.log1p(f / 700.0) - f)


def _ramp_integral(f_a, f_b, m_lo, m_hi):
    """Integral over [f_a, f_b] of (mel(f) - m_lo) / (m_hi - m_lo)."""
    if f_b <= f_a:
        return 0.0
    area = (_mel_antiderivative(f_b) - _mel_antiderivative(f_a)
            - m_lo * (f_b - f_a))
    return area / (m_hi - m_lo)


def mel_filterbank(n_filters: int, f_lo_hz: float, f_hi_hz: float) -> MelFilterbank:
    """Triangular mel filters evaluated over the 33 DFT bins.

    Edge points are n_filters + 2 equally-mel-spaced frequencies between the
    band limits. Each bin's weight is the average of the mel-domain triangle
    over the bin's frequency interval (closed form), so filters narrower than
    the 31.25 Hz bin spacing still land nonzero weight.
    """
    if n_filters < 1:
        raise ConfigError(f"need at least one filter, got {n_filters}")
    nyquist = RATE_HZ / 2
    if not (0.0 <= f_lo_hz < f_hi_hz <= nyquist):
        raise ConfigError(f"filter band {f_lo_hz}-{f_hi_hz} Hz invalid "
                          f"for {RATE_HZ} Hz sampling")

    mels = np.linspace(hz_to_mel(f_lo_hz), hz_to_mel(f_hi_hz), n_filters + 2)
    edges = mel_to_hz(mels)
    weights = np.zeros((n_filters, N_BINS))
    for j in range(n_filters):
        h0, h1, h2 = edges[j], edges[j + 1], edges[j + 2]
        m0, m1, m2 = mels[j], mels[j + 1], mels[j + 2]
        for k in range(N_BINS):
            a = max(k * BIN_HZ - BIN_HZ / 2, 0.0)
            b = min(k * BIN_HZ + BIN_HZ / 2, nyquist)
            rising = _ramp_integral(max(a, h0), min(b, h1), m0, m1)
            falling = _ramp_integral(max(a, h1), min(b, h2), m2, m1)
            weights[j, k] = (rising + falling) / BIN_HZ
    return MelFilterbank(n_filters=n_filters, f_lo_hz=f_lo_hz, f_hi_hz=f_hi_hz,
                         weights=weights, centers_hz=edges[1:-1].copy())


@lru_cache(maxsize=8)
def _cached_filterbank(n_filters, f_lo_hz, f_hi_hz):
    return mel_filterbank(n_filters, f_lo_hz, f_hi_hz)


def frame_signal(samples: np.ndarray) -> np.ndarray:
    """Slice a window into Hamming-weighted frames, shaped [n_frames, 40]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < FRAME_LEN:
        raise ShapeError(f"framing needs a 1-D signal of at least {FRAME_LEN} "
                         f"samples, got shape {x.shape}")
    count = (len(x) - FRAME_LEN) // FRAME_HOP + 1
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_HOP * np.arange(count)[:, None]
    return x[idx] * np.hamming(FRAME_LEN)[None, :]


def mfcc(samples: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Cepstral coefficients shaped [n_filters, n_frames].

    Per frame: 64-point magnitude-squared DFT, filterbank energies, log with
    a 1e-10 floor, then an orthonormal DCT-II keeping every coefficient.
    """
    frames = frame_signal(samples)
    spectra = scipy.fft.rfft(frames, n=N_FFT, axis=1)
    power = np.abs(spectra) ** 2
    energies = power @ fb.weights.T
    log_e = np.log(np.maximum(energies, LOG_FLOOR))
    coeffs = scipy.fft.dct(log_e, type=2, norm="ortho", axis=1)
    return coeffs.T


def delta(coeffs: np.ndarray, n: int = 2) -> np.ndarray:
    """Regression delta along the frame axis with replicated edge frames.

    d_t = sum_{k=1..n} k (c_{t+k} - c_{t-k}) / (2 sum k^2)
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"delta expects [n_coeffs, n_frames], got {c.shape}")
    t = c.shape[1]
    if t < 2 * n + 1:
        raise ShapeError(f"delta needs at least {2 * n + 1} frames, got {t}")
    padded = np.pad(c, ((0, 0), (n, n)), mode="edge")
    out = np.zeros_like(c)
    for k in range(1, n + 1):
        out += k * (padded[:, n + k:n + k + t] - padded[:, n - k:n - k + t])
    return out / (2.0 * sum(k * k for k in range(1, n + 1)))


def build_feature_map(samples: np.ndarray, variant: str) -> FeatureMap:
    """Build one of the named feature-map variants from a 1 s window."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown feature variant {variant!r}, "
                          f"expected one of {sorted(VARIANTS)}")
    n_filters, f_lo, f_hi, n_channels = VARIANTS[variant]
    fb = _cached_filterbank(n_filters, f_lo, f_hi)
    base = mfcc(samples, fb)
    channels = [base]
    if n_channels == 3:
        d1 = delta(base)
        channels += [d1, delta(d1)]
    values = np.stack(channels, axis=2)
    return FeatureMap(values=values, variant=variant, band_hz=(f_lo, f_hi))


def save_feature_map(fm: FeatureMap, path) -> None:
    save_tensor(path, fm.values)
    write_sidecar(path, {
        "variant": fm.variant,
        "band": f"{fm.band_hz[0]:g}-{fm.band_hz[1]:g}",
        "hop": f"{fm.frame_hop_s:g}",
    })


def load_feature_map(path) -> FeatureMap:
    values = load_tensor(path).astype(np.float64)
    meta = read_sidecar(path)
    lo, _, hi = meta.get("band", "0-0").partition("-")
    return FeatureMap(values=values, variant=meta.get("variant", ""),
                      band_hz=(float(lo), float(hi)),
                      frame_hop_s=float(meta.get("hop", "0.01")))
