"""Seeded synthetic phonocardiogram generator for tests and demos."""

from dataclasses import dataclass

import numpy as np

from .data import ABNORMAL, NORMAL, SYNTHETIC, Recording
from .errors import ConfigError

S1_DURATION_S = 0.10
S2_DURATION_S = 0.08
S2_DELAY_S = 0.30  # systole length at rest; shrinks at high heart rates
FIRST_BEAT_S = 0.10


@dataclass
class SynthConfig:
    duration_s: float = 3.0
    heart_rate_bpm: float = 60.0
    abnormal: bool = False
    seed: int = 0
    sample_rate_hz: int = 2000
    s1_band_hz: tuple = (30.0, 100.0)
    s2_band_hz: tuple = (50.0, 150.0)
    murmur_band_hz: tuple = (150.0, 400.0)
    murmur_amplitude: float = 0.35
    noise_level: float = 0.0
    jitter: float = 0.0
    recording_id: str = "synth"

    def validate(self):
        if self.duration_s < 1.0:
            raise ConfigError(f"duration {self.duration_s} s is below the 1 s window")
        if self.heart_rate_bpm <= 0:
            raise ConfigError(f"heart rate {self.heart_rate_bpm} bpm invalid")
        nyquist = self.sample_rate_hz / 2
        for name, (lo, hi) in (("s1_band_hz", self.s1_band_hz),
                               ("s2_band_hz", self.s2_band_hz),
                               ("murmur_band_hz", self.murmur_band_hz)):
            if not (0 <= lo < hi <= nyquist):
                raise ConfigError(f"{name} {lo}-{hi} Hz invalid for "
                                  f"{self.sample_rate_hz} Hz sampling")


def _burst(rng, fs, duration_s, band_hz):
    """Gaussian-enveloped tone with a random frequency inside the band."""
    freq = rng.uniform(*band_hz)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    n = int(round(duration_s * fs))
    tau = (np.arange(n) - (n - 1) / 2) / fs
    sigma = duration_s / 6.0
    return np.exp(-0.5 * (tau / sigma) ** 2) * np.sin(2 * np.pi * freq * tau + phase)


def _band_noise(rng, fs, n, band_hz):
    """White noise restricted to a frequency band, unit peak, soft edges."""
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spectrum[(freqs < band_hz[0]) | (freqs > band_hz[1])] = 0.0
    shaped = np.fft.irfft(spectrum, n)
    ramp = min(n // 4, int(0.010 * fs))
    if ramp > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        shaped[:ramp] *= edge
        shaped[-ramp:] *= edge[::-1]
    peak = np.max(np.abs(shaped))
    return shaped / peak if peak > 0 else shaped


def _add(x, start_idx, burst):
    lo = max(start_idx, 0)
    hi = min(start_idx + len(burst), len(x))
    if hi > lo:
        x[lo:hi] += burst[lo - start_idx:hi - start_idx]


def synth_pcg_with_events(cfg: SynthConfig):
    """Generate a recording plus its ground-truth (s1_center, s2_center) list.

    Every random draw happens regardless of the abnormal flag, so the same
    seed produces the same S1/S2/noise content with and without a murmur.
    """
    cfg.validate()
    fs = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * fs))
    x = np.zeros(n)
    interval = 60.0 / cfg.heart_rate_bpm
    s2_delay = min(S2_DELAY_S, 0.5 * interval)
    murmur_gain = cfg.murmur_amplitude if cfg.abnormal else 0.0

    rng = np.random.default_rng(cfg.seed)
    events = []
    t = FIRST_BEAT_S
    while t + s2_delay + S2_DURATION_S / 2 < cfg.duration_s:
        jit = rng.uniform(-1.0, 1.0)
        s1 = _burst(rng, fs, S1_DURATION_S, cfg.s1_band_hz)
        s2 = _burst(rng, fs, S2_DURATION_S, cfg.s2_band_hz)
        t_s2 = t + s2_delay
        _add(x, int(round(t * fs)) - len(s1) // 2, s1)
        _add(x, int(round(t_s2 * fs)) - len(s2) // 2, s2)

        # murmur occupies the gap between the S1 and S2 bursts
        m_lo = t + S1_DURATION_S / 2
        m_hi = t_s2 - S2_DURATION_S / 2
        m_n = int(round((m_hi - m_lo) * fs))
        if m_n > 8:
            murmur = _band_noise(rng, fs, m_n, cfg.murmur_band_hz)
            if murmur_gain != 0.0:
                _add(x, int(round(m_lo * fs)), murmur_gain * murmur)

        events.append((t, t_s2))
        t += interval * (1.0 + cfg.jitter * jit)

    white = rng.standard_normal(n)
    if cfg.noise_level != 0.0:
        x += cfg.noise_level * white

    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.95 / peak

    rec = Recording(id=cfg.recording_id, samples=x, sample_rate_hz=fs,
                    label=ABNORMAL if cfg.abnormal else NORMAL, source=SYNTHETIC)
    return rec, events


def synth_pcg(cfg: SynthConfig) -> Recording:
    """Generate a synthetic phonocardiogram recording."""
    rec, _ = synth_pcg_with_events(cfg)
    return rec
