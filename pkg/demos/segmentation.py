"""Locate S1/S2 sounds with the Shannon-energy segmenter.

A synthetic beat sequence has known event times, so the detections can be
checked directly. The segmenter also produces the 100-wide embedding
(99 per-frame state codes plus a beat-rate term) that the hybrid model
concatenates with its convolutional features.
"""

import numpy as np

from pcgkit import architectures, synth

rec, events = synth.synth_pcg_with_events(synth.SynthConfig(
    duration_s=3.0, heart_rate_bpm=75.0, seed=21, noise_level=0.02,
    jitter=0.02))

seg = architectures.heuristic_segmenter(rec.samples, rec.sample_rate_hz)
print(f"true beats: {len(events)}, detected S1: {len(seg.s1_times)}, "
      f"S2: {len(seg.s2_times)}")
for (s1, s2), d1, d2 in zip(events, seg.s1_times, seg.s2_times):
    print(f"  S1 {s1:.3f} -> {d1:.3f} ({abs(s1 - d1) * 1000:.0f} ms off)   "
          f"S2 {s2:.3f} -> {d2:.3f} ({abs(s2 - d2) * 1000:.0f} ms off)")

# state codes: 1.0 = S1, 0.66 = S2, 0.33 = systole, 0.0 = diastole
window = rec.samples[:2000]
seg_w = architectures.heuristic_segmenter(window, rec.sample_rate_hz)
codes = {1.0: "1", 0.66: "2", 0.33: "s", 0.0: "."}
line = "".join(codes[round(float(c), 2)] for c in seg_w.frame_states)
print(f"\nfirst window, one char per 10 ms frame:\n{line}")

emb = seg_w.embedding
print(f"\nembedding: {emb.shape[0]} values, last one is rate/4 = {emb[-1]:.3f} "
      f"(~{emb[-1] * 4 * 60:.0f} bpm)")
assert np.array_equal(emb[:99], seg_w.frame_states)
