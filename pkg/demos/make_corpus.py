"""Synthesize a small labeled heart-sound corpus on disk.

Writes WAV files plus a reference.csv label file under demo_run/data,
the same layout the command line tools consume. Abnormal recordings get
a band-limited systolic murmur; everything is seeded, so rerunning the
script reproduces the corpus byte for byte.
"""

import os

import numpy as np

from pcgkit import data, synth

OUT = os.path.join(os.path.dirname(__file__), "demo_run", "data")
os.makedirs(OUT, exist_ok=True)

rows = []
for i in range(8):
    abnormal = i >= 4
    rec_id = f"{'a' if abnormal else 'n'}{i:04d}"
    cfg = synth.SynthConfig(duration_s=4.0, heart_rate_bpm=72.0,
                            abnormal=abnormal, seed=40 + i,
                            noise_level=0.03, jitter=0.02,
                            recording_id=rec_id)
    rec = synth.synth_pcg(cfg)
    data.write_wav(os.path.join(OUT, rec_id + ".wav"), rec.samples,
                   rec.sample_rate_hz)
    rows.append(f"{rec_id},{1 if abnormal else -1}")
    peak = np.max(np.abs(rec.samples))
    print(f"{rec_id}: {rec.duration_s:.1f} s, label {rec.label}, peak {peak:.2f}")

with open(os.path.join(OUT, "reference.csv"), "w", encoding="utf-8") as fh:
    fh.write("\n".join(rows) + "\n")

print(f"\nwrote {len(rows)} recordings to {OUT}")
print("next: python demos/feature_maps.py")
