"""Turn one recording into the MFCC maps the classifiers consume.

Shows the windowing arithmetic (1 s windows, 0.1 s hop) and the three
feature variants: a narrow 6-band map with delta channels, its single
channel form, and the wide 26-band map used by the final model.
"""

import os

import numpy as np

from pcgkit import data, features, synth

rec = synth.synth_pcg(synth.SynthConfig(duration_s=3.0, abnormal=True,
                                        seed=5, noise_level=0.03))
windows = data.window_signal(rec)
print(f"{rec.duration_s:.1f} s recording -> {len(windows)} windows "
      f"(1 s long, 0.1 s hop)")

w = windows[4]
print(f"\nwindow {w.window_id} starts at {w.start_s:.1f} s")
for variant in ("exp1_6band_3ch", "exp1_6band_1ch", "exp2_26band_1ch"):
    fmap = features.build_feature_map(w.samples, variant)
    lo, hi = fmap.band_hz
    print(f"  {variant}: shape {fmap.values.shape}, band {lo:.0f}-{hi:.0f} Hz")

# the map is coefficients x frames; frame t covers 20 ms centred at 10(t+1) ms
fmap = features.build_feature_map(w.samples, "exp2_26band_1ch")
c0 = fmap.values[:, :, 0]
loud = int(np.argmax(c0[0]))
print(f"\nloudest frame by first coefficient: {loud} "
      f"(~{0.01 * loud + 0.01:.2f} s into the window)")

out = os.path.join(os.path.dirname(__file__), "demo_run")
os.makedirs(out, exist_ok=True)
path = os.path.join(out, "window_map.pcgt")
features.save_feature_map(fmap, path)
again = features.load_feature_map(path)
print(f"saved and reloaded {path}: round trip ok = "
      f"{np.allclose(again.values, fmap.values, rtol=1e-6)}")
