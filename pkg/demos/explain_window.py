"""Attribute a trained model's verdict to regions of the feature map.

Trains a quick model, then explains one abnormal window two ways:
column-grouped Shapley values (which 10 ms frames drove the probability)
and an occlusion map (how the probability reacts when a 3x3 patch of the
map is blanked). Both are written as PGM images next to their CSVs.
"""

import os

import numpy as np

from pcgkit import architectures, data, explain, net, synth

# quick corpus and one trained network
recordings = []
for i in range(8):
    abnormal = i >= 4
    recordings.append(synth.synth_pcg(synth.SynthConfig(
        duration_s=3.0, abnormal=abnormal, seed=80 + i, noise_level=0.04,
        jitter=0.02, recording_id=f"{'a' if abnormal else 'n'}{i:04d}")))
windows = []
for rec in recordings:
    windows.extend(data.window_signal(rec))
balanced, rest = data.build_balanced_db(windows, seed=5)
dataset = architectures.assemble_inputs(windows, "final")

spec = architectures.build_model("final")
bal_rows = dataset.rows_for([w.window_id for w in balanced])
cfg = net.TrainConfig(max_epochs=60, patience=60, batch_size=64, seed=5)
weights = net.init_weights(spec, seed=5)
weights, history = net.train_network(
    spec, weights, dataset.x[bal_rows], dataset.labels[bal_rows],
    np.zeros((0,) + spec.input_shape), np.zeros(0), cfg)
print(f"trained {len(history)} epochs, last loss {history[-1][1]:.3f}")

target = next(i for i, wid in enumerate(dataset.window_ids)
              if wid.startswith("a"))
x = dataset.x[target].astype(np.float64)
wid = dataset.window_ids[target]

def model_fn(maps):
    return net.predict_batch(spec, weights, maps)

# Shapley against the balanced-db mean map, one group per frame column
baseline = dataset.x[bal_rows].astype(np.float64).mean(axis=0)
attr = explain.shapley_grouped(model_fn, x, baseline, m=300, seed=5)
print(f"\n{wid}: p(abnormal) {attr.target_output:.3f}, "
      f"baseline output {attr.base_value:.3f}")
top = np.argsort(np.abs(attr.group_values))[::-1][:5]
for t in sorted(top):
    print(f"  frame {t:2d} (~{explain.frame_to_time(int(t)):.2f} s): "
          f"phi = {attr.group_values[t]:+.4f}")

out = os.path.join(os.path.dirname(__file__), "demo_run", "explanations")
os.makedirs(out, exist_ok=True)
files = explain.render_heatmap(attr.values[:, :, 0],
                               os.path.join(out, "shap_" + wid.replace("#", "_")),
                               mode="signed")

# occlusion: slide a 3x3 blank over the map, record the output each time
occ = explain.occlusion_map(model_fn, x, kernel=(3, 3), fill=0.0)
drop = occ.intact_output - occ.values
print(f"\nocclusion grid {occ.values.shape}, intact output "
      f"{occ.intact_output:.3f}, biggest drop {drop.max():.3f}")
files += explain.render_heatmap(np.abs(drop),
                                os.path.join(out, "occlusion_" + wid.replace("#", "_")))
print("\nwrote:")
for f in files:
    print(f"  {f}")
