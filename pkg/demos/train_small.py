"""Train and cross-validate the final model on a tiny synthetic corpus.

Runs the whole protocol end to end: window the recordings, balance the
classes, split recordings into folds, train one network per fold and vote
window probabilities up to recording verdicts. Small on purpose; expect a
couple of minutes and imperfect accuracy.
"""

import os
import time

from pcgkit import architectures, data, evaluate, net, synth

recordings = []
for i in range(12):
    abnormal = i >= 6
    recordings.append(synth.synth_pcg(synth.SynthConfig(
        duration_s=3.0, abnormal=abnormal, seed=60 + i, noise_level=0.05,
        jitter=0.02, recording_id=f"{'a' if abnormal else 'n'}{i:04d}")))

windows = []
for rec in recordings:
    windows.extend(data.window_signal(rec))
balanced, rest = data.build_balanced_db(windows, seed=3)
plan = data.make_folds(balanced, k=3, seed=3, rest=rest)
print(f"{len(windows)} windows, balanced db {len(balanced)}, "
      f"rest {len(rest)}, k={plan.k}")

dataset = architectures.assemble_inputs(windows, "final")
cfg = net.TrainConfig(max_epochs=25, patience=6, batch_size=64, seed=3)

out = os.path.join(os.path.dirname(__file__), "demo_run", "training")
t0 = time.time()
results, summary = evaluate.run_cv(dataset, plan, "final", cfg, out_dir=out)
print(f"\ntrained {plan.k} folds in {time.time() - t0:.0f} s")

for r in results:
    if r.status != "ok":
        print(f"fold {r.fold}: {r.status}")
        continue
    c = r.confusion
    print(f"fold {r.fold}: acc {r.metrics['accuracy']:.2f}  "
          f"sens {r.metrics['sensitivity']:.2f}  "
          f"spec {r.metrics['specificity']:.2f}  "
          f"(tp {c.tp} fp {c.fp} tn {c.tn} fn {c.fn})")
print(f"\nmean accuracy {summary['accuracy_mean']:.3f} "
      f"+/- {summary['accuracy_std']:.3f}")
print(f"artifacts under {out}: weights/fold_*.pcgw, metrics/cv_results.csv")
