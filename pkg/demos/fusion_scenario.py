"""Run the fusion engine inside a simulated scenario and compare it with its channels.

Accepted detections restart every channel on the detected box, as a real
tracker would be reinitialised. The per-frame marginal probability of each
channel being correct is written to ``marginals.csv`` for plotting.
"""
import csv
import sys

from trackfusion import ScenarioConfig, channel_recalls, evaluate_trace, run_closed_loop

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ScenarioConfig(frames=2000, seed=seed)
run = run_closed_loop(cfg)

engine = evaluate_trace(run.outputs, run.trace).recall
channels = channel_recalls(run.trace)
print(f"seed {seed}: engine recall {engine:.4f}")
for c, r in enumerate(channels):
    print(f"  channel {c} recall {r:.4f}")
counts = {}
for o in run.outputs:
    counts[o.detection] = counts.get(o.detection, 0) + 1
print("detections:", counts, " learning passes:", run.engine.learn_count)

with open("marginals.csv", "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["frame"] + [f"channel{c}" for c in range(cfg.n)] + [f"truth{c}" for c in range(cfg.n)])
    for o, rec in zip(run.outputs, run.trace):
        w.writerow([o.frame, *(f"{m:.4f}" for m in o.marginals), *(int(b) for b in rec.correct)])
print("wrote marginals.csv")
