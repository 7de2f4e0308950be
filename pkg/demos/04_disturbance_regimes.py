"""
Low and high disturbance regimes
================================

Paired batches: run r of every architecture sees the same disturbance
stream. In the low regime every CBF architecture stays safe. In the high
regime the remote MPC-CBF, which only sees a delayed and predicted state,
starts to clip the obstacle while the plant-side filters hold.

A full 20-run sweep takes around half an hour per regime on one core;
pass a smaller run count for a quick look.

    python demos/04_disturbance_regimes.py [n_runs]
"""
import sys

from netcbf import config, montecarlo as mc

n_runs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
cfg = config.bundled()
ex = cfg.experiment()
cal, ctrl = mc.calibrate(ex, ex.controller)

for name in ("default", "high"):
    spec = config.bundled(name).disturbance_spec()
    rep = mc.run_batch(ex, cfg.architectures, spec, n_runs, ctrl)
    print(f"\nclip {spec.clip} ({n_runs} runs)")
    print(f"  {'architecture':12s} safe  reach  time[s]  jerk  lowest h")
    for s in rep.summaries:
        low = min(r.min_h for r in rep.records[s.architecture])
        print(f"  {s.architecture:12s} {s.safe_rate:.2f}  {s.reach_rate:.2f}   {s.avg_reach_time_s:6.3f}  "
              f"{s.peak_jerk_mean:5.1f}  {low:+.1e}")
