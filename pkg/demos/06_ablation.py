"""
Ablation: mask annealing and confidence refinement
==================================================

Runs the five ablation rows on two seeds at reduced size and prints the
median recall table. `uda-forge ablate` runs the same driver at full size.
"""
import tempfile

from uda_forge import app
from uda_forge.config import RunConfig

cfg = RunConfig(n_source=120, n_target=120, n_source_holdout=60,
                E_pre=15, E_teach=6, E_decay=2, E_reinit=4, probe_size=16, froc_every=0)

with tempfile.TemporaryDirectory() as d:
    res = app.ablate(cfg, seeds=(1, 2), out_dir=d, workers=1)

print(f"{'config':<18}" + "".join(f"R@{f:<6g}" for f in res.fpi))
for row in res.runs:
    print(f"{row:<18}" + "".join(f"{r:<8.3f}" for r in res.median(row)))

# with ACR the threshold only rises, so pseudo-label counts are governed by a non-decreasing C
th = res.thresholds["+MA+ACR"][0]
print(f"+MA+ACR threshold: first {th[0]:.3f}  last {th[-1]:.3f}  non-decreasing: {th == sorted(th)}")
