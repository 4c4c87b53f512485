"""Calibration driver: measure acceptance-criterion margins at moderate reps."""
import sys, time
import numpy as np
from hybridec.simulation import (
    DgpConfig, setting_dgp, setting_runs, power_runs, run_replicates, power_curve,
)

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
trees = int(sys.argv[2]) if len(sys.argv) > 2 else 100
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 20250809

def show(label, result):
    print(f"--- {label}")
    for s in result.estimators:
        sd = np.sqrt(s.variance)
        mc_se = sd / np.sqrt(s.n_used)
        print(f"{s.name:>5}: bias={s.bias:+.4f} ({abs(s.bias)/max(sd,1e-9):.3f} sd, {abs(s.bias)/max(mc_se,1e-12):.1f} mc-se) "
              f"mse={s.mse:.4f} cov={s.coverage:.3f} rej={s.rejection_rate:.3f} width={s.mean_ci_width:.3f} fail={s.n_failed}")
    return result

t0 = time.time()
for setting in (2, 3, 4):
    cfg = setting_dgp(setting)
    runs = setting_runs(setting, n_boot=300, trees=trees)
    t = time.time()
    res = run_replicates(cfg, runs, n_reps=reps, seed=seed)
    show(f"setting {setting} ({time.time()-t:.0f}s)", res)

t = time.time()
res = run_replicates(setting_dgp(1), setting_runs(1, n_boot=300), n_reps=reps, seed=seed)
show(f"setting 1 ({time.time()-t:.0f}s)", res)

print(f"total {time.time()-t0:.0f}s")
