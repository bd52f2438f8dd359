# %% [markdown]
# # The whole experiment from a config
#
# The harness trains the user model, profiles cuts, calibrates the defense,
# measures MI and runs the attack per cut, then writes CSV and JSON reports.
# This is the same path as ``splitpriv run --config ...``.

# %%
import tempfile
from pathlib import Path

from splitpriv.harness import emit_report, from_mapping, run_pipeline

out = Path(tempfile.mkdtemp())
cfg = from_mapping({
    "out": str(out), "cuts": ["conv1", "conv4"], "data.n": 1200,
    "user.epochs": 4, "baseline.epochs": 4, "attack_train.epochs": 2, "mi.n_samples": 500,
})
record = run_pipeline(cfg)
emit_report(record, out)

# %%
for r in record.reports:
    print(f"{r.cut}: PA {r.pa:.3f}  MI reduction {r.mi_reduction:.2f}  PI {r.pi:.3f}  flops {r.flops_ratio:.3f}")
print((out / "reports.csv").read_text())
