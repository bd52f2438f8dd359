# %% [markdown]
# # Estimating mutual information
#
# The KSG estimator works from k-nearest-neighbour distances.  For correlated
# Gaussians the true value is known in closed form, which makes a handy check.

# %%
import math

import numpy as np

from splitpriv.mi import PairSet, estimate_mi, mi_reduction

rng = np.random.default_rng(0)
for rho in (0.3, 0.6, 0.8):
    x = rng.standard_normal(5000)
    y = rho * x + math.sqrt(1 - rho**2) * rng.standard_normal(5000)
    est = estimate_mi(PairSet(x[:, None], y[:, None]), "ksg", k=5)
    print(f"rho={rho}: ksg {est.value_nats:.4f}  exact {-0.5 * math.log(1 - rho**2):.4f}")

# %% [markdown]
# Adding noise to one side lowers the information it carries.  The relative
# drop is what the experiment reports as the MI reduction.

# %%
x = rng.standard_normal((3000, 2))
y = x + 0.3 * rng.standard_normal((3000, 2))
clean = estimate_mi(PairSet(x, y)).value_nats
noisy = estimate_mi(PairSet(x, y + 2.0 * rng.standard_normal(y.shape))).value_nats
print(f"clean {clean:.3f} nats, noisy {noisy:.3f} nats, reduction {mi_reduction(clean, noisy):.2f}")

# %%
hist = estimate_mi(PairSet(x[:, :1], y[:, :1]), "histogram", bins=16).value_nats
print(f"histogram plug-in on one coordinate: {hist:.3f} nats")
