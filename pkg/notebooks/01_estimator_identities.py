# %% [markdown]
# # Per-token divergence estimators
#
# The replay regularizer scores each replayed token by `f(u)` with `u = pi_theta / pi_old`.
# Averaged under the old policy, `f_js` recovers twice the Jensen-Shannon divergence and
# `f_fkl` recovers KL(pi_old || pi_theta). This script checks both identities on random
# categorical pairs and looks at how the two generators weigh large and small ratios.

# %%
import math

import numpy as np

from dyjr.divergence import closed_form_js, closed_form_kl, exact_estimator_sum, f_fkl, f_js

rng = np.random.default_rng(0)

# %% [markdown]
# ## Exact sums against closed forms

# %%
worst_js = worst_kl = 0.0
for _ in range(1000):
    size = int(rng.integers(2, 17))
    p = rng.dirichlet(np.full(size, 0.5))
    q = rng.dirichlet(np.full(size, 0.5))
    worst_js = max(worst_js, abs(exact_estimator_sum(p, q, "js") - 2 * closed_form_js(p, q)))
    worst_kl = max(worst_kl, abs(exact_estimator_sum(p, q, "forward_kl") - closed_form_kl(p, q)))
print(f"max |sum p f_js(q/p) - 2 JS| = {worst_js:.2e}")
print(f"max |sum p f_fkl(q/p) - KL|  = {worst_kl:.2e}")

# %% [markdown]
# ## Boundedness
#
# JS saturates at ln 2 when the supports are disjoint, while forward KL diverges.

# %%
p = np.array([0.5, 0.5, 0.0, 0.0])
q = np.array([0.0, 0.0, 0.3, 0.7])
print("JS  on disjoint supports:", closed_form_js(p, q), "ln 2 =", math.log(2))
print("KL  on disjoint supports:", closed_form_kl(p, q))

# %% [markdown]
# ## Shape of the generators
#
# `f_js` grows like `u ln 2` for large ratios and tends to ln 2 as `u -> 0`, so a replayed
# token the policy has abandoned contributes a bounded penalty. `f_fkl` grows without bound
# as `u -> 0`.

# %%
for u in [1e-4, 1e-2, 0.5, 1.0, 2.0, 1e2, 1e4]:
    print(f"u = {u:8.0e}   f_js = {float(f_js(u)):10.4f}   f_fkl = {float(f_fkl(u)):10.4f}")
