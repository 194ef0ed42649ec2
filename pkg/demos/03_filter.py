"""Track hidden counts through one game with the particle filter."""

import numpy as np

from fogfilter import GenConfig, demo_params, generate_dataset, rbpf_filter

params = demo_params()
(game,) = generate_dataset(params, GenConfig(seed=3), 1)
out = rbpf_filter(game, params, R=500, rng=np.random.default_rng(0))
grid = np.arange(params.u_max + 1)
names = params.catalog.names

print(f"{'t':>2} {'type':12s} {'true':>4} {'seen':>4} {'E[U]':>6} {'P(U>0)':>7}")
for t in range(game.T):
    ep = game.epochs[t]
    for i in (1, 2):
        mean = out.marginals[t, i] @ grid
        print(f"{ep.t:2d} {names[i]:12s} {ep.U[i]:4d} {ep.O[i]:4d} {mean:6.2f} "
              f"{out.existence[t, i]:7.3f}")
print(f"evidence log-likelihood {out.total_loglik:.2f}, final ESS {out.ess[-1]:.0f}")
