"""Sample synthetic openings from the built-in demo model and look at one game.

Each epoch records production P, kills K, scouted counts O, scouting effort E
and the true counts U. Only K, O and E are visible to the filter later.
"""

import numpy as np

from fogfilter import GenConfig, demo_params, generate_dataset

params = demo_params()
games = generate_dataset(params, GenConfig(T=13, seed=1), 50)
names = params.catalog.names

g = games[0]
print(f"game {g.id}: {g.T} epochs, types {', '.join(names)}")
for ep in g.epochs:
    print(f"  t={ep.t:2d} E={ep.E:.2f} U={ep.U.tolist()} O={ep.O.tolist()}")

U = np.stack([g.array("U") for g in games])
print("\nmean final count per type over 50 games:")
for name, m in zip(names, U[:, -1].mean(axis=0)):
    print(f"  {name:12s} {m:5.2f}")
