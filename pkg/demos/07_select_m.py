"""Choose the number of strategy states by held-out likelihood."""

from fogfilter import EMConfig, GenConfig, demo_params, generate_dataset
from fogfilter.evaluation import select_m

params = demo_params()
games = generate_dataset(params, GenConfig(seed=7), 200)
res = select_m(games, [2, 4, 6, 8], folds=3, em_config=EMConfig(restarts=1, max_iters=100))
for m, mean, hw in zip(res.m_values, res.mean, res.half_width):
    print(f"M={m}: mean held-out log-likelihood {mean:9.1f} +- {hw:.1f}")
print("best M:", res.best)
