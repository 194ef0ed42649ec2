"""Not seeing a unit is evidence too.

On games where the target type never appears, error at the final epoch should
shrink as the filter gets to see more epochs of (empty) scouting reports.
"""

from fogfilter import GenConfig, demo_params, generate_dataset
from fogfilter.evaluation import ExperimentConfig, run_horizon_experiment

params = demo_params()
target = params.catalog.names.index("reaver")
games = generate_dataset(params, GenConfig(seed=5), 60)
res = run_horizon_experiment(games, params, ExperimentConfig(R=300, runs_per_game=1),
                             [target])["reaver"]
for h, m, w in zip(res.horizons, res.curve.mean, res.curve.half_width):
    print(f"evidence through epoch {h:2d}: error {m:.3f} +- {w:.3f}")
rho, p = res.trend()
print(f"{res.n_games} games, Spearman rho {rho:.2f} (p={p:.1e})")
