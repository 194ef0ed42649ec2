"""Predict which unit types will exist later in a game from early evidence."""

from fogfilter import GenConfig, demo_params, generate_dataset
from fogfilter.evaluation import ExperimentConfig, run_case_study

params = demo_params()
(game,) = generate_dataset(params, GenConfig(seed=6), 1)
names = params.catalog.names
curves = run_case_study(game, params, [4, 8], ExperimentConfig(R=300, runs_per_game=5))
for c in curves:
    print(f"evidence through epoch {c.checkpoint}:")
    for k, t in enumerate(c.epochs):
        probs = " ".join(f"{p:.2f}" for p in c.mean[k])
        print(f"  t={t:2d} {probs}")
print("types:", " ".join(names))
print("truth at the end:", game.epochs[-1].U.tolist())
