"""Filtering error of the model, the model without scouting and the averaging baseline."""

from fogfilter import GenConfig, demo_params, fit_baseline, generate_dataset
from fogfilter.evaluation import ExperimentConfig, run_filtering_experiment

params = demo_params()
train = generate_dataset(params, GenConfig(seed=4), 200)
test = generate_dataset(params, GenConfig(seed=40), 30)
cfg = ExperimentConfig(R=300, runs_per_game=1, seed=0)
curves = run_filtering_experiment(test, params, fit_baseline(train), cfg, types=[1, 2])

for (name, variant), c in sorted(curves.items()):
    cells = " ".join(f"{m:5.2f}" for m in c.mean)
    print(f"{name:8s} {variant:13s} {cells}")
