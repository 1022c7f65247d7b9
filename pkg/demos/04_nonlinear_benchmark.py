"""
Curve accuracy on the nonlinear five-covariate design
=====================================================

The benchmark regression mixes sines, cosines, an interaction and a sigmoid.
The target is feature index 1; its SHAP curve has no closed form, so a
Monte-Carlo oracle with exact subset enumeration is the reference. This
small run uses a cheap random-feature learner; the command line
``shapinfer simulate`` runs the feedforward version on the full desk grid.
"""

import numpy as np

from shapinfer import LearnerConfig, aggregate, generate_run, run_coverage_study, run_curve_experiment

data, run = generate_run(seed=0, n=1000, oracle_m=2000)
print("covariance of the design:\n", np.round(run.sigma, 3))
print("oracle SHAP at the first evaluation points:", np.round(run.oracle_shap[:5], 3))

learner = LearnerConfig(kind="ridge_rff", n_features=300, ridge=1e-3)
rows = run_curve_experiment([500, 2000], seeds=2, methods=[("naive", "split"), ("orthogonal", "reuse")],
                            learner=learner, oracle_m=2000)
for (n, loss, protocol), stats in aggregate(rows).items():
    print(f"n={n:5d} {loss:>10}/{protocol:<5} mean MSE {stats['mean']:.3f} (s.e. {stats['stderr']:.3f})")

# coverage of the interval on the linear-Gaussian design, where the target is exact
report = run_coverage_study("linear", p=2.0, a=0, n=1000, reps=50)
print(f"coverage over {report['reps']} replications: {report['coverage']:.2f}"
      f" (mean width {report['mean_width']:.3f})")
