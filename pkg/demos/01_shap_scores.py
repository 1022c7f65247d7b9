"""
Two-sample SHAP scores and the Monte-Carlo SHAP curve
=====================================================

The SHAP value of feature ``a`` at ``x`` is the average, over a background
draw ``x'``, of a Shapley-weighted sum of increments of the regression.
For a linear regression it has a closed form, which makes a good first check.
"""

import numpy as np

from shapinfer import LinearModel, SubsetStrategy, psi_score, shap_curve_mc

rng = np.random.default_rng(0)

# a linear regression in three coordinates
mu = LinearModel([1.0, 2.0, 3.0])

# the increments telescope: psi_a(x, x') = b_a (x_a - x'_a)
x = np.array([0.0, 1.0, 0.0])
x_prime = np.zeros(3)
print("psi_1(x, x') =", psi_score(mu, x, x_prime, a=1))

# averaging over background rows gives the SHAP curve b_a (x_a - mean_a)
background = rng.normal(loc=[0.5, -1.0, 2.0], size=(5000, 3))
points = rng.normal(size=(5, 3))
est, stderr = shap_curve_mc(mu, points, background, a=1, m=2000, rng=rng, return_stderr=True)
truth = 2.0 * (points[:, 1] - background[:, 1].mean())
for e, s, t in zip(est, stderr, truth):
    print(f"estimate {e:+.4f} +- {s:.4f}   closed form {t:+.4f}")

# efficiency: SHAP values over all features add up to mu(x) - E mu(X')
def bumpy(rows):
    rows = np.atleast_2d(rows)
    return np.tanh(rows[:, 0]) * rows[:, 1] + np.sin(rows[:, 2])

point = rng.normal(size=3)
total = sum(shap_curve_mc(bumpy, point, background, a, background.shape[0]) for a in range(3))
print("sum of SHAP values:", total)
print("mu(x) - mean mu(x'):", bumpy(point)[0] - bumpy(background).mean())

# with many features, sample coalitions from the Shapley distribution instead
mu_wide = LinearModel(rng.normal(size=20))
xw, xpw = rng.normal(size=(2, 20))
sampled = psi_score(mu_wide, xw, xpw, 4, SubsetStrategy("sampled", 256), rng)
print("sampled psi:", sampled, " exact:", mu_wide.coef[4] * (xw[4] - xpw[4]))
