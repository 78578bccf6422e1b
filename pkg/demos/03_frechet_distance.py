# %% Fréchet distance between Gaussians fitted to image features.
import numpy as np

from promptstyle.metrics import GaussianStats, MomentFeatures, fit_feature_gaussian, frechet_distance
from promptstyle.toy import texture_images

# %% 1-D sanity check: (m1 - m2)^2 + (s1 - s2)^2
a = GaussianStats(np.array([0.0]), np.array([[1.0]]), 1)
b = GaussianStats(np.array([2.0]), np.array([[9.0]]), 1)
print("1-D", frechet_distance(a, b), "expected", 2.0 ** 2 + (1 - 3) ** 2)

# %% texture styles are well separated under the desk features
fx = MomentFeatures()
fits = {s: fit_feature_gaussian([fx(x) for x in texture_images(s, 128, seed=5)])
        for s in ("ember", "glacier", "moss", "dusk")}
names = list(fits)
print("        " + " ".join(f"{n:>8s}" for n in names))
for r in names:
    print(f"{r:>8s}" + " ".join(f"{frechet_distance(fits[r], fits[c]):8.3f}" for c in names))
