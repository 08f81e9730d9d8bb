"""The generalised estimators contain the classical ones as special cases.

With an intercept-only model and unit exposure every study shares one
fitted rate, and the generalised Chao and Zelterman estimators collapse to
n + f1^2 / (2 f2) and n / (1 - exp(-2 f2 / f1)).
"""
import numpy as np

from truncount.dataset import Dataset, StudyRecord, frequency_table
from truncount.estimators import (
    conventional_chao,
    conventional_zelterman,
    generalised_chao,
    generalised_zelterman,
)
from truncount.glm import fit

rng = np.random.default_rng(3)
counts = rng.poisson(1.2, size=200)
counts = counts[counts > 0]
d = Dataset(tuple(StudyRecord(f"s{i}", int(c), 1.0) for i, c in enumerate(counts)), truncated=True)
ft = frequency_table(d)
print(f"n = {ft.n}, f1 = {ft.f1}, f2 = {ft.f2}")

model = fit(d, "binomial", 1)
pairs = [
    ("Chao", generalised_chao(d, model).n_hat, conventional_chao(ft).n_hat),
    ("Zelterman", generalised_zelterman(d, model).n_hat, conventional_zelterman(ft).n_hat),
]
for name, general, classic in pairs:
    print(f"{name:10s} generalised {general:.10f}  classical {classic:.10f}  diff {general - classic:.1e}")
