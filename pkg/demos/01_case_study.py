"""Estimating the number of studies in a meta-analysis with missing zeros.

The bundled data hold 27 studies reporting completed suicides after
bariatric surgery. Studies with no events were never published, so the
count distribution is zero-truncated and the total number of studies N is
unknown. This script walks from the raw records to the three estimates.
"""
from truncount.dataset import case_study, frequency_table, impute_missing_proportion
from truncount.estimators import estimate_all
from truncount.glm import fit_all_specs

data = case_study()
print(f"{len(data)} studies, frequencies {dict(frequency_table(data).counts)}")

# One study lacks the proportion of women; fill it by stepwise-BIC regression
# on exposure and origin before any covariate model is fitted.
data = impute_missing_proportion(data)

# Log-likelihood and BIC for the five linear predictors. The binomial model
# only sees studies with one or two events.
for family in ("poisson", "negbin", "binomial"):
    print(f"\n{family}")
    for m in fit_all_specs(data, family):
        print(f"  h{m.spec.index}: loglik {m.loglik:7.2f}  BIC {m.bic:6.2f}")

# Horvitz-Thompson uses the whole sample; generalised Chao and Zelterman use
# the ones and twos. Intervals are Wald intervals floored at the observed n.
print()
for key, est in estimate_all(data).items():
    print(f"{key}: N = {est.n_hat:7.1f}  var = {est.variance:8.1f}  "
          f"95% CI ({est.ci_lower:.0f}, {est.ci_upper:.0f})  model {est.model.family} h{est.model.spec.index}")
