"""Train the tiny model with and without major tokens and compare held-out accuracy.

Takes about a minute on one core.
"""

from cagevit.experiments import sweep

for row in sweep("rho", [0.0, 0.5], steps=2000, seed=0, n_holdout=512, log=print):
    pass
