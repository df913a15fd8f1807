"""Toy experiment with a target-private class."""

experiment = "toy_open_set"
preset = "mild"
open_set = True
n_private = 150

# Unknown-class rejection threshold, calibrated on held-out source data
holdout_fraction = 0.2
unknown_percentile = 99.0

laplace_variant = "full"
