"""Toy experiment, strong domain shift: the blue target cluster lands in the red region."""

experiment = "toy_strong"
preset = "strong"
seed = 0

hidden_dims = (32, 16)

epochs_source = 50
epochs_target = 30

laplace_variant = "kronecker"
laplace_mc_samples = 10

# Decision surfaces
grid_bounds = (-10.0, 10.0, -10.0, 10.0)
grid_resolution = 100

# Shift sweep
sweep_shift_scales = (0.0, 0.25, 0.5, 0.75, 1.0)
sweep_seeds = (0, 1, 2, 3, 4)
