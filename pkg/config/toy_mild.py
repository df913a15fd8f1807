"""Toy experiment, mild domain shift."""

experiment = "toy_mild"
preset = "mild"
seed = 0

# Network
hidden_dims = (32, 16)

# Adaptation
alpha = 0.1
gamma = 0.5
batch_size = 64
epochs_source = 50
epochs_target = 30

# Laplace
laplace_variant = "kronecker"
laplace_temperature = 0.4
laplace_mc_samples = 10
