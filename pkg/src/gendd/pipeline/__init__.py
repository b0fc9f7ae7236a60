"""End-to-end distillation runs: config, data, models, training and ablations."""
