"""Configuration, training, evaluation, gradient checks, sweeps and the command line."""
