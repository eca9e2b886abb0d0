"""Federated training of stochastic neural networks with PAC-Bayes objectives,
and nonvacuous risk certificates for the result."""

__version__ = "0.1.0"
