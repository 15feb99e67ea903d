"""Few-shot acquisition functions for Bayesian optimisation.

A learned acquisition function built from an ensemble of dueling Q-network
particles, trained with Stein variational Bayesian DQN and a meta-learned
initialisation, together with classic acquisition baselines and an
experiment harness.
"""

__version__ = "0.1.0"
