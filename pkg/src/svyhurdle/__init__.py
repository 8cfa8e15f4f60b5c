"""Survey-weighted Bayesian hurdle beta-binomial inference."""

__version__ = "0.1.0"
