"""Structure learning and hidden-variable discovery for discrete dynamic Bayesian networks."""
