"""Monte Carlo verification of mean/fluctuation factorizations for stochastic drivers."""
__version__ = "0.1.0"
