"""Short-term traffic speed forecasting with sparse linear and deep predictors."""

__version__ = "0.1.0"
