"""Probabilistic forecasting of the Italian-German 10-year sovereign spread.

Pipeline: GDELT GKG news ingestion -> feature selection funnel -> Nelson-Siegel
term-structure factors -> autoregressive LSTM forecaster with a parametric
distribution head (plus a gradient-boosting baseline) -> rolling out-of-sample
evaluation with quantile losses, Diebold-Mariano and Fluctuation tests.
"""

__version__ = "0.1.0"
