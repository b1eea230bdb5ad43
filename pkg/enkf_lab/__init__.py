"""
enkf-lab: ensemble Kalman updates, their exact oracles, covariance estimators
and a Monte Carlo harness for checking finite-ensemble error rates.
"""

__version__ = "0.3.0"
