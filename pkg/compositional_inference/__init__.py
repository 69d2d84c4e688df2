"""
Probabilistic compositional inference for systems of systems.

Subsystems with their own local models and estimators are joined into a
directed graph and advanced in time by coupling schedules that exchange
interface messages, optionally carrying variances.
"""

__version__ = "0.1.0"
