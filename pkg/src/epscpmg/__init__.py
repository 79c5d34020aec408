"""Simulation and analysis of rotation-offset CPMG sequences on dipolar spin ensembles."""

__version__ = "0.1.0"
