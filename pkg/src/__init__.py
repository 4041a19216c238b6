# src/__init__.py
"""
Learning policies for the Dynamic and Stochastic Inventory Routing Problem

An ML-CO pipeline (statistical prize model + exact prize-collecting TSP
oracle) trained by imitation of anticipative decisions, with the usual
rolling-horizon baselines and an experiment driver.
"""

__version__ = "1.0.0"
__description__ = "ML-CO policies for the dynamic and stochastic inventory routing problem"
