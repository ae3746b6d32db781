"""Adaptive P1/Crouzeix-Raviart finite elements with explicit flux
reconstruction and constant-free primal-dual gap error estimation."""

__version__ = "0.1.0"
