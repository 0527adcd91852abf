"""Boundary-layer expansions for steady Navier-Stokes flow over a moving plate, with remainder solves and estimate audits."""

__version__ = "0.1.0"
