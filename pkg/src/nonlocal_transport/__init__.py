"""Coarse-grained nonlocal diffusion models of anomalous solute transport.

Pipeline: solve Darcy flow through a periodic heterogeneous layer, advect
a particle ensemble along it, coarse-grain the particle density into 1D
breakthrough curves, then learn a nonnegative time-dependent nonlocal
kernel (plus classical, fractal-derivative and MLP baselines) that
reproduces and extrapolates those curves.
"""

__version__ = "0.1.0"
