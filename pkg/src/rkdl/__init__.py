"""Learning dynamical systems from noisy data with Runge-Kutta constrained networks."""

__version__ = "0.1.0"
