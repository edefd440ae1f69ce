"""Certified ensemble deviation bounds for nearly integrable Hamiltonian systems.

The package estimates how fast ensemble averages of an observable relax to
their angle-averaged value under a flow ``H = h(I) + f(theta, I)`` and
checks the estimate against a five-term bound built from a resonance
partition, a first-order normal form and phase-mixing constants.
"""

__version__ = "0.1.0"
