"""Measurement-based quantum optimal control at desk scale.

Subpackages cover the dense operator kernel, the Belavkin filter, a qubit
HJB grid solver with Pontryagin diagnostics, Heisenberg-picture moment
filtering, LQG synthesis, and Monte Carlo verification.
"""

__version__ = "0.1.0"
