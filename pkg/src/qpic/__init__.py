"""Differentiable tensor-network simulation and design optimization of
Kerr-nonlinear photonic waveguide circuits at low photon number."""

from qpic.fock import FockSpace, TwoModeGate

__version__ = "0.1.0"

__all__ = ["FockSpace", "TwoModeGate", "__version__"]
