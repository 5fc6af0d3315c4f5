"""Active channel sensing laboratory.

A desk-scale simulator for adaptive wireless channel acquisition: an
LSTM-driven agent that designs its sensing vectors on the fly (mmWave beam
alignment and RIS reflection alignment), together with the classical
baselines it is measured against (OMP, hierarchical codebook search,
posterior matching, LMMSE, MRT, phase matching).
"""

from activesense.numerics import ComplexVector, RandomStream

__all__ = ["ComplexVector", "RandomStream"]
__version__ = "0.1.0"
