"""Word confidence estimation for speech recognition output.

Bi-directional recurrent models over one-best sequences, confusion networks
and lattices, built on a small reverse-mode differentiation engine.
"""

__version__ = "0.1.0"
