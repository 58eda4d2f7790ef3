"""Controllable grounded captioning at desk scale.

A recurrent language model steered by a sequence (or learned ordering) of
region sets, trained with cross-entropy and self-critical reinforcement,
plus the alignment/assignment metric suite and a Sinkhorn sorting network.
"""

__version__ = "0.1.0"
