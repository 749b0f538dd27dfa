"""Spectral binary hashing with anchor-graph affinities.

Learns a projection with orthonormal columns that maps feature vectors to
short binary codes, preserving neighborhood structure induced by an anchor
graph. Training runs either projected gradient descent or a Cayley-transform
update on the Stiefel manifold.
"""

__version__ = "0.1.0"
