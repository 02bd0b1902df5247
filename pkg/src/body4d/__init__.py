"""body4d: compositional modeling of moving clothed human bodies.

A parametric skinned body decoder, a linear (PCA) motion prior, and
recurrent compensation networks compose into a sequence decoder that can
be trained from sampled surface points and fit to partial observations by
auto-decoding.
"""

__version__ = "0.1.0"
