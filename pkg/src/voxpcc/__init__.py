"""Learned point-cloud geometry compression workbench.

Voxel occupancy autoencoders with normalization activations, a scale
hyperprior entropy model, an octree block bitstream, geometry metrics
(point-to-point, point-to-plane, BD-rate), and an exact analytic cost
model for the architectures.
"""

__version__ = "0.1.0"
