"""Evolving voxel soft-actuator morphologies with AFPO, NEAT and HyperNEAT."""

__version__ = "0.1.0"
