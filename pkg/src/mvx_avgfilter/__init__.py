"""Particle simulation, averaging, and nonlinear filtering for two-time-scale
mean-field (McKean-Vlasov) SDEs."""

__version__ = "0.1.0"

SCHEMA_VERSION = "mvx-avgfilter v1"
