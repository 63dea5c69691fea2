"""Policy-gradient tracking control of a two-strain optogenetic chemostat consortium."""

__version__ = "0.1.0"
