"""End-to-end neuroevolution of a world-model car-racing agent."""

__version__ = "0.1.0"
