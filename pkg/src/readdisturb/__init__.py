"""Simulated DRAM read-disturbance characterization."""
__version__ = "0.1.0"
