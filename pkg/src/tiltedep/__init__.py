"""Expectation-propagation-style inference on partitioned data."""

__version__ = "0.1.0"
