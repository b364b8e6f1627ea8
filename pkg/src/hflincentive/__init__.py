"""Two-level incentive mechanisms for hierarchical federated learning:
coalition formation among devices and Stackelberg pricing between cloud and edges."""

__version__ = "0.1.0"
