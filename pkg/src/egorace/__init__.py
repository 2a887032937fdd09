"""Vision-based competitive racing with an asymmetric recurrent QR-SAC agent."""

__version__ = "0.1.0"
