"""Object-centric consensus-game classifier."""
__version__ = "0.1.0"
