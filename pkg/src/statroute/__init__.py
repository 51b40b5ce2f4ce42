"""Statistical-QoS routing for cognitive radio networks with primary-user protection."""

__version__ = "0.1.0"

__all__ = ["__version__"]
