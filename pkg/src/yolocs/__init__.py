"""DCFS backbone blocks, asymmetric decoupled heads and the tooling to cost and verify them."""

__version__ = "0.1.0"
