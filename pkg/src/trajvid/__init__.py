"""Training-free trajectory-controlled video diffusion testbed."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, stop_gradient  # noqa: F401
