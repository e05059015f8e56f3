"""swpnet: CPU micro-framework for fine-grained recognition with residual
backbones, spatially-weighted pooling, and binned bounding-box localisation."""

__version__ = "0.1.0"

from .autodiff import GradTape, RandomFill, Tensor, backward, grad_check, tensor_create  # noqa: F401
