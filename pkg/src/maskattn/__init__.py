"""Binary-gated cross-attention inside a toy latent-diffusion trainer."""
from .kernels import BACKEND
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "backward", "grad_check", "no_grad", "__version__"]
