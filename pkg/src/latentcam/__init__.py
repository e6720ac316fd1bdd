"""latentcam: desk-scale novel-trajectory video synthesis.

A flow-matching video generator conditioned on compressed latent state
tokens from a (stand-in) 4D reconstruction model, together with the full
evaluation protocol: similarity-aligned pose errors, cycle consistency,
and the adapter compression ablation.
"""

from .tensor_engine import Parameter, ParameterSet, Tensor, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "ParameterSet",
    "backward",
    "finite_diff_check",
    "__version__",
]
