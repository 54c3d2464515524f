"""Modality-agnostic vision transformer for face anti-spoofing, desk scale.

A single-branch transformer that tokenizes every modal image into one
shared embedding space, disentangles modality-specific patch tokens from
the liveness decision, fuses the remaining evidence across modalities,
and can then score any subset of the trained modalities from one set of
weights. Ships with a self-contained float64 autodiff core, a seeded
synthetic multi-spectral dataset, the standard presentation-attack
metrics, and a command-line front end.
"""

from .config import CROSS_TAG, ModalityId, ModelConfig
from .model import MAViT
from .tensor import Tensor

__all__ = ["CROSS_TAG", "MAViT", "ModalityId", "ModelConfig", "Tensor"]

__version__ = "0.1.0"
