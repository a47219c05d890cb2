"""Occlusion-aware person re-identification on a from-scratch numpy autodiff core.

Submodules:

``tensor``      reverse-mode tensors, ops and ``grad_check``
``kernels``     numba kernels with numpy fallbacks (``OGFR_NUMBA=0`` forces numpy)
``synth``       procedural pedestrians, parsing masks, occluders and archives
``occlusion``   pixel counts and occlusion bits per coarse part
``encoder``     occlusion-aware ViT encoder
``fep``         erasing agent, REINFORCE and purification decoder
``losses``      distillation, identity, parsing and triplet losses
``model``       full two-branch forward step
``train``       training loop and checkpoints
``retrieval``   visibility-gated distance, CMC and mAP
``verify``      gradient, policy-gradient and invariant self-checks
"""

from .config import Config
from .errors import (CheckpointError, ConfigError, ContractError, FormatError, NumericError,
                     OGFRError, ShapeError)

__version__ = "0.1.0"

__all__ = ["Config", "CheckpointError", "ConfigError", "ContractError", "FormatError",
           "NumericError", "OGFRError", "ShapeError", "__version__"]
