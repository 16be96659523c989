"""Next-scale visual autoregression at desk scale.

A small, fully testable stack for coarse-to-fine token-map prediction on
toy images: residual multi-scale vector quantization over a linear patch
codec, a block-causal scale transformer whose context tokens are gated
by Laplacian edge guidance, cumulative full-scale consistency
supervision alongside the token cross-entropy, and the diagnostics to
inspect all of it.
"""

__version__ = "0.1.0"

from . import (
    analysis,
    checkpoint,
    codec,
    config,
    data,
    guidance,
    losses,
    model,
    ndcore,
    pipeline,
)

__all__ = [
    "analysis",
    "checkpoint",
    "codec",
    "config",
    "data",
    "guidance",
    "losses",
    "model",
    "ndcore",
    "pipeline",
    "__version__",
]
