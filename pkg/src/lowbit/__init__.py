"""lowbit: post-training quantization for toy language models.

Pieces: a minimal autodiff tensor engine, uniform-integer and
microscaling block-float codecs, activation-aware scale search,
first-order layer sensitivity scores, an exact mixed-precision bit
allocator, and sign-descent rounding refinement, wired together behind
a deterministic CLI.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    InfeasibleError,
    IngestionError,
    LowbitError,
    NumericError,
    PackError,
    ShapeError,
    SizeError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "InfeasibleError",
    "IngestionError",
    "LowbitError",
    "NumericError",
    "PackError",
    "ShapeError",
    "SizeError",
    "__version__",
]
