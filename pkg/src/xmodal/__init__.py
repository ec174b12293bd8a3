"""Cross-modal sketch/text-to-image retrieval over a shared embedding.

Images are spatial feature grids attended by a sequential LSTM controller;
queries are ingested feature vectors. Both sides project into one unit
sphere where a margin cosine-embedding loss is trained and retrieval ranks
by (summed) cosine distance, evaluated with mean average precision.
"""

from . import kernels
from .errors import (
    DegenerateVectorError,
    DimensionError,
    DivergedTrainingError,
    EvaluationError,
    FormatError,
    ManifestError,
    ProtocolError,
    XModalError,
)

__version__ = "0.1.0"

__all__ = [
    "kernels",
    "XModalError",
    "DimensionError",
    "DegenerateVectorError",
    "EvaluationError",
    "ProtocolError",
    "FormatError",
    "ManifestError",
    "DivergedTrainingError",
    "__version__",
]
