"""Shop-level meta-learning for cold-start item advertisement.

A marketplace hosts many shops; most have too few sales to train a
recommender of their own, and brand-new shops have none at all. This
package trains one shared initialisation across shops so that a few
gradient steps on a handful of support purchases produce a usable
per-shop model, and measures whether that actually helps the small and
new shops rather than just the big ones.

Modules:
  numcore     dense layers, losses, gradients, SGD and Adam steps
  models      two-tower / joint scorers and the distance baseline
  metaopt     local adaptation, meta-training, fair-training variants
  datapipe    interaction files, task building, negative sampling,
              synthetic marketplace generation
  metrics     recall / nDCG / MAE and shop-level aggregation
  evaluation  scoring ranked candidate pools per shop
  checkpoint  canonical JSON model serialisation
  cli         the command-line front end
"""

from .errors import (
    ColdUserError,
    ConfigError,
    DataError,
    EmptyBatchError,
    MetaShopError,
    NumericError,
    SamplingError,
    ShapeError,
)

__all__ = [
    "ColdUserError",
    "ConfigError",
    "DataError",
    "EmptyBatchError",
    "MetaShopError",
    "NumericError",
    "SamplingError",
    "ShapeError",
]

__version__ = "0.1.0"
