"""Composed image retrieval through fine-grained textual inversion.

A frozen dual-encoder backbone supplies image and text embeddings; this
package learns to invert an image into one subject pseudo token plus a
variable number of attribute pseudo tokens, renders them into prompt
templates, and retrieves against an exact cosine index. See the README for
the CLI, the service, and the file formats.
"""

__version__ = "0.1.0"

from .backbone import (
    Backbone,
    BackboneConfig,
    ImageFeatures,
    TokenSequence,
    ToyBackbone,
    load_backbone,
)
from .errors import (
    CaptionNotFoundError,
    ConfigError,
    DataError,
    FormatError,
    FticirError,
    InputError,
)
from .inversion import (
    FilterConfig,
    InversionConfig,
    InversionNetwork,
    PseudoTokens,
    filter_attributes,
)
from .losses import LossWeights, contrastive_loss, orthogonal_loss, total_loss, triwise_loss
from .textgen import CaptionSplit, LexiconTagger, TemplateBundle, split_caption

__all__ = [
    "Backbone",
    "BackboneConfig",
    "CaptionNotFoundError",
    "CaptionSplit",
    "ConfigError",
    "DataError",
    "FilterConfig",
    "FormatError",
    "FticirError",
    "ImageFeatures",
    "InputError",
    "InversionConfig",
    "InversionNetwork",
    "LexiconTagger",
    "LossWeights",
    "PseudoTokens",
    "TemplateBundle",
    "TokenSequence",
    "ToyBackbone",
    "contrastive_loss",
    "filter_attributes",
    "load_backbone",
    "orthogonal_loss",
    "split_caption",
    "total_loss",
    "triwise_loss",
    "__version__",
]
