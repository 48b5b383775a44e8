"""Anti-mimicry image protection at desk scale.

Crafts bounded adversarial perturbations for images by alternating
look-ahead fine-tuning of toy diffusion surrogates with projected
sign-gradient ascent on a combined denoise / upscale / style objective,
then measures protection by fine-tuning fresh models on the protected
images and scoring their generations.
"""

__version__ = "0.1.0"

from styleguard.errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    VocabularyError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "VocabularyError",
    "__version__",
]
