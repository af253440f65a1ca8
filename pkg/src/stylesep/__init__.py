"""stylesep: adversarial separation of anatomy and acquisition style.

Compresses multi-site images into a domain-invariant code and a small
domain-specific style code, trained adversarially, and recombines them either
in latent space or as an interpretable image-space sum
``x' = f_D(z_u) + alpha * f_D(z_d)``.  Ships a synthetic multi-domain phantom
dataset, four trainable models plus two feature-space baselines, and the full
quantitative/qualitative evaluation battery.
"""

from .core import (
    ArtifactError,
    ConfigError,
    ContractError,
    Dataset,
    Decomposition,
    Diagnosis,
    EmptyInputError,
    Image,
    LatentCode,
    Split,
    StyleSepError,
    SubjectRecord,
    TrainingAbort,
)

__version__ = "0.1.0"

__all__ = [
    "ArtifactError",
    "ConfigError",
    "ContractError",
    "Dataset",
    "Decomposition",
    "Diagnosis",
    "EmptyInputError",
    "Image",
    "LatentCode",
    "Split",
    "StyleSepError",
    "SubjectRecord",
    "TrainingAbort",
    "__version__",
]
