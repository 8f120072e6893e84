"""End-to-end label-uncertainty modeling for time-continuous arousal
regression from raw audio.

The package bundles a small reverse-mode autodiff engine, deterministic
and Bayes-by-Backprop layers, the annotation label model, the combined
concordance + ELBO + Gaussian-KL objective, a synthetic corpus
generator, and the training / evaluation / comparison pipeline.
"""

from emobayes import autodiff, dataset, evaluation, labels, layers, losses, metrics, model, training

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "labels",
    "layers",
    "losses",
    "metrics",
    "dataset",
    "model",
    "training",
    "evaluation",
    "__version__",
]
