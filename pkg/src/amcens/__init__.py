"""Deep-ensemble uncertainty quantification for automatic modulation classification."""

__version__ = "0.1.0"

from . import adversarial, dataset, ensemble, estimators, nncore, siggen, uqmetrics  # noqa: F401
