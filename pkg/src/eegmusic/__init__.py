"""EEG and music cross-modal affect recognition and retrieval.

Modules: ``autodiff`` (reverse-mode differentiation engine), ``signal``
(differential-entropy features), ``data`` (file formats, folds, synthetic
data), ``model`` (bi-stream network), ``training`` (objective, early stopping,
cross-validation), ``evaluation`` (accuracy and retrieval metrics) and ``cli``.
"""

__version__ = "0.1.0"
