"""Multi-task aesthetic quality assessment.

Thin python surface over the C++ core: symmetric-matrix kernels, the
closed-form task-covariance update, delta-threshold labeling, and the
generate/train/eval pipeline used by the ``mtaesth`` CLI.
"""

from mtaesth._core import (
    MtaesthError,
    covariance_to_correlation,
    delta_label,
    gradient_check,
    psd_sqrt,
    run_eval,
    run_gen,
    run_train,
    sym_eigendecompose,
    sym_inverse,
    update_omega,
    __version__,
)

__all__ = [
    "MtaesthError",
    "covariance_to_correlation",
    "delta_label",
    "gradient_check",
    "psd_sqrt",
    "run_eval",
    "run_gen",
    "run_train",
    "sym_eigendecompose",
    "sym_inverse",
    "update_omega",
    "__version__",
]
