"""Discrete audio-latent tokenization and early-fusion language modeling.

The package is self-contained on NumPy: a minimal reverse-mode autodiff
engine (`tensor`), transformer building blocks and AdamW (`nn`), a
vector quantizer (`vq`), conditional flow matching (`flow`), the
tokenizer pipeline (`pipeline`), a byte-level fusion LM with LoRA
adapters (`lm`), distribution metrics (`evaluation`), synthetic data and
binary formats (`data`), and a command-line front end (`cli`).
"""

import os as _os

# BLAS thread counts are read when the library loads, so deterministic mode
# must pin them before the first numpy import anywhere in this package.
if _os.environ.get("MSN_DETERMINISTIC") == "1":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")

from .tensor import Tensor, grad_check, no_grad, run_gradient_suite

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "no_grad", "run_gradient_suite", "__version__"]
