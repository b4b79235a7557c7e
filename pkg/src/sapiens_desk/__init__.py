"""Desk-scale human-centric vision stack.

Submodules:
    autodiff      reverse-mode tensor engine (numpy-backed buffers)
    gradcheck     finite-difference gradient oracle
    vit           vision-transformer encoder, config registry, cost models
    mae           masked-autoencoder pretraining objective
    heads         task heads and the four task losses
    skeleton      desk keypoint skeleton and body-part vocabulary
    datagen       procedural figure renderer, curation, augmentation
    fileio        PFM / PNG / keypoint-text / manifest / checkpoint formats
    trainer       AdamW, schedules, pretrain and finetune drivers
    metrics       evaluation protocols (OKS AP/AR, mIoU, depth, normals)
    report        CSV to SVG chart rendering
    cli           command-line entry point
"""

import os

# Thread caps must land before numpy loads its BLAS; numpy is first imported
# (transitively) by the autodiff import below.
_threads = os.environ.get("SAPIENS_DESK_THREADS")
if _threads is not None:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .autodiff import Tensor

__version__ = "0.1.0"
__all__ = ["Tensor", "__version__"]
