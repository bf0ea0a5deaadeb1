"""Deformable inter-modality registration trained with intra-modality similarity.

Core pieces: dense volume containers and the XVOL format (:mod:`.volumes`),
a small reverse-mode autodiff substrate (:mod:`.autodiff`), the differentiable
trilinear warp (:mod:`.warp`), NCC and smoothness losses (:mod:`.losses`),
the patch-wise U-net (:mod:`.network`), synthetic paired phantoms
(:mod:`.phantom`), the training loop (:mod:`.training`), whole-volume tiled
inference (:mod:`.inference`), and DSC/ASD evaluation (:mod:`.metrics`).
"""

__version__ = "0.1.0"
