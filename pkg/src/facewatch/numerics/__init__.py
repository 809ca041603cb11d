"""Desk-scale neural numerics: patch encoder, vector quantization, masked
prediction losses, and patch-relevance maps, all with oracle-checkable
gradients.

Everything here is pure given immutable weights and small enough to verify
against brute force or finite differences.
"""

from .patches import PatchSet, patchify, unpatchify
from .encoder import (
    TransformerLayer,
    EncoderState,
    random_encoder,
    vit_forward,
    vit_forward_with_cut,
    tail_forward,
)
from .vqkd import (
    Codebook,
    TeacherTargets,
    VqkdResult,
    random_codebook,
    teacher_targets,
    quantize,
    quantize_rows,
    vqkd_loss,
    vqkd_fd_grads,
)
from .mim import (
    MaskSpec,
    MimResult,
    make_mask,
    mim_loss,
    mim_fd_grads,
    cls_logits,
    total_loss,
    descent_check,
)
from .gradcam import (
    LinearHead,
    CamMap,
    class_score,
    grad_wrt_patch_embeddings,
    grad_cam,
    occlusion_drops,
)
from .selfcheck import CheckResult, run_selfcheck

__all__ = [
    "PatchSet", "patchify", "unpatchify",
    "TransformerLayer", "EncoderState", "random_encoder",
    "vit_forward", "vit_forward_with_cut", "tail_forward",
    "Codebook", "TeacherTargets", "VqkdResult", "random_codebook",
    "teacher_targets", "quantize", "quantize_rows", "vqkd_loss", "vqkd_fd_grads",
    "MaskSpec", "MimResult", "make_mask", "mim_loss", "mim_fd_grads",
    "cls_logits", "total_loss", "descent_check",
    "LinearHead", "CamMap", "class_score", "grad_wrt_patch_embeddings",
    "grad_cam", "occlusion_drops",
    "CheckResult", "run_selfcheck",
]
