import torch
import torch.nn.functional as F

from core.exceptions import ShapeMismatch


def distillation_loss(z_teacher: torch.Tensor, z_student: torch.Tensor) -> torch.Tensor:
    """Unlabeled distillation loss between pre-softmax logits.

    sqrt(sum((z_T - z_A)^2) / N) with the sum over every element and N the batch size.
    """
    if z_teacher.shape != z_student.shape:
        raise ShapeMismatch(f"Teacher logits {tuple(z_teacher.shape)} vs student {tuple(z_student.shape)}")
    n = z_teacher.shape[0]
    # vector_norm has a zero subgradient at 0, sqrt(sum(...)) would give nan
    return torch.linalg.vector_norm(z_teacher - z_student) / n**0.5


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    "Cross-entropy used only to pre-train the float reference model."
    return F.cross_entropy(logits, labels)
