"""Teacher/student distillation losses.

``combined_loss`` mixes the usual cross-entropy against hard labels with the
KL divergence between the teacher's and the student's softmax outputs::

    J = lam * CE(student, y) + (1 - lam) * KL(p_teacher || p_student)

``lam = 1`` is plain classification training; ``lam = 0`` is pure
distillation, which is how planted channels are trained. Softmax is taken at
temperature 1. Teacher logits are treated as constants: no gradient ever
flows into the teacher.
"""
from __future__ import annotations

import numpy as np

from .gradcore import NonFiniteError, Tensor, _check_targets, _emit, log_softmax

__all__ = ["KL_FORMS", "DistillLoss", "combined_loss", "kl_term"]

# "standard": sum_i pT_i (log pT_i - log pS_i)
# "literal":  sum_i pT_i log pS_i, the expression as printed in the original
#             write-up; kept only for side-by-side comparison
KL_FORMS = ("standard", "literal")


def _teacher_array(teacher_logits) -> np.ndarray:
    if isinstance(teacher_logits, Tensor):
        return teacher_logits.value
    return np.asarray(teacher_logits, dtype=np.float64)


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def _parts(student: Tensor, teacher: np.ndarray, form: str):
    if form not in KL_FORMS:
        raise ValueError(f"unknown KL form {form!r}; expected one of {KL_FORMS}")
    if student.value.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {student.shape}")
    if teacher.shape != student.shape:
        raise ValueError(f"teacher logits {teacher.shape} and student logits {student.shape} differ in shape")
    if not (np.all(np.isfinite(student.value)) and np.all(np.isfinite(teacher))):
        raise NonFiniteError("kl_term received non-finite logits")
    log_ps = log_softmax(student.value)
    log_pt = log_softmax(teacher)
    pt = np.exp(log_pt)
    if form == "standard":
        per_row = (pt * (log_pt - log_ps)).sum(axis=1)
    else:
        per_row = (pt * log_ps).sum(axis=1)
    return log_ps, pt, per_row


def kl_term(teacher_logits, student_logits: Tensor, form: str = "standard") -> Tensor:
    """Batch mean of KL(softmax(teacher) || softmax(student)).

    The gradient with respect to the student logits is ``(pS - pT) / batch``
    (``(pT - pS) / batch`` for the literal form).
    """
    teacher = _teacher_array(teacher_logits)
    log_ps, pt, per_row = _parts(student_logits, teacher, form)
    batch = per_row.shape[0]
    sign = 1.0 if form == "standard" else -1.0

    def backward(g: np.ndarray):
        return ((np.exp(log_ps) - pt) * (sign * g / batch),)

    return _emit(np.asarray(per_row.mean()), (student_logits,), backward, "kl_term")


def combined_loss(student_logits: Tensor, teacher_logits, targets, lam: float, form: str = "standard") -> Tensor:
    """``lam * CE(student, targets) + (1 - lam) * KL(teacher || student)``.

    ``teacher_logits`` may be ``None`` only when ``lam == 1``.
    """
    lam = _check_lambda(lam)
    if student_logits.value.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {student_logits.shape}")
    batch, classes = student_logits.shape
    targets = _check_targets(targets, batch, classes)
    if teacher_logits is None:
        if lam != 1.0:
            raise ValueError("teacher logits are required when lambda < 1")
        teacher = None
    else:
        teacher = _teacher_array(teacher_logits)

    rows = np.arange(batch)
    if teacher is None:
        if not np.all(np.isfinite(student_logits.value)):
            raise NonFiniteError("combined_loss received non-finite logits")
        log_ps = log_softmax(student_logits.value)
        pt = None
        kl = 0.0
    else:
        log_ps, pt, per_row = _parts(student_logits, teacher, form)
        kl = per_row.mean()
    ce = -log_ps[rows, targets].mean()
    value = lam * ce + (1.0 - lam) * kl
    sign = 1.0 if form == "standard" else -1.0

    def backward(g: np.ndarray):
        ps = np.exp(log_ps)
        d_ce = ps.copy()
        d_ce[rows, targets] -= 1.0
        d = lam * d_ce
        if pt is not None:
            d = d + (1.0 - lam) * sign * (ps - pt)
        return (d * (g / batch),)

    return _emit(np.asarray(value), (student_logits,), backward, "combined_loss")


class DistillLoss:
    """Callable wrapper holding the mixing weight and KL form."""

    def __init__(self, lam: float, form: str = "standard"):
        self.lam = _check_lambda(lam)
        if form not in KL_FORMS:
            raise ValueError(f"unknown KL form {form!r}")
        self.form = form

    @property
    def needs_teacher(self) -> bool:
        return self.lam < 1.0

    def __call__(self, student_logits: Tensor, teacher_logits, targets) -> Tensor:
        return combined_loss(student_logits, teacher_logits, targets, self.lam, self.form)

    def __repr__(self) -> str:
        return f"DistillLoss(lam={self.lam}, form={self.form!r})"
