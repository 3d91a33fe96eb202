"""
Objective
SOP probabilities, the SOP losses, the parametric prototype baselines they
replace, and the loss combination
"""
from dataclasses import dataclass

import numpy as np

from app.exceptions import DimMismatch, EmptyViews, MaskLengthMismatch, NonPositiveTemperature
from app.numerics import (
    Tensor,
    as_array,
    cross_entropy,
    masked_sum,
    matmul,
    mean,
    rowwise_l2_normalize,
    softmax_temp,
    transpose,
)


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PrototypeBaseline:
    """
    Learnable prototypes for the parametric baselines

    `theta` is trained by the optimizer; `teacher_theta` follows it by EMA.
    Teacher logits are centered by a running mean before the softmax.
    """
    theta: Tensor
    teacher_theta: np.ndarray
    center: np.ndarray
    center_momentum: float = 0.9
    centering: bool = True

    @classmethod
    def create(cls, num_prototypes, dim, seed, center_momentum=0.9, centering=True):
        rng = np.random.default_rng(seed)
        theta = rowwise_l2_normalize(rng.standard_normal((num_prototypes, dim)))
        return cls(
            theta=Tensor(theta, requires_grad=True, op='prototypes'),
            teacher_theta=theta.copy(),
            center=np.zeros(num_prototypes, dtype=theta.dtype),
            center_momentum=center_momentum,
            centering=centering,
        )

    @property
    def num_prototypes(self):
        return self.theta.shape[0]

    def normalize_(self):
        """Re-project prototype rows onto the unit sphere after an optimizer step"""
        self.theta.data = rowwise_l2_normalize(self.theta.data).astype(self.theta.data.dtype, copy=False)

    def teacher_logits(self, teacher_views):
        return [np.asarray(as_array(t)) @ self.teacher_theta.T for t in teacher_views]

    def update_center(self, teacher_views):
        """Running mean of teacher logits over every row of every view"""
        if not self.centering:
            return
        logits = self.teacher_logits(teacher_views)
        batch_mean = np.concatenate([l.reshape(-1, self.num_prototypes) for l in logits]).mean(axis=0)
        m = self.center_momentum
        self.center = (m * self.center + (1.0 - m) * batch_mean).astype(self.center.dtype)


def teacher_temperature(step, total_steps, start=0.04, end=0.07, warmup_frac=0.1):
    """Linear warmup of the teacher temperature over the first warmup_frac of training"""
    warmup = int(warmup_frac * total_steps)
    if warmup <= 0 or step >= warmup:
        return end
    return start + (end - start) * step / warmup


def sop_probs(U, sop, tau):
    """
    Membership distribution of each embedding over the SOP anchors

    softmax(<U, D^T> / tau) over all K(k+1) members, then right-multiplied by
    Y. Returns a Tensor for Tensor input and an ndarray otherwise; the last
    axis has length K and sums to 1.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    width = U.shape[-1]
    if width != sop.D.shape[1]:
        raise DimMismatch(f"embeddings have dim {width}, SOP members have {sop.D.shape[1]}")
    member_probs = softmax_temp(matmul(U, sop.D.T), tau)
    return matmul(member_probs, sop.Y)


def mean_entropy(P):
    """Mean Shannon entropy of the distributions along the last axis"""
    P = np.asarray(as_array(P), dtype=np.float64)
    return float(np.mean(-np.sum(P * np.log(np.maximum(P, 1e-12)), axis=-1)))


def _average(terms):
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _stop_gradient(p):
    return p.detach() if isinstance(p, Tensor) else np.asarray(p)


def cls_loss(student_probs, teacher_probs):
    """
    Cross-view distillation over [CLS] distributions

    Averages cross_entropy(teacher_g, student_v) over every pair with v != g
    and over the batch. Student views are ordered with the global views first,
    so student view g is the same crop teacher g saw.
    """
    if not student_probs or not teacher_probs:
        raise EmptyViews("cls_loss needs at least one student and one teacher view")
    terms = []
    for g, teacher in enumerate(teacher_probs):
        target = _stop_gradient(teacher)
        for v, student in enumerate(student_probs):
            if v == g:
                continue
            terms.append(mean(cross_entropy(target, student)) if isinstance(student, Tensor)
                         else float(np.mean(cross_entropy(target, student))))
    if not terms:
        raise EmptyViews("no (teacher, student) view pairs with distinct views")
    return _average(terms)


def _mask_matrix(masks):
    if isinstance(masks, np.ndarray):
        return masks.astype(bool)
    masks = list(masks)
    if masks and hasattr(masks[0], 'mask'):
        return np.stack([m.mask for m in masks]).astype(bool)
    return np.asarray(masks, dtype=bool)


def sop_mim_loss(teacher_patch_probs, student_masked_patch_probs, masks):
    """
    Masked-token distillation over patch distributions

    For each global view: cross-entropy between the teacher's unmasked-view
    distribution and the student's masked-view distribution, summed over
    masked positions and divided by the view's masked-token count across the
    batch. Views are summed.

    Args:
        teacher_patch_probs: per view, B x L x K distributions
        student_masked_patch_probs: per view, B x L x K distributions
        masks: per view, a B x L boolean array or a list of B MaskSpec
    """
    if len(teacher_patch_probs) != len(student_masked_patch_probs) or len(masks) != len(teacher_patch_probs):
        raise EmptyViews("teacher, student and mask view lists must have equal length")
    if not teacher_patch_probs:
        raise EmptyViews("sop_mim_loss needs at least one view")

    total = None
    for teacher, student, view_masks in zip(teacher_patch_probs, student_masked_patch_probs, masks):
        mask = _mask_matrix(view_masks)
        if mask.shape != tuple(student.shape[:2]):
            raise MaskLengthMismatch(f"mask shape {mask.shape} vs patch grid {tuple(student.shape[:2])}")
        ce = cross_entropy(_stop_gradient(teacher), student)
        count = max(int(mask.sum()), 1)
        if isinstance(ce, Tensor):
            term = masked_sum(ce, mask) * (1.0 / count)
        else:
            term = float(np.sum(ce * mask)) / count
        total = term if total is None else total + term
    return total


def prototype_probs(U, theta, tau, center=None):
    """softmax((<U, theta^T> - center) / tau) for learnable or frozen prototypes"""
    if U.shape[-1] != theta.shape[-1]:
        raise DimMismatch(f"embeddings have dim {U.shape[-1]}, prototypes have {theta.shape[-1]}")
    logits = matmul(U, transpose(theta) if isinstance(theta, Tensor) else np.asarray(theta).T)
    if center is not None:
        logits = logits - center
    return softmax_temp(logits, tau)


def _teacher_prototype_probs(teacher_views, baseline, tau_t):
    center = baseline.center if baseline.centering else None
    return [prototype_probs(np.asarray(as_array(t)), baseline.teacher_theta, tau_t, center)
            for t in teacher_views]


def parametric_cls_loss(student_views, teacher_views, baseline, tau_s, tau_t):
    """
    Prototype-based [CLS] distillation (the parametric baseline)

    Same cross-view structure as cls_loss, with distributions over learnable
    prototypes and centered teacher logits.
    """
    student_probs = [prototype_probs(u, baseline.theta, tau_s) for u in student_views]
    return cls_loss(student_probs, _teacher_prototype_probs(teacher_views, baseline, tau_t))


def parametric_mim_loss(teacher_patches, student_masked_patches, baseline, masks, tau_s, tau_t):
    """Prototype-based masked-token loss (online tokenizer baseline)"""
    student_probs = [prototype_probs(z, baseline.theta, tau_s) for z in student_masked_patches]
    return sop_mim_loss(_teacher_prototype_probs(teacher_patches, baseline, tau_t), student_probs, masks)


def total_loss(cls, patch, weights=None):
    """lambda1 * cls + lambda2 * patch"""
    weights = weights or LossWeights()
    return cls * weights.lambda1 + patch * weights.lambda2
