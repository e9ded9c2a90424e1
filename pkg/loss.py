"""Differentiable a-DCF surrogate, binary cross-entropy, and their gradients.

The soft error rates replace the counting indicator with a sigmoid of the
distance between score and threshold. Sums use ``math.fsum`` so every loss is
exactly invariant to the order of the trials.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import ValidationError
from metrics import CLASS_ORDER, CostModel, ScoreSet, TrialClass

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 1.0
BCE_EPSILON = 1e-7


class LossMode(str, Enum):
    """Training objective: BCE only, soft a-DCF only, or their mean."""
    BCE_ONLY = "bce-only"
    SOFT_ADCF = "soft-adcf"
    COMBINED = "soft-adcf+bce"

    @classmethod
    def _missing_(cls, value):
        aliases = {"bce": cls.BCE_ONLY, "combined": cls.COMBINED, "soft-adcf-bce": cls.COMBINED}
        return aliases.get(str(value).lower())

    @property
    def uses_adcf(self) -> bool:
        return self is not LossMode.BCE_ONLY

    @property
    def uses_bce(self) -> bool:
        return self is not LossMode.SOFT_ADCF


@dataclass(frozen=True)
class SteepnessConfig:
    """Scale applied to the sigmoid argument; alpha = 1 is the plain sigmoid."""
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not isinstance(self.alpha, (int, float, np.floating)) or not math.isfinite(self.alpha) or self.alpha <= 0:
            raise ValidationError(f"Steepness alpha must be a finite positive number, got {self.alpha!r}")
        object.__setattr__(self, "alpha", float(self.alpha))


@dataclass(frozen=True)
class SoftRates:
    """Sigmoid-smoothed miss and false-alarm rates."""
    p_miss_tar_hat: float
    p_fa_non_hat: float
    p_fa_spf_hat: float
    empty_classes: Tuple[TrialClass, ...] = ()


@dataclass(frozen=True, eq=False)
class ScoreGradient:
    """Per-trial loss gradients, laid out like the ScoreSet they came from."""
    tar: np.ndarray
    non: np.ndarray
    spf: np.ndarray


def _check_tau(tau: float) -> float:
    if not isinstance(tau, (int, float, np.floating, np.integer)) or not math.isfinite(tau):
        raise ValidationError(f"Threshold must be a finite real, got {tau!r}")
    return float(tau)


def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / values.size if values.size else 0.0


def soft_error_rates(scores: ScoreSet, tau: float, steep: SteepnessConfig = SteepnessConfig()) -> SoftRates:
    """Soft miss / false-alarm rates; an empty class yields 0 and is flagged."""
    tau = _check_tau(tau)
    if scores.is_empty:
        raise ValidationError("no trials")
    alpha = steep.alpha
    return SoftRates(
        p_miss_tar_hat=_mean(expit(alpha * (tau - scores.tar))),
        p_fa_non_hat=_mean(expit(alpha * (scores.non - tau))),
        p_fa_spf_hat=_mean(expit(alpha * (scores.spf - tau))),
        empty_classes=scores.empty_classes(),
    )


def soft_a_dcf(scores: ScoreSet, tau: float, cm: CostModel, steep: SteepnessConfig = SteepnessConfig()) -> float:
    """Cost-weighted sum of the soft error rates."""
    rates = soft_error_rates(scores, tau, steep)
    return (cm.c_miss_tar * cm.pi_tar * rates.p_miss_tar_hat
            + cm.c_fa_non * cm.pi_non * rates.p_fa_non_hat
            + cm.c_fa_spf * cm.pi_spf * rates.p_fa_spf_hat)


def soft_a_dcf_gradient_wrt_tau(scores: ScoreSet, tau: float, cm: CostModel,
                                steep: SteepnessConfig = SteepnessConfig()) -> float:
    """Derivative of the soft a-DCF with respect to the threshold."""
    tau = _check_tau(tau)
    if scores.is_empty:
        raise ValidationError("no trials")
    alpha = steep.alpha

    def slope(z: np.ndarray) -> np.ndarray:
        sig = expit(z)
        return alpha * (sig * (1.0 - sig))

    return (cm.miss_weight * _mean(slope(alpha * (tau - scores.tar)))
            - cm.fa_non_weight * _mean(slope(alpha * (scores.non - tau)))
            - cm.fa_spf_weight * _mean(slope(alpha * (scores.spf - tau))))


def _check_flat(scores: np.ndarray, codes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).ravel()
    codes = np.asarray(codes, dtype=int).ravel()
    if scores.size != codes.size:
        raise ValidationError(f"{scores.size} scores but {codes.size} labels")
    if scores.size == 0:
        raise ValidationError("no trials")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("Scores must be finite")
    if np.any((codes < 0) | (codes > 2)):
        raise ValidationError("Class codes must be 0 (target), 1 (nontarget) or 2 (spoof)")
    return scores, codes


def soft_a_dcf_with_gradient(scores: np.ndarray, codes: np.ndarray, tau: float, cm: CostModel,
                             steep: SteepnessConfig = SteepnessConfig()) -> Tuple[float, np.ndarray]:
    """Soft a-DCF of a flat, labeled score array and its gradient per score.

    Classes missing from the array contribute nothing (no 0/0).
    """
    scores, codes = _check_flat(scores, codes)
    tau = _check_tau(tau)
    alpha = steep.alpha
    weights = (cm.c_miss_tar * cm.pi_tar, cm.c_fa_non * cm.pi_non, cm.c_fa_spf * cm.pi_spf)

    value = 0.0
    grad = np.zeros_like(scores)
    for cls in CLASS_ORDER:
        mask = codes == cls.code
        n = int(np.count_nonzero(mask))
        if n == 0:
            continue
        weight = weights[cls.code]
        if cls is TrialClass.TARGET:
            sig = expit(alpha * (tau - scores[mask]))
            sign = -1.0
        else:
            sig = expit(alpha * (scores[mask] - tau))
            sign = 1.0
        value += weight * (math.fsum(sig.tolist()) / n)
        grad[mask] = sign * (weight / n) * alpha * (sig * (1.0 - sig))
    return value, grad


def _clamped(predictions: np.ndarray) -> np.ndarray:
    return np.clip(predictions, BCE_EPSILON, 1.0 - BCE_EPSILON)


def _check_bce_inputs(predictions: Sequence[float], labels: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.size == 0:
        raise ValidationError("BCE needs at least one prediction")
    if p.size != y.size:
        raise ValidationError(f"BCE length mismatch: {p.size} predictions, {y.size} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("BCE labels must be 0 or 1")
    if not np.all(np.isfinite(p)):
        raise ValidationError("BCE predictions must be finite")
    return p, y


def bce(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Binary cross-entropy, predictions clamped into [1e-7, 1 - 1e-7]."""
    p, y = _check_bce_inputs(predictions, labels)
    clamped = _clamped(p)
    terms = y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped)
    return -math.fsum(terms.tolist()) / p.size


def bce_with_gradient(predictions: Sequence[float], labels: Sequence[float]) -> Tuple[float, np.ndarray]:
    """BCE and its gradient per prediction; zero gradient where the clamp is active."""
    p, y = _check_bce_inputs(predictions, labels)
    value = bce(p, y)
    clamped = _clamped(p)
    inside = (p >= BCE_EPSILON) & (p <= 1.0 - BCE_EPSILON)
    grad = -(y / clamped - (1.0 - y) / (1.0 - clamped)) / p.size
    return value, np.where(inside, grad, 0.0)


def bce_targets(codes: np.ndarray) -> np.ndarray:
    """BCE labels from class codes: target 1, nontarget and spoof 0."""
    return (np.asarray(codes) == TrialClass.TARGET.code).astype(float)


def _flatten(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray]:
    codes = np.concatenate([np.full(n, cls.code) for cls, n in zip(CLASS_ORDER, scores.counts)]).astype(int)
    return scores.pooled(), codes


def combined_loss(scores: ScoreSet, tau: float, cm: CostModel, steep: SteepnessConfig = SteepnessConfig()) -> float:
    """Mean of the soft a-DCF and the BCE, the scores doubling as predictions."""
    flat, codes = _flatten(scores)
    return (soft_a_dcf(scores, tau, cm, steep) + bce(flat, bce_targets(codes))) / 2.0


def training_objective(scores: np.ndarray, codes: np.ndarray, tau: float, cm: CostModel,
                       steep: SteepnessConfig, mode: LossMode) -> Tuple[float, np.ndarray]:
    """Loss value and per-score gradient for one minibatch, evaluating only what the mode needs."""
    mode = LossMode(mode)
    if mode is LossMode.SOFT_ADCF:
        return soft_a_dcf_with_gradient(scores, codes, tau, cm, steep)
    if mode is LossMode.BCE_ONLY:
        scores, codes = _check_flat(scores, codes)
        return bce_with_gradient(scores, bce_targets(codes))

    adcf_value, adcf_grad = soft_a_dcf_with_gradient(scores, codes, tau, cm, steep)
    bce_value, bce_grad = bce_with_gradient(scores, bce_targets(codes))
    return (adcf_value + bce_value) / 2.0, (adcf_grad + bce_grad) / 2.0


def loss_gradient_wrt_scores(scores: ScoreSet, tau: float, cm: CostModel,
                             steep: SteepnessConfig = SteepnessConfig(),
                             mode: LossMode = LossMode.SOFT_ADCF) -> ScoreGradient:
    """Gradient of the chosen loss with respect to every score."""
    flat, codes = _flatten(scores)
    _, grad = training_objective(flat, codes, tau, cm, steep, mode)
    n_tar, n_non, _ = scores.counts
    return ScoreGradient(grad[:n_tar], grad[n_tar:n_tar + n_non], grad[n_tar + n_non:])


def loss_value(scores: ScoreSet, tau: float, cm: CostModel, steep: SteepnessConfig = SteepnessConfig(),
               mode: LossMode = LossMode.COMBINED) -> float:
    """Scalar loss of a ScoreSet under any mode."""
    mode = LossMode(mode)
    if mode is LossMode.SOFT_ADCF:
        return soft_a_dcf(scores, tau, cm, steep)
    if mode is LossMode.BCE_ONLY:
        flat, codes = _flatten(scores)
        return bce(flat, bce_targets(codes))
    return combined_loss(scores, tau, cm, steep)
