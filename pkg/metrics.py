"""Hard detection cost metrics: DCF, a-DCF, error rates, min a-DCF, EER and DET curves.

All functions here count errors with indicator functions. A trial is accepted
when its score is strictly greater than the threshold, so a score exactly equal
to the threshold is a miss for targets and a correct rejection for the two
negative classes.
"""
import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm
from typing_extensions import Self

from errors import ValidationError

logger = logging.getLogger(__name__)

PRIOR_TOLERANCE = 1e-12
PROBIT_CLAMP = 4.0
FLOAT_MAX = float(np.finfo(float).max)


class TrialClass(str, Enum):
    """The three trial classes of spoofing-aware verification."""
    TARGET = "target"
    NONTARGET = "nontarget"
    SPOOF = "spoof"

    @property
    def code(self) -> int:
        """Integer code used in label arrays (target=0, nontarget=1, spoof=2)."""
        return CLASS_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "TrialClass":
        """Map an integer label code back to its class."""
        try:
            return CLASS_ORDER[int(code)]
        except (IndexError, ValueError, TypeError):
            raise ValidationError(f"Unknown class code: {code!r}")

    @classmethod
    def parse(cls, value: Any) -> "TrialClass":
        """Accept a TrialClass, its string value, or an integer code."""
        if isinstance(value, TrialClass):
            return value
        if isinstance(value, (int, np.integer)):
            return cls.from_code(int(value))
        try:
            return cls(str(value))
        except ValueError:
            raise ValidationError(f"Unknown label: {value!r} (expected target, nontarget or spoof)")


CLASS_ORDER: Tuple[TrialClass, ...] = (TrialClass.TARGET, TrialClass.NONTARGET, TrialClass.SPOOF)


class ClassPair(str, Enum):
    """Class pairs for DET curves and EER."""
    TAR_VS_NON = "tar-vs-non"
    TAR_VS_SPF = "tar-vs-spf"


@dataclass(frozen=True)
class TwoClassCostModel:
    """Costs and target prior of the conventional two-class DCF."""
    c_miss: float = 1.0
    c_fa: float = 1.0
    pi_tar: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.c_miss) and math.isfinite(self.c_fa)) or self.c_miss < 0 or self.c_fa < 0:
            raise ValidationError(f"Costs must be finite and non-negative: c_miss={self.c_miss}, c_fa={self.c_fa}")
        if not 0.0 <= self.pi_tar <= 1.0:
            raise ValidationError(f"Target prior must lie in [0, 1]: {self.pi_tar}")

    @property
    def pi_non(self) -> float:
        """Nontarget prior, the complement of pi_tar."""
        return 1.0 - self.pi_tar


@dataclass(frozen=True)
class CostModel:
    """a-DCF parameters: three costs and three class priors.

    Defaults are the security-oriented operating point (1, 10, 20) with
    priors (0.9, 0.05, 0.05).
    """
    c_miss_tar: float = 1.0
    c_fa_non: float = 10.0
    c_fa_spf: float = 20.0
    pi_tar: float = 0.9
    pi_non: float = 0.05
    pi_spf: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float, np.floating, np.integer)) or not math.isfinite(value):
                raise ValidationError(f"{f.name} must be a finite number, got {value!r}")
            object.__setattr__(self, f.name, float(value))

        for name in ("c_miss_tar", "c_fa_non", "c_fa_spf"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("pi_tar", "pi_non", "pi_spf"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

        total = self.pi_tar + self.pi_non + self.pi_spf
        if abs(total - 1.0) > PRIOR_TOLERANCE:
            raise ValidationError(f"Priors must sum to 1, got {total!r}")
        if not (self.miss_weight > 0 or self.fa_non_weight + self.fa_spf_weight > 0):
            raise ValidationError("Cost model is identically zero: every cost-prior product vanishes")

    @property
    def miss_weight(self) -> float:
        """Cost times prior of a target miss."""
        return self.c_miss_tar * self.pi_tar

    @property
    def fa_non_weight(self) -> float:
        """Cost times prior of a nontarget false alarm."""
        return self.c_fa_non * self.pi_non

    @property
    def fa_spf_weight(self) -> float:
        """Cost times prior of a spoof false alarm."""
        return self.c_fa_spf * self.pi_spf

    def max_cost(self) -> float:
        """Upper bound of the a-DCF, reached when every trial is an error."""
        return self.miss_weight + self.fa_non_weight + self.fa_spf_weight

    def normalizer(self) -> float:
        """Cost of the better of the two trivial systems (accept all / reject all)."""
        return min(self.miss_weight, self.fa_non_weight + self.fa_spf_weight)

    def scaled(self, k: float) -> "CostModel":
        """Return a copy with all three costs multiplied by k."""
        if not k > 0:
            raise ValidationError(f"Cost scale must be positive, got {k}")
        return CostModel(self.c_miss_tar * k, self.c_fa_non * k, self.c_fa_spf * k,
                         self.pi_tar, self.pi_non, self.pi_spf)

    def two_class(self) -> TwoClassCostModel:
        """The equivalent conventional DCF model; only defined without spoof prior."""
        if self.pi_spf != 0.0:
            raise ValidationError(f"two_class() requires pi_spf = 0, got {self.pi_spf}")
        return TwoClassCostModel(self.c_miss_tar, self.c_fa_non, self.pi_tar)

    def as_dict(self) -> Dict[str, float]:
        """Field name to value, as written to config files."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> Self:
        """Build a cost model from config values; every field must be numeric."""
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"Unknown cost model fields: {sorted(unknown)}")
        converted = {}
        for key, value in values.items():
            try:
                converted[key] = float(value)
            except (TypeError, ValueError):
                raise ValidationError(f"Cost model field {key} must be a number, got {value!r}")
        return cls(**converted)


def _as_score_array(name: str, values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} scores must be finite (NaN/Inf rejected)")
    return arr


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Detection scores partitioned by class."""
    tar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    non: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spf: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("tar", "non", "spf"):
            object.__setattr__(self, name, _as_score_array(name, getattr(self, name)))

    @classmethod
    def from_labeled(cls, scores: Sequence[float], labels: Sequence[Any]) -> Self:
        """Partition a flat score sequence by its per-trial labels (classes, names or codes)."""
        scores = np.asarray(scores, dtype=float).ravel()
        codes = np.asarray([TrialClass.parse(label).code for label in labels], dtype=int)
        if codes.size != scores.size:
            raise ValidationError(f"{scores.size} scores but {codes.size} labels")
        return cls(scores[codes == 0], scores[codes == 1], scores[codes == 2])

    def get(self, cls: TrialClass) -> np.ndarray:
        """Scores of one class."""
        return {TrialClass.TARGET: self.tar, TrialClass.NONTARGET: self.non, TrialClass.SPOOF: self.spf}[cls]

    def count(self, cls: TrialClass) -> int:
        """Number of trials of one class."""
        return int(self.get(cls).size)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return self.tar.size, self.non.size, self.spf.size

    @property
    def is_empty(self) -> bool:
        """True when no class has any trial."""
        return sum(self.counts) == 0

    def empty_classes(self) -> Tuple[TrialClass, ...]:
        """Classes without any trial."""
        return tuple(cls for cls in CLASS_ORDER if self.count(cls) == 0)

    def pooled(self) -> np.ndarray:
        """All scores in one array, target then nontarget then spoof."""
        return np.concatenate([self.tar, self.non, self.spf])

    def shifted(self, offset: float) -> "ScoreSet":
        """Copy with every score moved by offset."""
        return ScoreSet(self.tar + offset, self.non + offset, self.spf + offset)


@dataclass(frozen=True)
class ErrorRates:
    """Miss rate for targets and false-alarm rates for the two negative classes."""
    p_miss_tar: float
    p_fa_non: float
    p_fa_spf: float
    empty_classes: Tuple[TrialClass, ...] = ()

    def __post_init__(self):
        for name in ("p_miss_tar", "p_fa_non", "p_fa_spf"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.p_miss_tar, self.p_fa_non, self.p_fa_spf


@dataclass(frozen=True, eq=False)
class DetCurve:
    """Detection error trade-off curve for one class pair, ordered by ascending threshold."""
    class_pair: ClassPair
    thresholds: np.ndarray
    p_fa: np.ndarray
    p_miss: np.ndarray

    def __post_init__(self):
        if not (self.thresholds.size == self.p_fa.size == self.p_miss.size) or self.p_fa.size == 0:
            raise ValidationError("DET curve arrays must be non-empty and of equal length")
        if np.any(np.diff(self.p_fa) > 0) or np.any(np.diff(self.p_miss) < 0):
            raise ValidationError("DET curve must have non-increasing p_fa and non-decreasing p_miss")

    @property
    def points(self) -> List[Tuple[float, float]]:
        """The (p_fa, p_miss) pairs in threshold order."""
        return list(zip(self.p_fa.tolist(), self.p_miss.tolist()))

    @property
    def probit_fa(self) -> np.ndarray:
        """False-alarm rates on the normal deviate scale."""
        return probit(self.p_fa)

    @property
    def probit_miss(self) -> np.ndarray:
        """Miss rates on the normal deviate scale."""
        return probit(self.p_miss)

    def rows(self) -> List[Tuple[float, float, float, float, float]]:
        """(threshold, p_fa, p_miss, probit_fa, probit_miss) per point, for CSV output."""
        return list(zip(self.thresholds.tolist(), self.p_fa.tolist(), self.p_miss.tolist(),
                        self.probit_fa.tolist(), self.probit_miss.tolist()))


def probit(p: np.ndarray) -> np.ndarray:
    """Standard normal deviate of a rate, clamped to +-4 so that 0 and 1 stay plottable."""
    with np.errstate(divide="ignore"):
        return np.clip(norm.ppf(np.asarray(p, dtype=float)), -PROBIT_CLAMP, PROBIT_CLAMP)


def _rate(count: int, total: int) -> float:
    return count / total if total else 0.0


def _check_tau(tau: float) -> float:
    if not isinstance(tau, (int, float, np.floating, np.integer)) or not math.isfinite(tau):
        raise ValidationError(f"Threshold must be a finite real, got {tau!r}")
    return float(tau)


def hard_error_rates(scores: ScoreSet, tau: float) -> ErrorRates:
    """Count miss and false-alarm rates at threshold tau.

    An empty class contributes rate 0 and is listed in ``empty_classes``.
    """
    tau = _check_tau(tau)
    if scores.is_empty:
        raise ValidationError("no trials")

    p_miss_tar = _rate(int(np.count_nonzero(scores.tar <= tau)), scores.tar.size)
    p_fa_non = _rate(int(np.count_nonzero(scores.non > tau)), scores.non.size)
    p_fa_spf = _rate(int(np.count_nonzero(scores.spf > tau)), scores.spf.size)
    return ErrorRates(p_miss_tar, p_fa_non, p_fa_spf, scores.empty_classes())


def a_dcf(rates: ErrorRates, cm: CostModel, normalize: bool = False) -> float:
    """Architecture-agnostic DCF of a set of error rates."""
    cost = (cm.c_miss_tar * cm.pi_tar * rates.p_miss_tar
            + cm.c_fa_non * cm.pi_non * rates.p_fa_non
            + cm.c_fa_spf * cm.pi_spf * rates.p_fa_spf)
    return _normalized(cost, cm) if normalize else cost


def dcf(p_miss: float, p_fa: float, cm: TwoClassCostModel) -> float:
    """Conventional two-class detection cost."""
    for name, value in (("p_miss", p_miss), ("p_fa", p_fa)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return cm.c_miss * cm.pi_tar * p_miss + cm.c_fa * cm.pi_non * p_fa


def _normalized(cost, cm: CostModel):
    normalizer = cm.normalizer()
    if normalizer <= 0:
        raise ValidationError("Cannot normalize: the cost of the best trivial system is zero")
    return cost / normalizer


def candidate_thresholds(pooled_scores: np.ndarray) -> np.ndarray:
    """Every decision-relevant threshold of a score pool.

    Midpoints between consecutive distinct scores plus one sentinel below the
    minimum and one above the maximum. Counting costs are piecewise constant
    between scores, so this set is exhaustive.
    """
    unique = np.unique(np.asarray(pooled_scores, dtype=float))
    if unique.size == 0:
        raise ValidationError("no trials")
    lo, hi = float(unique[0]), float(unique[-1])
    # Sentinels stay finite; near the float limits they coincide with the extreme scores.
    low = max(lo - max(1.0, abs(lo)), -FLOAT_MAX)
    high = min(hi + max(1.0, abs(hi)), FLOAT_MAX)
    with np.errstate(over="ignore"):
        midpoints = (unique[:-1] + unique[1:]) / 2.0
    overflowed = ~np.isfinite(midpoints)
    if np.any(overflowed):
        midpoints[overflowed] = unique[:-1][overflowed] / 2.0 + unique[1:][overflowed] / 2.0
    return np.unique(np.concatenate(([low], midpoints, [high])))


def _rates_at(scores: ScoreSet, taus: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized hard_error_rates over many thresholds."""
    def below_or_equal(values: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.sort(values), taus, side="right")

    zeros = np.zeros(taus.shape)
    p_miss = below_or_equal(scores.tar) / scores.tar.size if scores.tar.size else zeros
    p_fa_non = (scores.non.size - below_or_equal(scores.non)) / scores.non.size if scores.non.size else zeros
    p_fa_spf = (scores.spf.size - below_or_equal(scores.spf)) / scores.spf.size if scores.spf.size else zeros
    return p_miss, p_fa_non, p_fa_spf


def _cost_curve(scores: ScoreSet, cm: CostModel, taus: np.ndarray) -> np.ndarray:
    # Same operation order as a_dcf() so both paths agree bit for bit.
    p_miss, p_fa_non, p_fa_spf = _rates_at(scores, taus)
    return (cm.c_miss_tar * cm.pi_tar * p_miss
            + cm.c_fa_non * cm.pi_non * p_fa_non
            + cm.c_fa_spf * cm.pi_spf * p_fa_spf)


def min_a_dcf(scores: ScoreSet, cm: CostModel, normalize: bool = False) -> Tuple[float, float]:
    """Minimum a-DCF over all thresholds.

    Returns:
        (min_cost, tau_star); ties go to the smallest threshold.
    """
    if scores.is_empty:
        raise ValidationError("no trials")
    taus = candidate_thresholds(scores.pooled())
    costs = _cost_curve(scores, cm, taus)
    best = int(np.argmin(costs))
    min_cost = float(costs[best])
    return (_normalized(min_cost, cm) if normalize else min_cost), float(taus[best])


def a_dcf_vs_threshold(scores: ScoreSet, cm: CostModel, grid: Sequence[float],
                       normalize: bool = False) -> List[Tuple[float, float]]:
    """Evaluate the a-DCF at each threshold of a grid."""
    taus = np.asarray(grid, dtype=float).ravel()
    if taus.size == 0:
        raise ValidationError("Threshold grid is empty")
    if not np.all(np.isfinite(taus)):
        raise ValidationError("Threshold grid must be finite")
    if scores.is_empty:
        raise ValidationError("no trials")
    costs = _cost_curve(scores, cm, taus)
    if normalize:
        costs = _normalized(costs, cm)
    return list(zip(taus.tolist(), costs.tolist()))


def _pair_scores(scores: ScoreSet, pair: ClassPair) -> Tuple[np.ndarray, np.ndarray]:
    pair = ClassPair(pair)
    negatives = scores.non if pair is ClassPair.TAR_VS_NON else scores.spf
    if scores.tar.size == 0 or negatives.size == 0:
        raise ValidationError(f"{pair.value}: both classes of the pair must be non-empty "
                              f"(got {scores.tar.size} targets, {negatives.size} negatives)")
    return scores.tar, negatives


def det_curve(scores: ScoreSet, pair: ClassPair) -> DetCurve:
    """DET curve of targets against one negative class."""
    tar, negatives = _pair_scores(scores, pair)
    taus = candidate_thresholds(np.concatenate([tar, negatives]))
    p_miss = np.searchsorted(np.sort(tar), taus, side="right") / tar.size
    p_fa = (negatives.size - np.searchsorted(np.sort(negatives), taus, side="right")) / negatives.size
    return DetCurve(ClassPair(pair), taus, p_fa, p_miss)


def eer_with_threshold(scores: ScoreSet, pair: ClassPair) -> Tuple[float, float]:
    """Equal error rate and the threshold at which it is read."""
    curve = det_curve(scores, pair)
    diff = curve.p_miss - curve.p_fa
    # diff runs from -1 at the low sentinel to +1 at the high sentinel
    idx = int(np.argmax(diff >= 0))
    if diff[idx] == 0:
        return float(curve.p_miss[idx]), float(curve.thresholds[idx])
    pick = idx if abs(diff[idx]) <= abs(diff[idx - 1]) else idx - 1
    return float((curve.p_miss[pick] + curve.p_fa[pick]) / 2.0), float(curve.thresholds[pick])


def eer(scores: ScoreSet, pair: ClassPair) -> float:
    """Equal error rate of targets against one negative class."""
    return eer_with_threshold(scores, pair)[0]


@dataclass
class MetricReport:
    """Everything the evaluation surfaces for one score set."""
    cost_model: CostModel
    min_a_dcf: float
    tau_star: float
    normalized: bool = False
    tau: Optional[float] = None
    rates_at_tau: Optional[ErrorRates] = None
    a_dcf_at_tau: Optional[float] = None
    eer_tar_non: Optional[float] = None
    eer_tar_spf: Optional[float] = None
    det_tar_non: Optional[DetCurve] = None
    det_tar_spf: Optional[DetCurve] = None
    cost_curve: Optional[List[Tuple[float, float]]] = None
    counts: Tuple[int, int, int] = (0, 0, 0)

    def summary(self) -> Dict[str, Any]:
        """Scalar results only, suitable for YAML/JSON output."""
        summary: Dict[str, Any] = {
            "n_target": self.counts[0],
            "n_nontarget": self.counts[1],
            "n_spoof": self.counts[2],
            "normalized": self.normalized,
            "min_a_dcf": self.min_a_dcf,
            "tau_star": self.tau_star,
            "eer_tar_non": self.eer_tar_non,
            "eer_tar_spf": self.eer_tar_spf,
        }
        if self.tau is not None:
            summary["tau"] = self.tau
            summary["a_dcf"] = self.a_dcf_at_tau
            summary["p_miss_tar"], summary["p_fa_non"], summary["p_fa_spf"] = self.rates_at_tau.as_tuple()
        return summary


def evaluate_scores(scores: ScoreSet, cm: CostModel, tau: Optional[float] = None,
                    grid: Optional[Sequence[float]] = None, normalize: bool = False) -> MetricReport:
    """Compute the full metric bundle for one score set.

    Class pairs with an empty class get no EER or DET curve rather than an error.
    """
    min_cost, tau_star = min_a_dcf(scores, cm, normalize=normalize)
    report = MetricReport(cost_model=cm, min_a_dcf=min_cost, tau_star=tau_star,
                          normalized=normalize, counts=scores.counts)

    if tau is not None:
        report.tau = _check_tau(tau)
        report.rates_at_tau = hard_error_rates(scores, tau)
        report.a_dcf_at_tau = a_dcf(report.rates_at_tau, cm, normalize=normalize)

    if scores.tar.size and scores.non.size:
        report.det_tar_non = det_curve(scores, ClassPair.TAR_VS_NON)
        report.eer_tar_non = eer(scores, ClassPair.TAR_VS_NON)
    if scores.tar.size and scores.spf.size:
        report.det_tar_spf = det_curve(scores, ClassPair.TAR_VS_SPF)
        report.eer_tar_spf = eer(scores, ClassPair.TAR_VS_SPF)

    if grid is not None:
        report.cost_curve = a_dcf_vs_threshold(scores, cm, grid, normalize=normalize)

    logger.debug("Evaluated %d/%d/%d trials: min a-DCF %.6f at %.6f",
                 *scores.counts, report.min_a_dcf, report.tau_star)
    return report
