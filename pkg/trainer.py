"""Joint optimization of back-end weights and decision threshold.

One epoch trains the network on stratified minibatches with the configured
loss, then (for optimized-threshold systems) re-selects the threshold by grid
search on the full training set, then scores the dev set at that threshold.
The weights and threshold of the best dev epoch are returned.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import loss
from config import (DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE, DEFAULT_SEARCH_ALPHA,
                    system_preset)
from data import TrialSet
from errors import TrainingError, ValidationError
from loss import LossMode, SteepnessConfig
from metrics import (CLASS_ORDER, CostModel, MetricReport, ScoreSet, a_dcf, a_dcf_vs_threshold,
                     evaluate_scores, hard_error_rates, min_a_dcf)
from network import (DEFAULT_HIDDEN_DIMS, DEFAULT_LEAKY_SLOPE, AdamConfig, AdamState, MlpModel, apply_update,
                     backward, default_dims, forward_batch, init_model)

logger = logging.getLogger(__name__)


class ThresholdMode(str, Enum):
    """Whether the threshold stays at its initial value or is searched every epoch."""
    FIXED = "fixed"
    OPTIMIZED = "optimized"


class SelectionMetric(str, Enum):
    SOFT_ADCF = "soft-adcf"
    HARD_ADCF = "hard-adcf"


class BatchStrategy(str, Enum):
    STRATIFIED = "stratified"
    RANDOM = "random"


@dataclass(frozen=True)
class ThresholdGrid:
    """Evenly spaced thresholds from lo to hi inclusive.

    The step is adjusted to the nearest value that lands exactly on hi.
    """
    lo: float = 0.0
    hi: float = 1.0
    step: float = 0.001

    def __post_init__(self):
        for name in ("lo", "hi", "step"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"Grid {name} must be finite, got {value}")
            object.__setattr__(self, name, float(value))
        if not self.lo < self.hi:
            raise ValidationError(f"Grid needs lo < hi, got lo={self.lo}, hi={self.hi}")
        if not self.step > 0:
            raise ValidationError(f"Grid step must be positive, got {self.step}")

    def points(self) -> np.ndarray:
        """Grid thresholds from lo to hi inclusive."""
        intervals = max(1, int(round((self.hi - self.lo) / self.step)))
        return np.linspace(self.lo, self.hi, intervals + 1)


GridLike = Union[ThresholdGrid, Sequence[float], np.ndarray]


def _grid_points(grid: GridLike) -> np.ndarray:
    points = grid.points() if isinstance(grid, ThresholdGrid) else np.asarray(grid, dtype=float).ravel()
    if points.size == 0:
        raise ValidationError("Threshold grid is empty")
    if not np.all(np.isfinite(points)):
        raise ValidationError("Threshold grid must be finite")
    return points


def _option(key: str, value: Any, convert):
    """Convert one training option, reporting bad values as validation errors."""
    if isinstance(value, bool) and convert in (int, float):
        raise ValidationError(f"Training option {key} must be a number, got {value!r}")
    try:
        return convert(value)
    except (TypeError, ValueError):
        if isinstance(convert, type) and issubclass(convert, Enum):
            choices = ", ".join(m.value for m in convert)
            raise ValidationError(f"Training option {key} must be one of {choices}, got {value!r}")
        raise ValidationError(f"Training option {key} must be {convert.__name__}, got {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run."""
    loss_mode: LossMode = LossMode.COMBINED
    threshold_mode: ThresholdMode = ThresholdMode.OPTIMIZED
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    cost_model: CostModel = field(default_factory=CostModel)
    steepness: SteepnessConfig = field(default_factory=SteepnessConfig)
    grid: ThresholdGrid = field(default_factory=ThresholdGrid)
    seed: int = 0
    optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(learning_rate=DEFAULT_LEARNING_RATE))
    selection_metric: SelectionMetric = SelectionMetric.SOFT_ADCF
    search_metric: SelectionMetric = SelectionMetric.SOFT_ADCF
    search_steepness: SteepnessConfig = field(default_factory=lambda: SteepnessConfig(DEFAULT_SEARCH_ALPHA))
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN_DIMS
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    patience: Optional[int] = None
    batch_strategy: BatchStrategy = BatchStrategy.STRATIFIED
    initial_threshold: float = 0.5
    system: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        object.__setattr__(self, "threshold_mode", ThresholdMode(self.threshold_mode))
        object.__setattr__(self, "selection_metric", SelectionMetric(self.selection_metric))
        object.__setattr__(self, "search_metric", SelectionMetric(self.search_metric))
        object.__setattr__(self, "batch_strategy", BatchStrategy(self.batch_strategy))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if int(self.batch_size) < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.patience is not None and int(self.patience) < 1:
            raise ValidationError(f"patience must be >= 1 when set, got {self.patience}")
        if any(h <= 0 for h in self.hidden_dims):
            raise ValidationError(f"Hidden dims must be positive, got {self.hidden_dims}")
        if not math.isfinite(self.initial_threshold):
            raise ValidationError("Initial threshold must be finite")

    def as_dict(self) -> Dict[str, Any]:
        """Flat, YAML-friendly view with every default spelled out."""
        return {
            "system": self.system,
            "loss_mode": self.loss_mode.value,
            "threshold_mode": self.threshold_mode.value,
            "batch_size": int(self.batch_size),
            "epochs": int(self.epochs),
            "seed": int(self.seed),
            "alpha": self.steepness.alpha,
            "grid_lo": self.grid.lo,
            "grid_hi": self.grid.hi,
            "grid_step": self.grid.step,
            "learning_rate": self.optimizer.learning_rate,
            "beta1": self.optimizer.beta1,
            "beta2": self.optimizer.beta2,
            "adam_epsilon": self.optimizer.epsilon,
            "selection_metric": self.selection_metric.value,
            "search_metric": self.search_metric.value,
            "search_alpha": self.search_steepness.alpha,
            "hidden_dims": list(self.hidden_dims),
            "leaky_slope": self.leaky_slope,
            "patience": self.patience,
            "batch_strategy": self.batch_strategy.value,
            "initial_threshold": self.initial_threshold,
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any], cost_model: Optional[CostModel] = None) -> "TrainConfig":
        """Inverse of as_dict; missing keys keep their defaults."""
        values = dict(values)
        kwargs: Dict[str, Any] = {}
        optimizer = {}
        for key, target in (("learning_rate", "learning_rate"), ("beta1", "beta1"),
                            ("beta2", "beta2"), ("adam_epsilon", "epsilon")):
            if key in values:
                optimizer[target] = _option(key, values.pop(key), float)
        if optimizer:
            kwargs["optimizer"] = AdamConfig(**{"learning_rate": DEFAULT_LEARNING_RATE, **optimizer})
        grid = {k[len("grid_"):]: _option(k, values.pop(k), float)
                for k in ("grid_lo", "grid_hi", "grid_step") if k in values}
        if grid:
            kwargs["grid"] = ThresholdGrid(**grid)
        if "alpha" in values:
            kwargs["steepness"] = SteepnessConfig(_option("alpha", values.pop("alpha"), float))
        if "search_alpha" in values:
            kwargs["search_steepness"] = SteepnessConfig(_option("search_alpha", values.pop("search_alpha"), float))
        if "hidden_dims" in values:
            dims = values.pop("hidden_dims")
            if not isinstance(dims, (list, tuple)):
                raise ValidationError(f"Training option hidden_dims must be a list of integers, got {dims!r}")
            kwargs["hidden_dims"] = tuple(_option("hidden_dims", h, int) for h in dims)
        for key in ("batch_size", "epochs", "seed"):
            if key in values:
                kwargs[key] = _option(key, values.pop(key), int)
        if values.get("patience") is not None:
            kwargs["patience"] = _option("patience", values.pop("patience"), int)
        values.pop("patience", None)
        for key in ("leaky_slope", "initial_threshold"):
            if key in values:
                kwargs[key] = _option(key, values.pop(key), float)
        for key, enum_type in (("loss_mode", LossMode), ("threshold_mode", ThresholdMode),
                               ("selection_metric", SelectionMetric), ("search_metric", SelectionMetric),
                               ("batch_strategy", BatchStrategy)):
            if key in values:
                kwargs[key] = _option(key, values.pop(key), enum_type)
        if "system" in values:
            kwargs["system"] = values.pop("system")
        if values:
            raise ValidationError(f"Unknown training options: {sorted(values)}")
        if cost_model is not None:
            kwargs["cost_model"] = cost_model
        return cls(**kwargs)


def system_config(name: str, **overrides) -> TrainConfig:
    """TrainConfig for one of the preset systems s1..s4, with field overrides."""
    preset = system_preset(name)
    return TrainConfig(**{**preset, "system": str(name).lower(), **overrides})


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_train_loss: float
    tau: float
    dev_metric: float
    improved: bool


@dataclass
class TrainReport:
    """Per-epoch history and the dev-selected result of one training run."""
    records: List[EpochRecord] = field(default_factory=list)
    best_tau: float = 0.5
    best_epoch: Optional[int] = None
    best_dev_metric: float = math.inf
    final_dev_metric: Optional[float] = None
    improved: bool = False
    stopped_early: bool = False
    selection_metric: str = SelectionMetric.SOFT_ADCF.value

    def to_records(self) -> List[Dict[str, Any]]:
        """One ``epoch`` record per epoch followed by a ``summary`` record."""
        rows: List[Dict[str, Any]] = [{"record": "epoch", **asdict(r)} for r in self.records]
        rows.append({
            "record": "summary",
            "best_epoch": self.best_epoch,
            "best_tau": self.best_tau,
            "best_dev_metric": self.best_dev_metric if self.improved else None,
            "final_dev_metric": self.final_dev_metric,
            "improved": self.improved,
            "stopped_early": self.stopped_early,
            "selection_metric": self.selection_metric,
            "epochs_run": len(self.records),
        })
        return rows


def _rng(seed: Union[int, Sequence[int]]) -> np.random.Generator:
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed) % 2 ** 64)
    return np.random.default_rng([int(s) % 2 ** 64 for s in seed])


def _proportional_counts(remaining: List[int], size: int) -> List[int]:
    """Largest-remainder split of size items over classes in proportion to what remains."""
    total = sum(remaining)
    quotas = [r * size / total for r in remaining]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda c: (-(quotas[c] - counts[c]), c))
    for c in order[:size - sum(counts)]:
        counts[c] += 1
    return counts


def make_minibatches(dataset: Union[TrialSet, Sequence[int], np.ndarray], batch_size: int,
                     seed: Union[int, Sequence[int]] = 0,
                     strategy: BatchStrategy = BatchStrategy.STRATIFIED) -> List[np.ndarray]:
    """Partition trial indices into shuffled minibatches.

    Stratified batching deals each class out over the batches in proportion
    to the trials still undealt, so every full batch matches the dataset's
    class mix to within a trial. The last batch may be short.
    """
    if int(batch_size) < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    batch_size = int(batch_size)
    codes = dataset.label_codes() if isinstance(dataset, TrialSet) else np.asarray(dataset, dtype=int).ravel()
    n = codes.size
    if n == 0:
        return []
    rng = _rng(seed)

    if BatchStrategy(strategy) is BatchStrategy.RANDOM:
        order = rng.permutation(n)
        return [order[start:start + batch_size] for start in range(0, n, batch_size)]

    pools = []
    for cls in CLASS_ORDER:
        members = np.flatnonzero(codes == cls.code)
        pools.append(members[rng.permutation(members.size)])
    cursors = [0] * len(pools)
    batches = []
    for start in range(0, n, batch_size):
        size = min(batch_size, n - start)
        remaining = [pool.size - cursor for pool, cursor in zip(pools, cursors)]
        parts = []
        for c, count in enumerate(_proportional_counts(remaining, size)):
            parts.append(pools[c][cursors[c]:cursors[c] + count])
            cursors[c] += count
        batch = np.concatenate(parts)
        batches.append(batch[rng.permutation(batch.size)])
    return batches


def score_trials(model: MlpModel, trials: TrialSet) -> np.ndarray:
    """Model scores of every trial, in trial order."""
    if trials.input_dim != model.input_dim:
        raise ValidationError(f"Model expects input dim {model.input_dim} but trials have "
                              f"{trials.input_dim} (d_asv={trials.d_asv}, d_cm={trials.d_cm})")
    return forward_batch(model, trials.features())


def score_set(model: MlpModel, trials: TrialSet) -> ScoreSet:
    """Score trials and group the scores by class."""
    return ScoreSet.from_labeled(score_trials(model, trials), trials.label_codes())


def search_threshold(scores: ScoreSet, cm: CostModel, steep: SteepnessConfig = SteepnessConfig(),
                     grid: GridLike = ThresholdGrid(),
                     metric: SelectionMetric = SelectionMetric.SOFT_ADCF) -> float:
    """Grid point with the lowest a-DCF (soft by default) of a score set; ties go to the smallest."""
    points = np.sort(_grid_points(grid))
    if SelectionMetric(metric) is SelectionMetric.HARD_ADCF:
        curve = a_dcf_vs_threshold(scores, cm, points)
        costs = np.asarray([cost for _, cost in curve])
        return float(points[int(np.argmin(costs))])

    best_tau, best_value = float(points[0]), math.inf
    for tau in points.tolist():
        value = loss.soft_a_dcf(scores, tau, cm, steep)
        if value < best_value:
            best_tau, best_value = tau, value
    return best_tau


def grid_search_threshold(model: MlpModel, trn: TrialSet, cm: CostModel,
                          steep: SteepnessConfig = SteepnessConfig(), grid: GridLike = ThresholdGrid(),
                          metric: SelectionMetric = SelectionMetric.SOFT_ADCF) -> float:
    """Threshold minimizing the a-DCF of the model's scores on the training set."""
    if len(trn) == 0:
        raise ValidationError("Grid search needs a non-empty training set")
    return search_threshold(score_set(model, trn), cm, steep, grid, metric)


def evaluate_system(model: MlpModel, trials: TrialSet, cm: CostModel, grid: Optional[GridLike] = None,
                    normalize: bool = False) -> MetricReport:
    """Metric bundle of a trained model at its calibrated threshold."""
    if len(trials) == 0:
        raise ValidationError("Evaluation set is empty")
    points = None if grid is None else _grid_points(grid)
    return evaluate_scores(score_set(model, trials), cm, tau=model.threshold, grid=points, normalize=normalize)


class Trainer:
    """Runs the epoch loop for one TrainConfig."""

    def __init__(self, config: TrainConfig, progress: bool = False):
        self.config = config
        self.progress = progress

    def _check_inputs(self, trn: TrialSet, dev: TrialSet) -> None:
        if self.config.epochs == 0:
            raise TrainingError("nothing trained: epochs must be >= 1")
        counts = trn.counts()
        missing = [cls.value for cls in CLASS_ORDER if counts[cls] == 0]
        if missing:
            raise TrainingError(f"Training set has no {', '.join(missing)} trials")
        if len(dev) == 0:
            raise TrainingError("Dev set is empty")
        if dev.input_dim != trn.input_dim:
            raise TrainingError(f"Dev input dim {dev.input_dim} differs from training input dim {trn.input_dim}")

    def _dev_metric(self, model: MlpModel, dev: TrialSet, tau: float) -> float:
        scores = score_set(model, dev)
        if self.config.selection_metric is SelectionMetric.SOFT_ADCF:
            return loss.soft_a_dcf(scores, tau, self.config.cost_model, self.config.search_steepness)
        return a_dcf(hard_error_rates(scores, tau), self.config.cost_model)

    def _train_epoch(self, model: MlpModel, state: AdamState, features: np.ndarray, codes: np.ndarray,
                     tau: float, epoch: int) -> Tuple[MlpModel, AdamState, float]:
        cfg = self.config
        batch_losses = []
        for batch in make_minibatches(codes, cfg.batch_size, seed=(cfg.seed, epoch), strategy=cfg.batch_strategy):
            x = features[batch]
            scores = forward_batch(model, x)
            value, upstream = loss.training_objective(scores, codes[batch], tau, cfg.cost_model,
                                                      cfg.steepness, cfg.loss_mode)
            model, state = apply_update(model, backward(model, x, upstream), state, cfg.optimizer)
            batch_losses.append(value)
        return model, state, math.fsum(batch_losses) / len(batch_losses)

    def fit(self, trn: TrialSet, dev: TrialSet) -> Tuple[MlpModel, TrainReport]:
        """Run every epoch and return the best model with its threshold."""
        cfg = self.config
        self._check_inputs(trn, dev)

        model = init_model(default_dims(trn.input_dim, cfg.hidden_dims), cfg.leaky_slope, cfg.seed)
        state = AdamState.fresh(model)
        features, codes = trn.features(), trn.label_codes()
        tau = cfg.initial_threshold

        report = TrainReport(best_tau=cfg.initial_threshold, selection_metric=cfg.selection_metric.value)
        best_model: Optional[MlpModel] = None
        since_improvement = 0

        epochs = range(1, int(cfg.epochs) + 1)
        bar = tqdm(epochs, desc=f"train {cfg.system or cfg.loss_mode.value}", unit="epoch") if self.progress else None
        for epoch in (bar if bar is not None else epochs):
            model, state, mean_loss = self._train_epoch(model, state, features, codes, tau, epoch)
            if cfg.threshold_mode is ThresholdMode.OPTIMIZED:
                tau = grid_search_threshold(model, trn, cfg.cost_model, cfg.search_steepness, cfg.grid,
                                            cfg.search_metric)
            dev_metric = self._dev_metric(model, dev, tau)

            improved = dev_metric < report.best_dev_metric
            if improved:
                report.best_dev_metric = dev_metric
                report.best_epoch = epoch
                report.best_tau = tau
                report.improved = True
                best_model = model
                since_improvement = 0
            else:
                since_improvement += 1
            report.records.append(EpochRecord(epoch, mean_loss, tau, dev_metric, improved))
            report.final_dev_metric = dev_metric

            logger.info("epoch %d/%d loss=%.6f tau=%.4f dev_%s=%.6f%s", epoch, cfg.epochs, mean_loss, tau,
                        cfg.selection_metric.value, dev_metric, " *" if improved else "")
            if bar is not None:
                bar.set_postfix(loss=f"{mean_loss:.4f}", tau=f"{tau:.3f}", dev=f"{dev_metric:.4f}")

            if cfg.patience is not None and since_improvement >= cfg.patience:
                report.stopped_early = True
                logger.info("No dev improvement for %d epochs, stopping at epoch %d", cfg.patience, epoch)
                break
        if bar is not None:
            bar.close()

        if best_model is None:
            logger.warning("Dev metric never improved; returning final weights with threshold %.3f",
                           cfg.initial_threshold)
            return model.with_threshold(cfg.initial_threshold), report

        logger.info("Best epoch %d: tau=%.4f dev_%s=%.6f", report.best_epoch, report.best_tau,
                    cfg.selection_metric.value, report.best_dev_metric)
        return best_model.with_threshold(report.best_tau), report


def train(trn: TrialSet, dev: TrialSet, cfg: TrainConfig, progress: bool = False) -> Tuple[MlpModel, TrainReport]:
    """Train a back-end and calibrate its threshold; see Trainer."""
    return Trainer(cfg, progress=progress).fit(trn, dev)


def batch_size_study(trn: TrialSet, dev: TrialSet, cfg: TrainConfig, batch_sizes: Sequence[int],
                     progress: bool = False) -> List[Tuple[int, float]]:
    """Dev-set min a-DCF of one model per batch size, all else fixed."""
    if not batch_sizes:
        raise ValidationError("batch_size_study needs at least one batch size")
    results = []
    for size in batch_sizes:
        model, _ = train(trn, dev, replace(cfg, batch_size=int(size)), progress=progress)
        dev_min, _ = min_a_dcf(score_set(model, dev), cfg.cost_model)
        logger.info("batch size %d: dev min a-DCF %.6f", size, dev_min)
        results.append((int(size), dev_min))
    return results
