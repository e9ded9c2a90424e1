"""Trial ingestion, embedding concatenation, score files and the synthetic three-class generator."""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DataFormatError, ValidationError
from metrics import CLASS_ORDER, ScoreSet, TrialClass

logger = logging.getLogger(__name__)

TRIALS_HEADER_PREFIX = "#adcf-trials v1"
DEFAULT_D_ASV = 16
DEFAULT_D_CM = 8
SPLIT_TOLERANCE = 1e-9

TRIALS_BINARY_MAGIC = b"ADCF-TRL"
TRIALS_BINARY_VERSION = 1

PathLike = Union[str, Path]


def _vector(values: Iterable[float]) -> np.ndarray:
    return np.asarray(values, dtype=float).ravel()


@dataclass(frozen=True, eq=False)
class TrialRecord:
    """One verification trial: enrolment and test speaker embeddings plus the test CM embedding."""
    trial_id: str
    label: TrialClass
    e_enr_asv: np.ndarray
    e_tst_asv: np.ndarray
    e_tst_cm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "label", TrialClass.parse(self.label))
        for name in ("e_enr_asv", "e_tst_asv", "e_tst_cm"):
            vec = _vector(getattr(self, name))
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"Trial {self.trial_id}: {name} has non-finite entries")
            object.__setattr__(self, name, vec)
        if self.e_enr_asv.size != self.e_tst_asv.size:
            raise ValidationError(f"Trial {self.trial_id}: enrolment ({self.e_enr_asv.size}) and test "
                                  f"({self.e_tst_asv.size}) speaker embeddings differ in length")

    @property
    def d_asv(self) -> int:
        return self.e_enr_asv.size

    @property
    def d_cm(self) -> int:
        return self.e_tst_cm.size


def concat_embedding(trial: TrialRecord, d_asv: Optional[int] = None, d_cm: Optional[int] = None) -> np.ndarray:
    """Back-end input [e_enr_asv, e_tst_asv, e_tst_cm], in exactly that order."""
    if d_asv is not None and trial.d_asv != d_asv:
        raise ValidationError(f"Trial {trial.trial_id}: speaker embedding dim {trial.d_asv}, expected {d_asv}")
    if d_cm is not None and trial.d_cm != d_cm:
        raise ValidationError(f"Trial {trial.trial_id}: CM embedding dim {trial.d_cm}, expected {d_cm}")
    return np.concatenate([trial.e_enr_asv, trial.e_tst_asv, trial.e_tst_cm])


@dataclass(frozen=True, eq=False)
class TrialSet:
    """An immutable, dimension-checked collection of trials."""
    records: Tuple[TrialRecord, ...]
    d_asv: int
    d_cm: int

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.d_asv <= 0 or self.d_cm <= 0:
            raise ValidationError(f"Embedding dims must be positive, got d_asv={self.d_asv}, d_cm={self.d_cm}")
        for record in self.records:
            if record.d_asv != self.d_asv or record.d_cm != self.d_cm:
                raise ValidationError(f"Trial {record.trial_id}: dims {record.d_asv}/{record.d_cm} "
                                      f"do not match the set's {self.d_asv}/{self.d_cm}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.records)

    @property
    def input_dim(self) -> int:
        return 2 * self.d_asv + self.d_cm

    def features(self) -> np.ndarray:
        """(n, 2*d_asv + d_cm) matrix of concatenated embeddings."""
        if not self.records:
            return np.zeros((0, self.input_dim))
        return np.stack([concat_embedding(r) for r in self.records])

    def label_codes(self) -> np.ndarray:
        """Integer class code of every trial, in order."""
        return np.asarray([r.label.code for r in self.records], dtype=int)

    def counts(self) -> Dict[TrialClass, int]:
        """Trials per class."""
        codes = self.label_codes()
        return {cls: int(np.count_nonzero(codes == cls.code)) for cls in CLASS_ORDER}

    def subset(self, indices: Sequence[int]) -> "TrialSet":
        """Trials at the given positions, in the given order."""
        return TrialSet(tuple(self.records[int(i)] for i in indices), self.d_asv, self.d_cm)

    def without(self, cls: TrialClass) -> "TrialSet":
        """Copy with every trial of one class removed."""
        return TrialSet(tuple(r for r in self.records if r.label is not cls), self.d_asv, self.d_cm)


@dataclass(frozen=True)
class ScoredTrial:
    """One line of a score file."""
    trial_id: str
    label: TrialClass
    score: float


def to_score_set(records: Iterable[ScoredTrial]) -> ScoreSet:
    """Group scored trials by class."""
    records = list(records)
    return ScoreSet.from_labeled([r.score for r in records], [r.label for r in records])


def _format_float(value: float) -> str:
    return repr(float(value))


def _format_vector(vec: np.ndarray) -> str:
    return " ".join(_format_float(v) for v in vec.tolist())


def _read_text(path: Path) -> str:
    data = path.read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError(f"not UTF-8 text (byte offset {e.start})", str(path), data.count(b"\n", 0, e.start) + 1)


def _parse_float(token: str, path: str, line_no: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataFormatError(f"not a decimal number: {token!r}", path, line_no)
    if not math.isfinite(value):
        raise DataFormatError(f"non-finite value {token!r}", path, line_no)
    return value


def _parse_vector(field_text: str, expected: int, name: str, path: str, line_no: int) -> np.ndarray:
    tokens = field_text.split()
    if len(tokens) != expected:
        raise DataFormatError(f"{name} has {len(tokens)} values, header declares {expected}", path, line_no)
    return np.asarray([_parse_float(t, path, line_no) for t in tokens], dtype=float)


def _parse_label(token: str, path: str, line_no: int) -> TrialClass:
    try:
        return TrialClass(token)
    except ValueError:
        raise DataFormatError(f"unknown label {token!r} (expected target, nontarget or spoof)", path, line_no)


def _parse_header(line: str, path: str) -> Tuple[int, int]:
    if not line.startswith(TRIALS_HEADER_PREFIX):
        raise DataFormatError(f"missing trial header, expected '{TRIALS_HEADER_PREFIX} d_asv=<int> d_cm=<int>'",
                              path, 1)
    dims: Dict[str, int] = {}
    for token in line[len(TRIALS_HEADER_PREFIX):].split():
        key, _, value = token.partition("=")
        try:
            dims[key] = int(value)
        except ValueError:
            raise DataFormatError(f"bad header field {token!r}", path, 1)
    if "d_asv" not in dims or "d_cm" not in dims:
        raise DataFormatError("header must declare d_asv and d_cm", path, 1)
    if dims["d_asv"] <= 0 or dims["d_cm"] <= 0:
        raise DataFormatError(f"header dims must be positive, got {dims}", path, 1)
    return dims["d_asv"], dims["d_cm"]


def save_trials(trials: TrialSet, path: PathLike) -> Path:
    """Write a text trial file: header, then one TAB-separated line per trial."""
    path = Path(path)
    lines = [f"{TRIALS_HEADER_PREFIX} d_asv={trials.d_asv} d_cm={trials.d_cm}"]
    for r in trials:
        lines.append("\t".join([r.trial_id, r.label.value, _format_vector(r.e_enr_asv),
                                _format_vector(r.e_tst_asv), _format_vector(r.e_tst_cm)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_trials(path: PathLike) -> TrialSet:
    """Read a text trial file, validating every line against the header dims."""
    path = Path(path)
    lines = _read_text(path).splitlines()
    if not lines:
        raise DataFormatError("empty file (no header)", str(path), 1)
    d_asv, d_cm = _parse_header(lines[0], str(path))

    records: List[TrialRecord] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataFormatError(f"expected 5 TAB-separated fields, found {len(fields)}", str(path), line_no)
        trial_id, label, enr, tst, cm = fields
        records.append(TrialRecord(
            trial_id=trial_id,
            label=_parse_label(label, str(path), line_no),
            e_enr_asv=_parse_vector(enr, d_asv, "e_enr_asv", str(path), line_no),
            e_tst_asv=_parse_vector(tst, d_asv, "e_tst_asv", str(path), line_no),
            e_tst_cm=_parse_vector(cm, d_cm, "e_tst_cm", str(path), line_no),
        ))
    logger.debug("Loaded %d trials from %s", len(records), path)
    return TrialSet(tuple(records), d_asv, d_cm)


def save_trials_binary(trials: TrialSet, path: PathLike) -> Path:
    """Bulk variant of save_trials using the checkpoint's little-endian float64 encoding."""
    path = Path(path)
    chunks = [struct.pack("<8sIIII", TRIALS_BINARY_MAGIC, TRIALS_BINARY_VERSION,
                          trials.d_asv, trials.d_cm, len(trials))]
    for r in trials:
        trial_id = r.trial_id.encode("utf-8")
        chunks.append(struct.pack("<IB", len(trial_id), r.label.code))
        chunks.append(trial_id)
        chunks.append(np.ascontiguousarray(concat_embedding(r), dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_trials_binary(path: PathLike) -> TrialSet:
    """Read a binary trial file written by save_trials_binary."""
    path = Path(path)
    data = path.read_bytes()
    header = struct.Struct("<8sIIII")
    if len(data) < header.size:
        raise DataFormatError("file too short for a binary trial header", str(path))
    magic, version, d_asv, d_cm, count = header.unpack_from(data, 0)
    if magic != TRIALS_BINARY_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {TRIALS_BINARY_MAGIC!r}", str(path))
    if version != TRIALS_BINARY_VERSION:
        raise DataFormatError(f"binary trial format version {version}, expected {TRIALS_BINARY_VERSION}", str(path))

    width = 2 * d_asv + d_cm
    offset = header.size
    records = []
    try:
        for index in range(count):
            id_len, code = struct.unpack_from("<IB", data, offset)
            offset += 5
            trial_id = data[offset:offset + id_len].decode("utf-8")
            offset += id_len
            vec = np.frombuffer(data, dtype="<f8", count=width, offset=offset).astype(float)
            offset += 8 * width
            records.append(TrialRecord(trial_id, TrialClass.from_code(code),
                                       vec[:d_asv], vec[d_asv:2 * d_asv], vec[2 * d_asv:]))
    except (struct.error, ValueError) as e:
        raise DataFormatError(f"truncated or corrupt record {index}: {e}", str(path))
    if offset != len(data):
        raise DataFormatError(f"{len(data) - offset} trailing bytes after {count} records", str(path))
    return TrialSet(tuple(records), d_asv, d_cm)


def read_trial_file(path: PathLike) -> TrialSet:
    """Load a trial file in either encoding, chosen by its leading bytes."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(TRIALS_BINARY_MAGIC))
    return load_trials_binary(path) if head == TRIALS_BINARY_MAGIC else load_trials(path)


def save_scores(records: Iterable[ScoredTrial], path: PathLike) -> Path:
    """Write a score file: ``trial_id<TAB>label<TAB>score`` per line."""
    path = Path(path)
    lines = [f"{r.trial_id}\t{TrialClass.parse(r.label).value}\t{_format_float(r.score)}" for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def load_scores(path: PathLike) -> List[ScoredTrial]:
    """Read a score file in file order; ``#`` lines are comments."""
    path = Path(path)
    records = []
    for line_no, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataFormatError(f"expected 3 TAB-separated fields, found {len(fields)}", str(path), line_no)
        trial_id, label, score = fields
        records.append(ScoredTrial(trial_id, _parse_label(label, str(path), line_no),
                                   _parse_float(score, str(path), line_no)))
    logger.debug("Loaded %d scores from %s", len(records), path)
    return records


def load_score_set(path: PathLike) -> ScoreSet:
    """Read a score file straight into per-class score arrays."""
    return to_score_set(load_scores(path))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic three-class trial generator.

    Every trial enrols the claimed speaker near the speaker centroid. Target
    tests sit near the same centroid with a bona fide CM embedding; nontarget
    tests come from the opposite speaker centroid; spoof tests imitate the
    claimed speaker but carry a CM embedding from the spoof cluster.
    """
    d_asv: int = DEFAULT_D_ASV
    d_cm: int = DEFAULT_D_CM
    n_target: int = 1500
    n_nontarget: int = 750
    n_spoof: int = 750
    noise_scale: float = 1.0
    separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.d_asv <= 0 or self.d_cm <= 0:
            raise ValidationError(f"Dims must be positive, got d_asv={self.d_asv}, d_cm={self.d_cm}")
        counts = (self.n_target, self.n_nontarget, self.n_spoof)
        if any(c < 0 for c in counts) or sum(counts) == 0:
            raise ValidationError(f"Class counts must be non-negative and not all zero, got {counts}")
        if not (math.isfinite(self.noise_scale) and self.noise_scale > 0):
            raise ValidationError(f"Noise scale must be positive, got {self.noise_scale}")
        if not (math.isfinite(self.separation) and self.separation >= 0):
            raise ValidationError(f"Separation must be non-negative, got {self.separation}")

    @property
    def counts(self) -> Tuple[int, int, int]:
        return self.n_target, self.n_nontarget, self.n_spoof

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SynthSpec":
        """Build a spec from config values, reporting unknown keys and bad values as validation errors."""
        unknown = set(values) - set(SYNTH_FIELD_TYPES)
        if unknown:
            raise ValidationError(f"Unknown synth options: {sorted(unknown)}")
        converted = {}
        for key, value in values.items():
            convert = SYNTH_FIELD_TYPES[key]
            if isinstance(value, bool):
                raise ValidationError(f"Synth option {key} must be a number, got {value!r}")
            try:
                converted[key] = convert(value)
            except (TypeError, ValueError):
                raise ValidationError(f"Synth option {key} must be {convert.__name__}, got {value!r}")
        return cls(**converted)


SYNTH_FIELD_TYPES = {"d_asv": int, "d_cm": int, "n_target": int, "n_nontarget": int, "n_spoof": int,
                     "noise_scale": float, "separation": float, "seed": int}


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def generate_synthetic(spec: SynthSpec) -> TrialSet:
    """Draw a labeled trial set; deterministic for a given spec (seed included)."""
    rng = np.random.default_rng(int(spec.seed) % 2 ** 64)
    half = spec.separation / 2.0
    speaker = half * _unit(rng, spec.d_asv)
    impostor = -speaker
    bona_fide_cm = half * _unit(rng, spec.d_cm)
    spoof_cm = -bona_fide_cm

    def noisy(center: np.ndarray) -> np.ndarray:
        return center + spec.noise_scale * rng.standard_normal(center.size)

    test_centroids = {
        TrialClass.TARGET: (speaker, bona_fide_cm),
        TrialClass.NONTARGET: (impostor, bona_fide_cm),
        TrialClass.SPOOF: (speaker, spoof_cm),
    }
    records = []
    for cls, count in zip(CLASS_ORDER, spec.counts):
        asv_center, cm_center = test_centroids[cls]
        for index in range(count):
            records.append(TrialRecord(
                trial_id=f"{cls.value}-{index:06d}",
                label=cls,
                e_enr_asv=noisy(speaker),
                e_tst_asv=noisy(asv_center),
                e_tst_cm=noisy(cm_center),
            ))
    order = rng.permutation(len(records))
    logger.debug("Generated %d synthetic trials (counts %s, seed %d)", len(records), spec.counts, spec.seed)
    return TrialSet(tuple(records[i] for i in order), spec.d_asv, spec.d_cm)


def _allocate(count: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of count items, at least one per part."""
    quotas = [count * f for f in fractions]
    sizes = [int(math.floor(q)) for q in quotas]
    remainders = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in remainders[:count - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        while sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split(dataset: TrialSet, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> Tuple[TrialSet, ...]:
    """Stratified split into disjoint parts whose union is the dataset."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(not f > 0 for f in fractions):
        raise ValidationError(f"Split fractions must all be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > SPLIT_TOLERANCE:
        raise ValidationError(f"Split fractions must sum to 1, got {sum(fractions)!r}")

    rng = np.random.default_rng(int(seed) % 2 ** 64)
    codes = dataset.label_codes()
    parts: List[List[int]] = [[] for _ in fractions]
    for cls in CLASS_ORDER:
        members = np.flatnonzero(codes == cls.code)
        if members.size == 0:
            continue
        if members.size < len(fractions):
            raise ValidationError(f"Class {cls.value} has {members.size} trials, "
                                  f"fewer than the {len(fractions)} requested splits")
        members = members[rng.permutation(members.size)]
        start = 0
        for part, size in zip(parts, _allocate(members.size, fractions)):
            part.extend(members[start:start + size].tolist())
            start += size
    return tuple(dataset.subset(sorted(part)) for part in parts)
