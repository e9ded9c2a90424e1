"""Run directory management: the on-disk layout of one experiment's outputs."""
import csv
import json
import logging
import re
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import yaml

from errors import RunIOError, ValidationError

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.yaml"
MANIFEST = "manifest.yaml"
CHECKPOINT = "model.adcf"
TRAIN_LOG = "train_log.jsonl"
CURVES_DIR = "curves"
COMPARE_CSV = "compare.csv"
SPLITS = ("trn", "dev", "eval")


def sanitize_name(name: str) -> str:
    """Sanitize a system or run label for file system compatibility."""
    sanitized = re.sub(r"[^\w\s.-]", "", str(name).lower())
    sanitized = re.sub(r"[\s_]+", "-", sanitized)
    sanitized = sanitized.strip("-.")
    return sanitized or "unnamed-run"


class RunDirectory:
    """Reads and writes the artifacts of one run under a single directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def __repr__(self) -> str:
        return f"RunDirectory({str(self.root)!r})"

    def ensure(self) -> "RunDirectory":
        """Create the directory (and parents), raising RunIOError when that is impossible."""
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise RunIOError(f"Cannot create output directory {self.root}: {e}")
        if not self.root.is_dir():
            raise RunIOError(f"Output path {self.root} exists and is not a directory")
        return self

    def child(self, name: str) -> "RunDirectory":
        """Subdirectory run with a sanitized name."""
        return RunDirectory(self.root / sanitize_name(name))

    # Artifact paths

    @property
    def config_path(self) -> Path:
        return self.root / RESOLVED_CONFIG

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    @property
    def checkpoint_path(self) -> Path:
        return self.root / CHECKPOINT

    @property
    def train_log_path(self) -> Path:
        return self.root / TRAIN_LOG

    @property
    def compare_path(self) -> Path:
        return self.root / COMPARE_CSV

    def trials_path(self, split: str) -> Path:
        return self.root / f"{split}.trials"

    def scores_path(self, split: str) -> Path:
        return self.root / f"{split}.scores"

    def curve_path(self, name: str) -> Path:
        return self.root / CURVES_DIR / f"{name}.csv"

    # Writers

    def _writing(self, path: Path) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise RunIOError(f"Cannot create {path.parent}: {e}")
        return path

    def write_yaml(self, path: Path, content: Dict[str, Any]) -> Path:
        """Write a mapping as YAML."""
        path = self._writing(path)
        try:
            path.write_text(yaml.safe_dump(content, sort_keys=False), encoding="utf-8")
        except OSError as e:
            raise RunIOError(f"Cannot write {path}: {e}")
        logger.info("Wrote %s", path)
        return path

    def read_yaml(self, path: Path) -> Dict[str, Any]:
        """Read a YAML mapping written by write_yaml."""
        try:
            content = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ValidationError(f"{path}: invalid YAML: {e}")
        return content or {}

    def write_jsonl(self, path: Path, records: Iterable[Dict[str, Any]]) -> Path:
        """One JSON object per line, keys in insertion order."""
        path = self._writing(path)
        try:
            with open(path, "w", encoding="utf-8") as f:
                for record in records:
                    f.write(json.dumps(record) + "\n")
        except OSError as e:
            raise RunIOError(f"Cannot write {path}: {e}")
        logger.info("Wrote %s", path)
        return path

    def read_jsonl(self, path: Path) -> List[Dict[str, Any]]:
        """Read one JSON record per line."""
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def write_csv(self, path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Write a header row followed by data rows."""
        path = self._writing(path)
        try:
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)
        except OSError as e:
            raise RunIOError(f"Cannot write {path}: {e}")
        logger.info("Wrote %s", path)
        return path

    def read_csv(self, path: Path) -> List[Dict[str, str]]:
        """Read CSV rows keyed by the header."""
        with open(path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))

    def missing_artifacts(self, paths: Iterable[Path]) -> List[str]:
        """Names of the given artifacts that do not exist."""
        return [path.name for path in paths if not path.exists()]

    def backup(self, path: Path) -> Optional[Path]:
        """Copy an existing artifact aside with a timestamp before it is overwritten."""
        if not path.exists():
            return None
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
        backup_path = path.with_name(f"{path.stem}_backup_{timestamp}{path.suffix}")
        try:
            shutil.copy2(path, backup_path)
        except OSError as e:
            raise RunIOError(f"Cannot back up {path}: {e}")
        logger.info("Backed up %s to %s", path, backup_path.name)
        return backup_path
