"""Dataset container, the cycle-length CSV schema, and cohort ingestion."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple


from .errors import DataError, DomainError
from .model import CycleHistory, UserParameters, make_rng

logger = logging.getLogger(__name__)

CSV_HEADER = ("user_id", "cycle_index", "cycle_length", "true_skips")


@dataclass
class Dataset:
    """Ordered collection of user histories."""

    histories: List[CycleHistory]
    true_params: Optional[List[UserParameters]] = field(default=None, repr=False)
    redraws: int = 0

    def __len__(self) -> int:
        return len(self.histories)

    def __iter__(self) -> Iterator[CycleHistory]:
        return iter(self.histories)

    def __getitem__(self, i):
        return self.histories[i]

    @property
    def has_true_skips(self) -> bool:
        return bool(self.histories) and all(h.true_skips is not None for h in self.histories)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        params = None if self.true_params is None else [self.true_params[i] for i in indices]
        return Dataset([self.histories[i] for i in indices], params)

    def head_cycles(self, n: int) -> "Dataset":
        """Every history truncated to its first ``n`` cycles."""
        return Dataset([h.head(n) for h in self.histories], self.true_params)

    def split_last(self, n_train: int) -> Tuple[List[CycleHistory], List[Optional[int]]]:
        """Training histories (first ``n_train`` cycles) and the next cycle.

        Users without a cycle at position ``n_train`` get ``None`` as target.
        """
        train, target = [], []
        for h in self.histories:
            train.append(h.head(n_train))
            target.append(h.cycles[n_train] if len(h) > n_train else None)
        return train, target


def write_csv(dataset: Dataset | Sequence[CycleHistory], path) -> None:
    """Write histories in the ``user_id,cycle_index,cycle_length,true_skips`` schema."""
    histories = dataset.histories if isinstance(dataset, Dataset) else list(dataset)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for h in histories:
            for c, length in enumerate(h.cycles):
                skip = "" if h.true_skips is None else h.true_skips[c]
                writer.writerow([h.user_id, c, length, skip])


def read_csv(path) -> Dataset:
    """Parse a dataset CSV, validating the schema row by row.

    Raises
    ------
    DataError
        On a bad header, malformed row (with its line number), a
        non-consecutive ``cycle_index`` or a cycle length below 1.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        warnings.warn(f"{path}: empty input, returning an empty dataset")
        return Dataset([])
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise DataError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    cycles: Dict[str, List[int]] = {}
    skips: Dict[str, List[Optional[int]]] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"{path}: line {line}: expected 4 fields, got {len(row)}")
        uid, idx_s, len_s, skip_s = row
        try:
            idx = int(idx_s)
            length = int(len_s)
            skip = int(skip_s) if skip_s.strip() != "" else None
        except ValueError:
            raise DataError(f"{path}: line {line}: non-integer field in {row}") from None
        if length < 1:
            raise DataError(f"{path}: line {line}: cycle_length must be >= 1, got {length}")
        if skip is not None and skip < 0:
            raise DataError(f"{path}: line {line}: true_skips must be >= 0")
        seen = cycles.setdefault(uid, [])
        if idx != len(seen):
            raise DataError(f"{path}: line {line}: user {uid} cycle_index {idx}, expected {len(seen)}")
        seen.append(length)
        skips.setdefault(uid, []).append(skip)
    histories = []
    for uid, cyc in cycles.items():
        sk = skips[uid]
        if all(s is None for s in sk):
            true_skips = None
        elif any(s is None for s in sk):
            raise DataError(f"{path}: user {uid} has true_skips on some cycles only")
        else:
            true_skips = tuple(sk)
        histories.append(CycleHistory(uid, tuple(cyc), true_skips))
    return Dataset(histories)


@dataclass(frozen=True)
class CohortFilter:
    """Cohort selection rules, applied in field order.

    ``max_gap_days`` drops cycles longer than the limit (no period logged
    within that many days); ``None`` disables a rule.
    """

    min_cycles: int = 1
    max_gap_days: Optional[int] = None
    first_k_cycles: Optional[int] = None
    age_range: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.min_cycles < 1:
            raise DomainError("min_cycles must be >= 1")
        if self.first_k_cycles is not None and self.first_k_cycles < 1:
            raise DomainError("first_k_cycles must be >= 1")

    def to_dict(self) -> dict:
        return {
            "min_cycles": self.min_cycles,
            "max_gap_days": self.max_gap_days,
            "first_k_cycles": self.first_k_cycles,
            "age_range": None if self.age_range is None else list(self.age_range),
        }


@dataclass
class IngestReport:
    users_in: int = 0
    users_kept: int = 0
    removed_by_age: int = 0
    removed_by_min_cycles: int = 0
    removed_by_gap: int = 0
    cycles_removed_by_gap: int = 0
    cycles_truncated: int = 0

    @property
    def users_removed(self) -> int:
        return self.removed_by_age + self.removed_by_min_cycles + self.removed_by_gap


def apply_filter(
    dataset: Dataset,
    cohort: CohortFilter,
    ages: Optional[Dict[str, float]] = None,
    shuffle_seed: Optional[int] = None,
) -> Tuple[Dataset, IngestReport]:
    """Apply age, minimum-cycle, gap and truncation rules in that order.

    With ``shuffle_seed`` each user's cycles are permuted before truncation.
    """
    report = IngestReport(users_in=len(dataset))
    kept = []
    for index, h in enumerate(dataset.histories):
        if cohort.age_range is not None:
            if ages is None:
                raise DataError("age_range filter requires user ages")
            age = ages.get(h.user_id)
            lo, hi = cohort.age_range
            if age is None or not (lo <= age <= hi):
                report.removed_by_age += 1
                continue
        if len(h) < cohort.min_cycles:
            report.removed_by_min_cycles += 1
            continue
        cycles = list(h.cycles)
        skips = None if h.true_skips is None else list(h.true_skips)
        if cohort.max_gap_days is not None:
            keep = [c <= cohort.max_gap_days for c in cycles]
            report.cycles_removed_by_gap += keep.count(False)
            cycles = [c for c, k in zip(cycles, keep) if k]
            if skips is not None:
                skips = [s for s, k in zip(skips, keep) if k]
            if not cycles:
                report.removed_by_gap += 1
                continue
        if shuffle_seed is not None:
            perm = make_rng(shuffle_seed, index).permutation(len(cycles))
            cycles = [cycles[i] for i in perm]
            if skips is not None:
                skips = [skips[i] for i in perm]
        if cohort.first_k_cycles is not None and len(cycles) > cohort.first_k_cycles:
            report.cycles_truncated += len(cycles) - cohort.first_k_cycles
            cycles = cycles[: cohort.first_k_cycles]
            if skips is not None:
                skips = skips[: cohort.first_k_cycles]
        kept.append(CycleHistory(h.user_id, tuple(cycles), None if skips is None else tuple(skips)))
    report.users_kept = len(kept)
    for name in ("removed_by_age", "removed_by_min_cycles", "removed_by_gap"):
        logger.info("ingest: %s=%d", name, getattr(report, name))
    return Dataset(kept), report


def read_ages(path) -> Dict[str, float]:
    """Read a ``user_id,age`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"user_id", "age"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns user_id,age")
        out = {}
        for row in reader:
            try:
                out[row["user_id"]] = float(row["age"])
            except ValueError:
                raise DataError(f"{path}: line {reader.line_num}: bad age {row['age']!r}") from None
        return out


def ingest(
    path,
    cohort: CohortFilter = CohortFilter(),
    ages: Optional[Dict[str, float]] = None,
    shuffle_seed: Optional[int] = None,
) -> Tuple[Dataset, IngestReport]:
    """Read a dataset CSV and apply ``cohort``."""
    return apply_filter(read_csv(path), cohort, ages, shuffle_seed)
