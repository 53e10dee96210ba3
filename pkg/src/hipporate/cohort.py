"""Subject manifests, the stratified split search, training-strategy pools
and the class-balancing sampler.

Split construction mirrors the rating protocol's bookkeeping: 25% of each
cohort is isolated as a test set before any model fitting, the remainder is
cut 80/20 into train/validation, and both cuts are chosen among many random
candidates as the one whose worst per-variable Kolmogorov-Smirnov distance
between the two sides is smallest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptySample,
    MissingCohort,
    SchemaMismatch,
    SplitIntegrityError,
    StratificationError,
    TooFewRecords,
)
from .scoring import CriterionScores, HemisphereScores

COHORTS = ("IMAGEN", "QTIM", "QTAB", "UKB", "PHANTOM")

MANIFEST_COLUMNS = [
    "subject_id", "cohort", "age", "sex", "site", "rater", "handedness",
    "height", "weight", "image_path",
    "C1_L", "C2_L", "C3_L", "C5_L", "C1_R", "C2_R", "C3_R", "C5_R",
]

SCORE_COLUMNS = MANIFEST_COLUMNS[10:]

# the protocol's stratification variables: all criteria plus demographics
DEFAULT_SPLIT_VARS = [
    "C1_L", "C2_L", "C3_L", "C5_L", "C1_R", "C2_R", "C3_R", "C5_R",
    "age", "weight", "height", "sex", "handedness", "site",
]

STRATEGIES = {
    "IMAGEN_only": ("IMAGEN",),
    "IMAGEN_QTIM_QTAB": ("IMAGEN", "QTIM", "QTAB"),
    "ALL": None,  # every cohort present in the manifest
}


@dataclass
class SubjectRecord:
    subject_id: str
    cohort: str
    image_path: str = ""
    scores: CriterionScores | None = None
    age: float | None = None
    sex: str | None = None
    site: str | None = None
    rater: str | None = None
    handedness: str | None = None
    height: float | None = None
    weight: float | None = None

    def variable(self, name: str) -> float | None:
        """Numeric value of a stratification variable, or None if missing.
        Categorical variables are resolved by the caller's encoder."""
        if name in ("age", "height", "weight"):
            return getattr(self, name)
        if name in SCORE_COLUMNS:
            if self.scores is None:
                return None
            crit, hemi = name.split("_")
            return self.scores.hemisphere(hemi).get(crit)
        raise KeyError(name)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)  # shortest exact round-trip
    return str(value)


def write_manifest(records: list[SubjectRecord], path: str | Path,
                   config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            score_cells = []
            for col in SCORE_COLUMNS:
                score_cells.append("" if r.scores is None else _fmt(r.variable(col)))
            writer.writerow([
                r.subject_id, r.cohort, _fmt(r.age), _fmt(r.sex), _fmt(r.site),
                _fmt(r.rater), _fmt(r.handedness), _fmt(r.height), _fmt(r.weight),
                r.image_path, *score_cells,
            ])


def read_manifest(path: str | Path) -> list[SubjectRecord]:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows or rows[0] != MANIFEST_COLUMNS:
        raise SchemaMismatch(f"{path}: manifest header does not match expected columns")
    records = []
    seen = set()
    for row in rows[1:]:
        cells = dict(zip(MANIFEST_COLUMNS, row))
        sid = cells["subject_id"]
        if sid in seen:
            raise SchemaMismatch(f"{path}: duplicate subject_id {sid!r}")
        seen.add(sid)
        scores = None
        if all(cells[c] != "" for c in SCORE_COLUMNS):
            scores = CriterionScores(
                left=HemisphereScores(*(float(cells[f"{c}_L"]) for c in ("C1", "C2", "C3", "C5"))),
                right=HemisphereScores(*(float(cells[f"{c}_R"]) for c in ("C1", "C2", "C3", "C5"))),
            ).validate()
        records.append(SubjectRecord(
            subject_id=sid,
            cohort=cells["cohort"],
            image_path=cells["image_path"],
            scores=scores,
            age=float(cells["age"]) if cells["age"] else None,
            sex=cells["sex"] or None,
            site=cells["site"] or None,
            rater=cells["rater"] or None,
            handedness=cells["handedness"] or None,
            height=float(cells["height"]) if cells["height"] else None,
            weight=float(cells["weight"]) if cells["weight"] else None,
        ))
    return records


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov distance and the split search
# ---------------------------------------------------------------------------

def ks_statistic(a, b) -> float:
    """sup_x |F_a(x) - F_b(x)| over the two empirical CDFs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptySample("ks_statistic needs non-empty samples")
    a_sorted = np.sort(a)
    b_sorted = np.sort(b)
    grid = np.concatenate([a_sorted, b_sorted])
    cdf_a = np.searchsorted(a_sorted, grid, side="right") / a.size
    cdf_b = np.searchsorted(b_sorted, grid, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


_CATEGORICAL = ("sex", "site", "handedness")


def _encode_variable(records: list[SubjectRecord], name: str) -> np.ndarray:
    """Variable values as floats with NaN for missing; categoricals are
    integer-encoded over the sorted set of observed levels."""
    if name in _CATEGORICAL:
        raw = [getattr(r, name) for r in records]
        levels = sorted({v for v in raw if v is not None})
        lookup = {v: float(i) for i, v in enumerate(levels)}
        return np.array([lookup.get(v, np.nan) for v in raw], dtype=np.float64)
    values = [r.variable(name) for r in records]
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


@dataclass
class SplitAssignment:
    assignments: dict[str, str]          # subject_id -> train|val|test
    seed: int
    candidate_count: int
    vars: list[str]
    score: float                         # chosen candidate's minimax KS (test stage)
    candidate_scores: list[float] = field(default_factory=list)
    val_score: float = float("nan")
    strategy: str | None = None

    def partition(self, subject_id: str) -> str:
        return self.assignments[subject_id]

    def subjects(self, partition: str) -> list[str]:
        return [s for s, p in self.assignments.items() if p == partition]


def _candidate_test_set(by_cohort, test_frac, seed, cand):
    rng = np.random.default_rng([seed, 0, cand])
    test_idx = []
    for cohort in sorted(by_cohort):
        idx = by_cohort[cohort]
        n_test = int(round(test_frac * len(idx)))
        perm = rng.permutation(len(idx))
        test_idx.extend(idx[i] for i in perm[:n_test])
    return set(test_idx)


def _score_sides(values_by_var, side_a_mask, side_b_mask) -> float:
    worst = 0.0
    for values in values_by_var:
        a = values[side_a_mask & ~np.isnan(values)]
        b = values[side_b_mask & ~np.isnan(values)]
        if a.size == 0 or b.size == 0:
            return float("inf")
        worst = max(worst, ks_statistic(a, b))
    return worst


def stratified_split(records: list[SubjectRecord], test_frac: float = 0.25,
                     candidates: int = 200, vars: list[str] | None = None,
                     seed: int = 0) -> SplitAssignment:
    """Distribution-matched split: among `candidates` random splits, keep the
    one minimizing the worst per-variable KS distance between the two sides.
    The test cut is chosen first, then train/validation is cut 80/20 from the
    remainder by the same rule. Deterministic given the seed."""
    if len(records) < 8:
        raise TooFewRecords(f"need at least 8 records, got {len(records)}")
    if vars is None:
        vars = [v for v in DEFAULT_SPLIT_VARS
                if not all(_is_missing(r, v) for r in records)]
    n = len(records)
    values_by_var = []
    for v in vars:
        vals = _encode_variable(records, v)
        present = np.count_nonzero(~np.isnan(vals))
        if present < 0.9 * n:
            raise StratificationError(
                f"variable {v!r} present for only {present}/{n} records (<90%)")
        values_by_var.append(vals)

    by_cohort: dict[str, np.ndarray] = {}
    for i, r in enumerate(records):
        by_cohort.setdefault(r.cohort, []).append(i)
    by_cohort = {c: np.array(ix) for c, ix in by_cohort.items()}

    # stage 1: isolate the test set
    best_test, best_score, scores = None, float("inf"), []
    for cand in range(candidates):
        test_set = _candidate_test_set(by_cohort, test_frac, seed, cand)
        mask_test = np.zeros(n, dtype=bool)
        mask_test[list(test_set)] = True
        score = _score_sides(values_by_var, ~mask_test, mask_test)
        scores.append(score)
        if score < best_score:
            best_score, best_test = score, test_set
    if best_test is None:
        raise TooFewRecords("every split candidate left a side empty; "
                            "cohorts are too small for the requested fractions")

    # stage 2: cut the remainder into train/validation, same search
    rest_by_cohort = {c: np.array([i for i in ix if i not in best_test])
                      for c, ix in by_cohort.items()}
    best_val, best_val_score = None, float("inf")
    for cand in range(candidates):
        rng = np.random.default_rng([seed, 1, cand])
        val_idx = set()
        for cohort in sorted(rest_by_cohort):
            idx = rest_by_cohort[cohort]
            n_val = int(round(0.2 * len(idx)))
            perm = rng.permutation(len(idx))
            val_idx.update(idx[i] for i in perm[:n_val])
        mask_val = np.zeros(n, dtype=bool)
        mask_val[list(val_idx)] = True
        mask_train = ~mask_val
        mask_train[list(best_test)] = False
        score = _score_sides(values_by_var, mask_train, mask_val)
        if score < best_val_score:
            best_val_score, best_val = score, val_idx
    if best_val is None:
        raise TooFewRecords("every train/val candidate left a side empty")

    assignments = {}
    for i, r in enumerate(records):
        if i in best_test:
            assignments[r.subject_id] = "test"
        elif i in best_val:
            assignments[r.subject_id] = "val"
        else:
            assignments[r.subject_id] = "train"
    return SplitAssignment(
        assignments=assignments, seed=seed, candidate_count=candidates,
        vars=list(vars), score=best_score, candidate_scores=scores,
        val_score=best_val_score,
    )


def _is_missing(record: SubjectRecord, name: str) -> bool:
    if name in _CATEGORICAL:
        return getattr(record, name) is None
    return record.variable(name) is None


# ---------------------------------------------------------------------------
# split persistence
# ---------------------------------------------------------------------------

def _split_csv_bytes(assignment: SplitAssignment) -> bytes:
    lines = ["subject_id,partition"]
    lines += [f"{sid},{part}" for sid, part in assignment.assignments.items()]
    return ("\n".join(lines) + "\n").encode()


def save_split(assignment: SplitAssignment, path: str | Path) -> None:
    """CSV of assignments plus a JSON sidecar with the search provenance and
    a content hash used to re-validate on load."""
    path = Path(path)
    payload = _split_csv_bytes(assignment)
    path.write_bytes(payload)
    sidecar = {
        "seed": assignment.seed,
        "candidates": assignment.candidate_count,
        "vars": assignment.vars,
        "score": assignment.score,
        "val_score": assignment.val_score,
        "candidate_scores": assignment.candidate_scores,
        "content_hash": hashlib.sha256(payload).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_split(path: str | Path) -> SplitAssignment:
    path = Path(path)
    payload = path.read_bytes()
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    digest = hashlib.sha256(payload).hexdigest()
    if digest != sidecar["content_hash"]:
        raise SplitIntegrityError(f"{path}: content hash mismatch")
    assignments = {}
    for line in payload.decode().splitlines()[1:]:
        sid, part = line.split(",")
        if part not in ("train", "val", "test"):
            raise SchemaMismatch(f"{path}: bad partition {part!r}")
        assignments[sid] = part
    return SplitAssignment(
        assignments=assignments, seed=sidecar["seed"],
        candidate_count=sidecar["candidates"], vars=sidecar["vars"],
        score=sidecar["score"], candidate_scores=sidecar.get("candidate_scores", []),
        val_score=sidecar.get("val_score", float("nan")),
    )


# ---------------------------------------------------------------------------
# training strategies and sampling
# ---------------------------------------------------------------------------

def strategy_pool(strategy: str, records: list[SubjectRecord],
                  assignment: SplitAssignment) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
    """Union the train/val partitions of the cohorts the strategy names.
    Test partitions are never returned."""
    if strategy not in STRATEGIES:
        raise MissingCohort(f"unknown strategy {strategy!r}")
    wanted = STRATEGIES[strategy]
    present = {r.cohort for r in records}
    if wanted is None:
        wanted = tuple(sorted(present))
    missing = [c for c in wanted if c not in present]
    if missing:
        raise MissingCohort(f"strategy {strategy} needs cohorts {missing}")
    train, val = [], []
    for r in records:
        if r.cohort not in wanted:
            continue
        part = assignment.partition(r.subject_id)
        if part == "train":
            train.append(r)
        elif part == "val":
            val.append(r)
    return train, val


def oversample_indices(labels, seed, classes=None) -> np.ndarray:
    """Index multiset of the same size as `labels` in which every class
    contributes (near-)equally, sampled with replacement; deterministic for a
    given seed. Declared classes with no members are dropped with a warning."""
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise EmptySample("no labels to sample from")
    present = [c for c in np.unique(labels)]
    if classes is not None:
        declared = list(classes)
        empty = [c for c in declared if c not in present]
        if empty:
            warnings.warn(f"classes with zero members dropped: {empty}")
        order = [c for c in declared if c in present]
    else:
        order = present
    rng = np.random.default_rng(seed)
    k = len(order)
    quota = [n // k + (1 if i < n % k else 0) for i in range(k)]
    picks = []
    for cls, q in zip(order, quota):
        members = np.flatnonzero(labels == cls)
        picks.append(members[rng.integers(0, len(members), size=q)])
    out = np.concatenate(picks)
    return out[rng.permutation(len(out))]
