"""Criterion score grids, rounding of raw regression outputs, composite
assembly and the binary inversion label.

Scores follow the visual rating protocol: criteria C1, C2 and C3 live on a
0..2 grid in 0.5 steps, C5 is binary, and the composite is their sum
(range 0..7). An inversion is called incomplete when the composite is >= 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import NonFiniteInput, OffGridInput

CRITERIA = ("C1", "C2", "C3", "C5")
HEMISPHERES = ("L", "R")

HALF_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
BINARY_GRID = (0.0, 1.0)

IHI_THRESHOLD = 4.0


def criterion_grid(which: str) -> tuple[float, ...]:
    if which in ("C1", "C2", "C3"):
        return HALF_GRID
    if which == "C5":
        return BINARY_GRID
    raise ValueError(f"unknown criterion {which!r}")


def round_criterion(raw: float, which: str) -> float:
    """Snap a raw regression output to the criterion's grid.

    Nearest grid point wins; exact midpoints round away from zero. The
    result is clamped to the grid range, so out-of-range raw values map to
    the nearest endpoint.
    """
    if not math.isfinite(raw):
        raise NonFiniteInput(f"raw prediction for {which} is {raw!r}")
    grid = criterion_grid(which)
    step = grid[1] - grid[0]
    # half-up on |raw| gives away-from-zero midpoint behaviour
    snapped = math.copysign(math.floor(abs(raw) / step + 0.5) * step, raw)
    return min(max(snapped, grid[0]), grid[-1])


def _check_on_grid(value: float, which: str) -> None:
    if value not in criterion_grid(which):
        raise OffGridInput(f"{which} value {value!r} is not on its grid")


@dataclass(frozen=True)
class HemisphereScores:
    """Ratings of one hemisphere for the four retained criteria."""

    c1: float
    c2: float
    c3: float
    c5: float

    def validate(self) -> "HemisphereScores":
        for which, value in zip(CRITERIA, self.as_tuple()):
            _check_on_grid(value, which)
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.c1, self.c2, self.c3, self.c5)

    def get(self, which: str) -> float:
        return self.as_tuple()[CRITERIA.index(which)]

    @property
    def composite(self) -> float:
        return composite(self)

    @property
    def ihi(self) -> bool:
        return classify_ihi(self.composite)


@dataclass(frozen=True)
class CriterionScores:
    """Per-hemisphere ratings plus the derived composites."""

    left: HemisphereScores
    right: HemisphereScores

    def validate(self) -> "CriterionScores":
        self.left.validate()
        self.right.validate()
        return self

    def hemisphere(self, which: str) -> HemisphereScores:
        if which == "L":
            return self.left
        if which == "R":
            return self.right
        raise ValueError(f"unknown hemisphere {which!r}")

    def flipped(self) -> "CriterionScores":
        """Scores after a left/right mirror of the underlying image."""
        return CriterionScores(left=self.right, right=self.left)


def composite(scores: HemisphereScores) -> float:
    """Sum of the four criteria; inputs must already be on their grids."""
    scores.validate()
    return scores.c1 + scores.c2 + scores.c3 + scores.c5


def classify_ihi(composite_score: float) -> bool:
    """Inversion is incomplete iff the composite reaches the threshold of 4."""
    return composite_score >= IHI_THRESHOLD


def round_scores(raw: dict[str, float]) -> HemisphereScores:
    """Round a {criterion: raw value} mapping onto the protocol grids."""
    return HemisphereScores(
        c1=round_criterion(raw["C1"], "C1"),
        c2=round_criterion(raw["C2"], "C2"),
        c3=round_criterion(raw["C3"], "C3"),
        c5=round_criterion(raw["C5"], "C5"),
    )


# ---------------------------------------------------------------------------
# predictions CSV -- one schema shared by the CNN and ridge pipelines
# ---------------------------------------------------------------------------

PREDICTION_COLUMNS = [
    "subject_id", "hemisphere", "C1", "C2", "C3", "C5",
    "composite", "ihi_flag", "model_id", "strategy",
]


@dataclass(frozen=True)
class PredictionRow:
    subject_id: str
    hemisphere: str
    scores: HemisphereScores
    model_id: str
    strategy: str

    @property
    def composite(self) -> float:
        return self.scores.composite

    @property
    def ihi_flag(self) -> bool:
        return self.scores.ihi


def write_predictions(rows: list[PredictionRow], path, config_hash: str | None = None) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for r in rows:
            writer.writerow([
                r.subject_id, r.hemisphere,
                format(r.scores.c1, "g"), format(r.scores.c2, "g"),
                format(r.scores.c3, "g"), format(r.scores.c5, "g"),
                format(r.composite, "g"), int(r.ihi_flag),
                r.model_id, r.strategy,
            ])


def read_predictions(path) -> list[PredictionRow]:
    import csv

    from .errors import SchemaMismatch

    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows or rows[0] != PREDICTION_COLUMNS:
        raise SchemaMismatch(f"{path}: predictions header does not match schema")
    out = []
    for row in rows[1:]:
        cells = dict(zip(PREDICTION_COLUMNS, row))
        scores = HemisphereScores(float(cells["C1"]), float(cells["C2"]),
                                  float(cells["C3"]), float(cells["C5"])).validate()
        out.append(PredictionRow(
            subject_id=cells["subject_id"], hemisphere=cells["hemisphere"],
            scores=scores, model_id=cells["model_id"], strategy=cells["strategy"],
        ))
    return out
