"""Agreement statistics and their bootstrap machinery: ANOVA-based
intraclass correlations, (weighted) Cohen's kappa, percentile bootstrap
CIs, paired method-difference t-tests over shared resamples, Bonferroni
correction and report assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import t as t_dist

from .errors import (
    DegenerateMarginal,
    DegenerateResamples,
    DegenerateVariance,
    LengthMismatch,
    OutOfCategory,
    StatsError,
)

ICC_FORMS = ("ICC1", "ICC2", "ICC3")
SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class RatingPairs:
    """Aligned ratings of the same subjects by two raters/methods."""

    a: np.ndarray
    b: np.ndarray
    domain: str = "continuous"  # "grid" or "continuous"

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if a.size != b.size:
            raise LengthMismatch(f"ratings differ in length: {a.size} vs {b.size}")
        if a.size < 2:
            raise LengthMismatch("need at least 2 paired ratings")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise DegenerateVariance("ratings contain non-finite values")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def __len__(self):
        return self.a.size

    def take(self, idx) -> "RatingPairs":
        return RatingPairs(self.a[idx], self.b[idx], self.domain)


def icc(pairs: RatingPairs, form: str = "ICC2") -> float:
    """Single-measure intraclass correlation from the two-way subjects x
    raters ANOVA. ICC1 = one-way random, ICC2 = two-way random with absolute
    agreement (the headline form), ICC3 = two-way mixed consistency."""
    if form not in ICC_FORMS:
        raise ValueError(f"form must be one of {ICC_FORMS}")
    m = np.stack([pairs.a, pairs.b], axis=1)
    n, k = m.shape
    if n < 3:
        raise DegenerateVariance("ICC needs at least 3 subjects")
    grand = m.mean()
    row_means = m.mean(axis=1)
    col_means = m.mean(axis=0)
    ss_total = float(((m - grand) ** 2).sum())
    ss_rows = k * float(((row_means - grand) ** 2).sum())
    ss_cols = n * float(((col_means - grand) ** 2).sum())
    ss_err = ss_total - ss_rows - ss_cols
    if ss_rows <= 0.0:
        raise DegenerateVariance("zero between-subject variance")
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = max(ss_err, 0.0) / ((n - 1) * (k - 1))
    msw = (ss_total - ss_rows) / (n * (k - 1))
    if form == "ICC1":
        return (msr - msw) / (msr + (k - 1) * msw)
    if form == "ICC3":
        return (msr - mse) / (msr + (k - 1) * mse)
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def cohen_kappa(pairs: RatingPairs, weighting: str = "none",
                categories=(0.0, 1.0)) -> float:
    """kappa = 1 - sum(w*O) / sum(w*E) over confusion proportions, with
    disagreement weights w: 0/1 off the diagonal for the unweighted form,
    ((i-j)/(k-1))^2 for the quadratic form."""
    if weighting not in ("none", "quadratic"):
        raise ValueError(f"unknown weighting {weighting!r}")
    categories = [float(c) for c in categories]
    lookup = {c: i for i, c in enumerate(categories)}
    k = len(categories)
    try:
        ia = np.array([lookup[float(v)] for v in pairs.a])
        ib = np.array([lookup[float(v)] for v in pairs.b])
    except KeyError as exc:
        raise OutOfCategory(f"rating {exc.args[0]!r} not in categories") from None
    observed = np.zeros((k, k), dtype=np.float64)
    np.add.at(observed, (ia, ib), 1.0)
    observed /= len(pairs)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    grid = np.arange(k, dtype=np.float64)
    if weighting == "quadratic":
        w = ((grid[:, None] - grid[None, :]) / (k - 1)) ** 2
    else:
        w = 1.0 - np.eye(k)
    denom = float((w * expected).sum())
    numer = float((w * observed).sum())
    if denom == 0.0:
        if numer == 0.0:
            return 1.0
        raise DegenerateMarginal("all expected mass on zero-weight cells")
    return 1.0 - numer / denom


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    point: float
    mean: float
    se: float
    ci_low: float
    ci_high: float
    b: int
    seed: int


def _resample(n: int, seed, b: int, retry: int) -> np.ndarray:
    return np.random.default_rng([*_as_seed(seed), b, retry]).integers(0, n, size=n)


def _as_seed(seed) -> list[int]:
    return list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]


def _bootstrap_values(metrics, n: int, b: int, seed) -> list[list[float]]:
    """Evaluate all metric callables on B shared resamples; a resample is
    redrawn (max 10 retries) if any metric degenerates on it."""
    values = [[] for _ in metrics]
    for i in range(b):
        for retry in range(11):
            idx = _resample(n, seed, i, retry)
            try:
                row = [m(idx) for m in metrics]
            except StatsError:
                continue
            for acc, v in zip(values, row):
                acc.append(v)
            break
        else:
            raise DegenerateResamples(
                f"resample {i} still degenerate after 10 redraws")
    return values


def bootstrap_metric(metric, n: int, b: int = 100, seed=0) -> BootstrapResult:
    """Percentile bootstrap of a metric evaluated on index subsets of
    0..n-1; deterministic for a given seed."""
    point = float(metric(np.arange(n)))
    values = np.array(_bootstrap_values([metric], n, b, seed)[0])
    se = float(values.std(ddof=1)) if b > 1 else 0.0
    return BootstrapResult(
        point=point,
        mean=float(values.mean()),
        se=se,
        ci_low=float(np.percentile(values, 2.5)),
        ci_high=float(np.percentile(values, 97.5)),
        b=b,
        seed=seed if isinstance(seed, int) else 0,
    )


@dataclass(frozen=True)
class PairedDifference:
    mean_diff: float
    se: float
    t: float
    df: int
    p: float
    flag: str | None = None


def paired_difference_test(metric_a, metric_b, n: int, b: int = 100,
                           seed=0) -> PairedDifference:
    """Bootstrap the difference of two metrics over shared resample index
    sets, then a two-sided one-sample t-test on the mean difference
    (df = B-1)."""
    vals_a, vals_b = _bootstrap_values([metric_a, metric_b], n, b, seed)
    d = np.asarray(vals_a) - np.asarray(vals_b)
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1)) if b > 1 else 0.0
    if mean_d == 0.0 and sd == 0.0:
        return PairedDifference(0.0, 0.0, 0.0, b - 1, 1.0, flag="identical")
    if sd <= 1e-12 * max(1.0, abs(mean_d)):  # constant difference up to roundoff
        t_val = float("inf") if mean_d > 0 else float("-inf")
        return PairedDifference(mean_d, 0.0, t_val, b - 1, 0.0, flag="zero_variance")
    se = sd / np.sqrt(b)
    t_val = mean_d / se
    p = 2.0 * float(t_dist.sf(abs(t_val), b - 1))
    return PairedDifference(mean_d, se, t_val, b - 1, min(p, 1.0))


def bonferroni(p_values) -> list[float]:
    m = len(p_values)
    return [min(1.0, p * m) for p in p_values]


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

TARGETS = ("C1", "C2", "C3", "C5", "composite")


@dataclass
class MetricRow:
    target: str
    hemisphere: str
    model_id: str
    strategy: str
    metric: str
    result: BootstrapResult


@dataclass
class Comparison:
    target: str
    hemisphere: str
    metric: str
    model_a: str
    model_b: str
    mean_diff: float
    t: float
    df: int
    p_raw: float
    p_corrected: float
    significant: bool
    flag: str | None = None


@dataclass
class EvalReport:
    rows: list[MetricRow] = field(default_factory=list)
    comparisons: list[Comparison] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_long_csv(self) -> str:
        lines = ["target,hemisphere,model_id,strategy,metric,point,boot_mean,"
                 "se,ci_low,ci_high,b"]
        for r in self.rows:
            res = r.result
            lines.append(
                f"{r.target},{r.hemisphere},{r.model_id},{r.strategy},{r.metric},"
                f"{res.point:.6f},{res.mean:.6f},{res.se:.6f},"
                f"{res.ci_low:.6f},{res.ci_high:.6f},{res.b}")
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "meta": self.meta,
            "rows": [
                {"target": r.target, "hemisphere": r.hemisphere,
                 "model_id": r.model_id, "strategy": r.strategy,
                 "metric": r.metric, "point": r.result.point,
                 "boot_mean": r.result.mean, "se": r.result.se,
                 "ci95": [r.result.ci_low, r.result.ci_high], "b": r.result.b}
                for r in self.rows
            ],
            "comparisons": [
                {"target": c.target, "hemisphere": c.hemisphere, "metric": c.metric,
                 "model_a": c.model_a, "model_b": c.model_b,
                 "mean_diff": c.mean_diff, "t": c.t, "df": c.df,
                 "p_raw": c.p_raw, "p_corrected": c.p_corrected,
                 "significant": c.significant, "flag": c.flag}
                for c in self.comparisons
            ],
        }

    def save(self, out_dir: str | Path, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(self.to_long_csv())
        (out_dir / f"{stem}.json").write_text(
            json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n")
        (out_dir / f"{stem}.svg").write_text(report_svg(self))


def _seed_for(master: int, target: str, hemisphere: str) -> list[int]:
    return [master, TARGETS.index(target), ("L", "R").index(hemisphere)]


def headline_metric(target: str) -> str:
    if target == "composite":
        return "ICC2"
    return "kappa_quadratic" if target in ("C1", "C2", "C3") else "kappa"


def _metric_fn(target: str, truth: np.ndarray, pred: np.ndarray, metric: str):
    from .scoring import criterion_grid

    if metric.startswith("ICC"):
        return lambda idx: icc(RatingPairs(truth[idx], pred[idx]), form=metric)
    weighting = "quadratic" if metric == "kappa_quadratic" else "none"
    cats = criterion_grid(target)
    return lambda idx: cohen_kappa(RatingPairs(truth[idx], pred[idx], "grid"),
                                   weighting=weighting, categories=cats)


def evaluate_predictions(truth_by_model: dict, b: int = 100, seed: int = 0,
                         strategies: dict | None = None) -> EvalReport:
    """Assemble the full agreement report.

    `truth_by_model` maps model_id -> (hemisphere, target) -> (truth, pred)
    aligned float vectors over the same subjects (aligning is the caller's
    job; the CLI builds it from prediction CSVs).
    """
    strategies = strategies or {}
    report = EvalReport(meta={"b": b, "seed": seed})
    model_ids = sorted(truth_by_model)

    for target in TARGETS:
        for hemisphere in ("L", "R"):
            present = [m for m in model_ids
                       if (hemisphere, target) in truth_by_model[m]]
            fam_seed = _seed_for(seed, target, hemisphere)
            metric_fns = {}
            for model_id in present:
                truth, pred = truth_by_model[model_id][(hemisphere, target)]
                metrics = ICC_FORMS if target == "composite" else (headline_metric(target),)
                for metric in metrics:
                    fn = _metric_fn(target, truth, pred, metric)
                    if metric == headline_metric(target):
                        metric_fns[model_id] = fn
                    report.rows.append(MetricRow(
                        target=target, hemisphere=hemisphere, model_id=model_id,
                        strategy=strategies.get(model_id, ""), metric=metric,
                        result=bootstrap_metric(fn, len(truth), b=b, seed=fam_seed),
                    ))
            # pairwise comparisons within this (target, hemisphere) family
            pairs = [(a, c) for i, a in enumerate(present) for c in present[i + 1:]]
            raw = []
            tests = []
            for model_a, model_b in pairs:
                n = len(truth_by_model[model_a][(hemisphere, target)][0])
                test = paired_difference_test(
                    metric_fns[model_a], metric_fns[model_b], n, b=b, seed=fam_seed)
                tests.append(test)
                raw.append(test.p)
            corrected = bonferroni(raw)
            for (model_a, model_b), test, p_c in zip(pairs, tests, corrected):
                report.comparisons.append(Comparison(
                    target=target, hemisphere=hemisphere,
                    metric=headline_metric(target),
                    model_a=model_a, model_b=model_b,
                    mean_diff=test.mean_diff, t=test.t, df=test.df,
                    p_raw=test.p, p_corrected=p_c,
                    significant=p_c < SIGNIFICANCE_LEVEL, flag=test.flag,
                ))
    return report


# ---------------------------------------------------------------------------
# SVG bar chart with CI whiskers (hand-rolled so output is byte-stable)
# ---------------------------------------------------------------------------

_PALETTE = ("#4878a8", "#e49444", "#5fa053", "#b65d8c", "#85796d")


def report_svg(report: EvalReport) -> str:
    headline_rows = [r for r in report.rows
                     if r.metric == headline_metric(r.target)]
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for r in headline_rows:
        groups.setdefault((r.target, r.hemisphere), []).append(r)
    if not groups:
        return "<svg xmlns='http://www.w3.org/2000/svg' width='200' height='40'>" \
               "<text x='10' y='25'>empty report</text></svg>\n"

    bar_w, gap, panel_pad, panel_h = 34, 10, 56, 180
    panels = sorted(groups)
    max_bars = max(len(v) for v in groups.values())
    panel_w = panel_pad + max_bars * (bar_w + gap) + 20
    width = 2 * panel_w + 20
    rows_count = (len(panels) + 1) // 2
    height = rows_count * (panel_h + 60) + 20

    def y_of(v: float) -> float:
        # metric axis spans [-0.2, 1.0]
        clamped = min(1.0, max(-0.2, v))
        return 30 + (1.0 - (clamped + 0.2) / 1.2) * (panel_h - 40)

    parts = [f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' "
             f"height='{height}' font-family='sans-serif' font-size='11'>"]
    for pi, key in enumerate(panels):
        target, hemisphere = key
        ox = 10 + (pi % 2) * panel_w
        oy = 10 + (pi // 2) * (panel_h + 60)
        parts.append(f"<g transform='translate({ox},{oy})'>")
        parts.append(f"<text x='{panel_pad}' y='18' font-weight='bold'>"
                     f"{target} ({hemisphere})</text>")
        axis_y0, axis_y1 = y_of(1.0), y_of(-0.2)
        parts.append(f"<line x1='{panel_pad - 6}' y1='{axis_y0:.1f}' "
                     f"x2='{panel_pad - 6}' y2='{axis_y1:.1f}' stroke='#333'/>")
        for tick in (0.0, 0.5, 1.0):
            ty = y_of(tick)
            parts.append(f"<line x1='{panel_pad - 9}' y1='{ty:.1f}' "
                         f"x2='{panel_pad - 6}' y2='{ty:.1f}' stroke='#333'/>")
            parts.append(f"<text x='{panel_pad - 12}' y='{ty + 4:.1f}' "
                         f"text-anchor='end'>{tick:g}</text>")
        zero_y = y_of(0.0)
        for bi, row in enumerate(sorted(groups[key], key=lambda r: r.model_id)):
            x = panel_pad + bi * (bar_w + gap)
            color = _PALETTE[bi % len(_PALETTE)]
            top = y_of(max(row.result.point, 0.0))
            bot = y_of(min(row.result.point, 0.0))
            parts.append(f"<rect x='{x}' y='{top:.1f}' width='{bar_w}' "
                         f"height='{max(bot - top, 0.5):.1f}' fill='{color}'/>")
            cx = x + bar_w / 2
            lo, hi = y_of(row.result.ci_low), y_of(row.result.ci_high)
            parts.append(f"<line x1='{cx:.1f}' y1='{hi:.1f}' x2='{cx:.1f}' "
                         f"y2='{lo:.1f}' stroke='#222'/>")
            for wy in (lo, hi):
                parts.append(f"<line x1='{cx - 5:.1f}' y1='{wy:.1f}' "
                             f"x2='{cx + 5:.1f}' y2='{wy:.1f}' stroke='#222'/>")
            parts.append(f"<text x='{cx:.1f}' y='{zero_y + 14:.1f}' "
                         f"text-anchor='middle'>{row.model_id}</text>")
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
