import numpy as np
import pytest

from hipporate.cohort import (
    MANIFEST_COLUMNS,
    SplitAssignment,
    SubjectRecord,
    ks_statistic,
    load_split,
    oversample_indices,
    read_manifest,
    save_split,
    strategy_pool,
    stratified_split,
    write_manifest,
)
from hipporate.errors import (
    EmptySample,
    MissingCohort,
    SchemaMismatch,
    SplitIntegrityError,
    StratificationError,
    TooFewRecords,
)
from hipporate.scoring import CriterionScores, HemisphereScores


def make_records(n, cohort="PHANTOM", seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        grid = [0.0, 0.5, 1.0, 1.5, 2.0]
        hemi = lambda: HemisphereScores(  # noqa: E731
            float(rng.choice(grid)), float(rng.choice(grid)),
            float(rng.choice(grid)), float(rng.choice([0.0, 1.0])))
        records.append(SubjectRecord(
            subject_id=f"{cohort}_{i:04d}", cohort=cohort,
            image_path=f"{cohort}_{i:04d}.nii.gz",
            scores=CriterionScores(hemi(), hemi()),
            age=float(rng.uniform(10, 70)), sex=str(rng.choice(["F", "M"])),
            site=str(rng.choice(["s1", "s2", "s3"])), rater="r1",
            handedness=str(rng.choice(["L", "R"])),
            height=float(rng.normal(170, 10)), weight=float(rng.normal(70, 12)),
        ))
    return records


# -- KS statistic -----------------------------------------------------------------

def test_ks_identical_samples():
    assert ks_statistic([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0


def test_ks_disjoint_supports():
    assert ks_statistic([0.0, 0.0], [1.0, 1.0]) == 1.0


def test_ks_enumerated_step_functions():
    # F_a jumps at 1,2,3,4; F_b at 3,4,5,6; the largest gap is 0.5 at x in [2,3)
    assert ks_statistic([1, 2, 3, 4], [3, 4, 5, 6]) == 0.5


def test_ks_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=rng.integers(2, 30))
        b = rng.normal(loc=0.3, size=rng.integers(2, 30))
        grid = np.concatenate([a, b])
        brute = max(
            abs((a <= x).mean() - (b <= x).mean()) for x in grid)
        assert ks_statistic(a, b) == pytest.approx(brute, abs=1e-12)


def test_ks_empty_sample():
    with pytest.raises(EmptySample):
        ks_statistic([], [1.0])


# -- manifest round trip --------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    records = make_records(12, seed=1)
    records[3].scores = None           # unlabeled subject
    records[4].handedness = None       # missing optional covariate
    path = tmp_path / "manifest.csv"
    write_manifest(records, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(MANIFEST_COLUMNS)
    back = read_manifest(path)
    assert [r.subject_id for r in back] == [r.subject_id for r in records]
    assert back[3].scores is None
    assert back[4].handedness is None
    assert back[0].scores == records[0].scores
    assert back[5].age == pytest.approx(records[5].age, abs=1e-9)


def test_manifest_rejects_duplicates(tmp_path):
    records = make_records(3)
    records[2].subject_id = records[0].subject_id
    path = tmp_path / "manifest.csv"
    write_manifest(records, path)
    with pytest.raises(SchemaMismatch, match="duplicate"):
        read_manifest(path)


def test_manifest_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("foo,bar\n1,2\n")
    with pytest.raises(SchemaMismatch):
        read_manifest(path)


# -- stratified split ------------------------------------------------------------------

def test_split_chosen_is_argmin():
    records = make_records(80, seed=2)
    assignment = stratified_split(records, candidates=40, seed=5)
    assert assignment.score == min(assignment.candidate_scores)
    assert assignment.score <= float(np.median(assignment.candidate_scores))
    assert len(assignment.candidate_scores) == 40


def test_split_fractions_within_one_subject():
    for n in (37, 80, 203):
        records = make_records(n, seed=3)
        assignment = stratified_split(records, candidates=10, seed=1)
        test_n = len(assignment.subjects("test"))
        val_n = len(assignment.subjects("val"))
        train_n = len(assignment.subjects("train"))
        assert train_n + val_n + test_n == n
        assert abs(test_n - 0.25 * n) <= 1
        rest = n - test_n
        assert abs(val_n - 0.2 * rest) <= 1


def test_split_partitions_exhaustive_disjoint():
    records = make_records(50, seed=4)
    assignment = stratified_split(records, candidates=5, seed=2)
    assert set(assignment.assignments) == {r.subject_id for r in records}
    assert set(assignment.assignments.values()) <= {"train", "val", "test"}


def test_split_deterministic():
    records = make_records(60, seed=5)
    a = stratified_split(records, candidates=15, seed=9)
    b = stratified_split(records, candidates=15, seed=9)
    assert a.assignments == b.assignments
    assert a.score == b.score


def test_split_single_candidate_is_plain_random_split():
    records = make_records(40, seed=6)
    assignment = stratified_split(records, candidates=1, seed=3)
    assert len(assignment.candidate_scores) == 1
    assert assignment.score == assignment.candidate_scores[0]


def test_split_per_cohort_quotas():
    records = make_records(40, "IMAGEN", seed=7) + make_records(20, "QTIM", seed=8)
    assignment = stratified_split(records, candidates=5, seed=0)
    for cohort, n in (("IMAGEN", 40), ("QTIM", 20)):
        test_n = sum(1 for r in records
                     if r.cohort == cohort
                     and assignment.partition(r.subject_id) == "test")
        assert abs(test_n - 0.25 * n) <= 1


def test_split_rejects_missing_variable():
    records = make_records(40, seed=9)
    for r in records[:30]:
        r.age = None
    with pytest.raises(StratificationError, match="age"):
        stratified_split(records, candidates=3, vars=["age"], seed=0)


def test_split_too_few_records():
    with pytest.raises(TooFewRecords):
        stratified_split(make_records(5), candidates=3)


def test_split_save_load_hash(tmp_path):
    records = make_records(30, seed=10)
    assignment = stratified_split(records, candidates=3, seed=1)
    path = tmp_path / "split.csv"
    save_split(assignment, path)
    back = load_split(path)
    assert back.assignments == assignment.assignments
    assert back.score == assignment.score
    # tampering with the CSV must be caught by the sidecar hash
    payload = path.read_text().replace("test", "val", 1)
    path.write_text(payload)
    with pytest.raises(SplitIntegrityError):
        load_split(path)


# -- strategies -------------------------------------------------------------------------

def table2_fixture():
    """Per-cohort partition counts matching the published split table."""
    counts = {
        "IMAGEN": (1205, 301, 502),
        "QTIM": (596, 149, 248),
        "QTAB": (240, 60, 100),
        "UKB": (554, 185, 246),
    }
    records, assignments = [], {}
    for cohort, (n_train, n_val, n_test) in counts.items():
        for i in range(n_train + n_val + n_test):
            sid = f"{cohort}_{i:05d}"
            records.append(SubjectRecord(subject_id=sid, cohort=cohort))
            part = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            assignments[sid] = part
    return records, SplitAssignment(assignments=assignments, seed=0,
                                    candidate_count=0, vars=[], score=0.0)


def test_strategy_pool_table2_counts():
    records, assignment = table2_fixture()
    train, val = strategy_pool("IMAGEN_only", records, assignment)
    assert (len(train), len(val)) == (1205, 301)
    train, val = strategy_pool("IMAGEN_QTIM_QTAB", records, assignment)
    assert len(train) == 1205 + 596 + 240
    train, val = strategy_pool("ALL", records, assignment)
    assert len(train) == 1205 + 596 + 240 + 554 == 2595
    assert len(val) == 301 + 149 + 60 + 185


def test_strategy_pools_nested():
    records, assignment = table2_fixture()
    pools = {}
    for strategy in ("IMAGEN_only", "IMAGEN_QTIM_QTAB", "ALL"):
        train, val = strategy_pool(strategy, records, assignment)
        pools[strategy] = {r.subject_id for r in train + val}
    assert pools["IMAGEN_only"] <= pools["IMAGEN_QTIM_QTAB"] <= pools["ALL"]


def test_strategy_pool_never_returns_test():
    records, assignment = table2_fixture()
    test_ids = {sid for sid, p in assignment.assignments.items() if p == "test"}
    for strategy in ("IMAGEN_only", "IMAGEN_QTIM_QTAB", "ALL"):
        train, val = strategy_pool(strategy, records, assignment)
        assert not ({r.subject_id for r in train + val} & test_ids)


def test_strategy_pool_missing_cohort():
    records, assignment = table2_fixture()
    only_imagen = [r for r in records if r.cohort == "IMAGEN"]
    with pytest.raises(MissingCohort):
        strategy_pool("IMAGEN_QTIM_QTAB", only_imagen, assignment)
    with pytest.raises(MissingCohort):
        strategy_pool("bogus", records, assignment)


# -- oversampling ----------------------------------------------------------------------

def test_oversample_balanced_input_keeps_size():
    labels = [0.0] * 50 + [1.0] * 50
    idx = oversample_indices(labels, seed=0)
    assert len(idx) == 100
    picked = np.asarray(labels)[idx]
    assert (picked == 0.0).sum() == 50


def test_oversample_minority_boosted():
    labels = [0.0] * 90 + [2.0] * 10
    idx = oversample_indices(labels, seed=1)
    assert len(idx) == 100
    picked = np.asarray(labels)[idx]
    assert (picked == 2.0).sum() == 50  # equal class quotas
    counts = np.bincount(np.asarray(idx)[picked == 2.0] - 90, minlength=10)
    assert counts.mean() == 5.0  # each minority index drawn ~5x on average


def test_oversample_deterministic():
    labels = [0.0] * 30 + [1.0] * 10
    assert np.array_equal(oversample_indices(labels, seed=4),
                          oversample_indices(labels, seed=4))
    assert not np.array_equal(oversample_indices(labels, seed=4),
                              oversample_indices(labels, seed=5))


def test_oversample_empty_declared_class_warns():
    labels = [0.0] * 10
    with pytest.warns(UserWarning, match="zero members"):
        idx = oversample_indices(labels, seed=0, classes=[0.0, 1.0])
    assert len(idx) == 10


def test_oversample_class_counts_uniform_chi_square():
    from scipy.stats import chisquare

    labels = [0.0] * 60 + [0.5] * 25 + [1.0] * 10 + [2.0] * 5
    for seed in range(50):
        idx = oversample_indices(labels, seed=seed)
        picked = np.asarray(labels)[idx]
        counts = [np.sum(picked == c) for c in (0.0, 0.5, 1.0, 2.0)]
        assert chisquare(counts).pvalue > 0.01


def test_oversample_empty_labels():
    with pytest.raises(EmptySample):
        oversample_indices([], seed=0)
