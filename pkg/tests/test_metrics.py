import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasvmeta.metrics import (
    ScoreRecord,
    compute_eer,
    det_curve,
    diff_report,
    format_matrix,
    genre_breakdown,
    genre_matrix,
    read_scores,
    report,
    sasv_eer,
    sv_eer,
    write_scores,
)


def oracle_eer(scores, labels):
    """Plain-loop threshold sweep with linear interpolation at the crossing."""
    scores = [float(s) for s in scores]
    labels = [bool(l) for l in labels]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    points = []
    for tau in [float("-inf")] + sorted(set(scores)):
        misses = sum(1 for s, l in zip(scores, labels) if l and not s > tau)
        alarms = sum(1 for s, l in zip(scores, labels) if not l and s > tau)
        points.append((alarms / n_neg, misses / n_pos))
    for (far0, frr0), (far1, frr1) in zip(points, points[1:]):
        if frr0 == far0:
            return frr0
        if frr1 >= far1:
            # frr - far changes sign on this segment
            t = (far0 - frr0) / ((frr1 - frr0) - (far1 - far0))
            return frr0 + t * (frr1 - frr0)
    return points[-1][1]


def random_set(rng, n, ties=False):
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    shift = rng.uniform(0, 2)
    scores = rng.normal(size=n) + shift * labels
    if ties:
        scores = np.round(scores * 2) / 2
    return scores, labels


def records_from(kinds, asv, sasv, genres=None):
    genres = genres or [("dr", "dr")] * len(kinds)
    return [
        ScoreRecord(f"t{i}", float(a), float(s), k == "target", k, eg, tg)
        for i, (k, a, s, (eg, tg)) in enumerate(zip(kinds, asv, sasv, genres))
    ]


# -- compute_eer -------------------------------------------------------------------


def test_separated_scores():
    assert compute_eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]).eer == 0.0
    assert compute_eer([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]).eer == 1.0


def test_four_score_example():
    # the sweep reaches FRR = FAR = 1/2 exactly at threshold 0.4
    result = compute_eer([(0.9, True), (0.4, True), (0.6, False), (0.1, False)])
    assert result.eer == pytest.approx(oracle_eer([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]))
    assert result.eer == 0.5
    assert result.num_positive == 2 and result.num_negative == 2


def test_pair_and_array_inputs_agree():
    rng = np.random.default_rng(1)
    scores, labels = random_set(rng, 50)
    assert compute_eer(scores, labels) == compute_eer(list(zip(scores, labels)))


@pytest.mark.parametrize("ties", [False, True])
def test_matches_oracle(ties):
    rng = np.random.default_rng(10 + ties)
    for _ in range(60):
        scores, labels = random_set(rng, int(rng.integers(10, 400)), ties)
        assert abs(compute_eer(scores, labels).eer - oracle_eer(scores, labels)) <= 1e-9


def test_all_tied_scores():
    assert compute_eer([0.5] * 6, [1, 0, 1, 0, 1, 0]).eer == pytest.approx(0.5)


def test_monotone_invariance():
    rng = np.random.default_rng(2)
    scores, labels = random_set(rng, 300)
    base = compute_eer(scores, labels).eer
    for f in (np.exp, lambda x: 3 * x - 7, lambda x: np.arctan(x), lambda x: x**3):
        assert compute_eer(f(scores), labels).eer == pytest.approx(base, abs=1e-12)


def test_flip_and_negate_symmetry():
    rng = np.random.default_rng(3)
    for ties in (False, True):
        scores, labels = random_set(rng, 200, ties)
        assert compute_eer(-scores, ~labels).eer == pytest.approx(compute_eer(scores, labels).eer, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_oracle_property(pairs):
    labels = [l for _, l in pairs]
    if all(labels) or not any(labels):
        with pytest.raises(ValueError):
            compute_eer(pairs)
        return
    eer = compute_eer(pairs).eer
    assert 0.0 <= eer <= 1.0
    assert abs(eer - oracle_eer([s for s, _ in pairs], labels)) <= 1e-9


def test_threshold_is_at_crossing():
    rng = np.random.default_rng(4)
    scores, labels = random_set(rng, 2000)
    res = compute_eer(scores, labels)
    frr = np.mean(scores[labels] <= res.threshold)
    far = np.mean(scores[~labels] > res.threshold)
    assert abs(frr - res.eer) < 0.01 and abs(far - res.eer) < 0.01


@pytest.mark.parametrize(
    "scores, labels",
    [([0.1, 0.2], [1, 1]), ([0.1, 0.2], [0, 0]), ([0.1, float("nan")], [1, 0]), ([0.1], [1, 0])],
)
def test_invalid_inputs(scores, labels):
    with pytest.raises(ValueError):
        compute_eer(scores, labels)


def test_det_curve_endpoints():
    far, frr, thr = det_curve([0.3, 0.5, 0.1, 0.7], [1, 0, 1, 0])
    assert thr[0] == -np.inf and far[0] == 1.0 and frr[0] == 0.0
    assert far[-1] == 0.0 and frr[-1] == 1.0
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(frr) >= 0)


# -- SV / SASV filtering --------------------------------------------------------------------


def _mixed(rng, n=1000):
    kinds = rng.choice(["target", "nontarget", "spoof"], size=n, p=[0.4, 0.4, 0.2])
    kinds[:3] = ["target", "nontarget", "spoof"]
    asv = rng.normal(size=n) + 1.5 * (kinds != "nontarget")
    sasv = rng.normal(size=n) + 1.5 * (kinds == "target")
    return kinds, asv, sasv


def test_sv_eer_excludes_spoofs():
    rng = np.random.default_rng(5)
    kinds, asv, sasv = _mixed(rng)
    records = records_from(kinds, asv, sasv)
    keep = kinds != "spoof"
    assert sv_eer(records).eer == pytest.approx(oracle_eer(asv[keep], kinds[keep] == "target"), abs=1e-9)
    bona = [r for r in records if r.trial_kind != "spoof"]
    assert sv_eer(bona) == sv_eer(records)


def test_sasv_eer_uses_all_trials():
    rng = np.random.default_rng(6)
    kinds, asv, sasv = _mixed(rng)
    records = records_from(kinds, asv, sasv)
    assert sasv_eer(records).eer == pytest.approx(oracle_eer(sasv, kinds == "target"), abs=1e-9)
    assert sasv_eer(records).num_negative == int((kinds != "target").sum())


def test_sasv_eer_zero_when_targets_on_top():
    kinds = ["target", "target", "nontarget", "spoof"]
    assert sasv_eer(records_from(kinds, [0, 0, 0, 0], [0.9, 0.8, 0.3, 0.5])).eer == 0.0


def test_score_record_consistency():
    with pytest.raises(ValueError):
        ScoreRecord("t", 0.0, 0.0, True, "spoof", "dr", "dr")


# -- genre matrix and diff ---------------------------------------------------------------------


def _genre_records(rng, n=600, shift=1.0):
    genres = ["dr", "vl"]
    kinds = rng.choice(["target", "nontarget"], size=n)
    kinds[:2] = ["target", "nontarget"]
    asv = rng.normal(size=n) + shift * (kinds == "target")
    pairs = [(genres[i % 2], genres[(i // 2) % 2]) for i in range(n)]
    return records_from(kinds, asv, asv, pairs)


def test_genre_matrix_cells_match_filtered_eer():
    records = _genre_records(np.random.default_rng(7))
    matrix = genre_matrix(records)
    assert set(matrix) == {("dr", "dr"), ("dr", "vl"), ("vl", "dr"), ("vl", "vl")}
    for (eg, tg), res in matrix.items():
        cell = [r for r in records if (r.enroll_genre, r.test_genre) == (eg, tg)]
        assert res == sv_eer(cell)


def test_single_genre_matrix_is_overall():
    records = _genre_records(np.random.default_rng(8))
    one = [ScoreRecord(r.trial_id, r.asv_score, r.sasv_score, r.label, r.trial_kind, "dr", "dr") for r in records]
    assert genre_matrix(one) == {("dr", "dr"): sv_eer(one)}


def test_absent_cell():
    records = records_from(["target", "nontarget", "target"], [1, 0, 1], [1, 0, 1], [("dr", "dr"), ("dr", "dr"), ("en", "re")])
    matrix = genre_matrix(records)
    assert matrix[("en", "re")] is None
    assert "-" in format_matrix(matrix).splitlines()[-1]
    assert genre_breakdown(records)["re"] is None


def test_diff_report_identity_and_antisymmetry():
    rng = np.random.default_rng(9)
    a, b = _genre_records(rng, shift=1.0), _genre_records(rng, shift=2.0)
    assert all(v == 0.0 for v in diff_report(a, a).values())
    ab, ba = diff_report(a, b), diff_report(b, a)
    assert ab.keys() == ba.keys()
    for k in ab:
        assert ab[k] == pytest.approx(-ba[k], abs=1e-15)
        assert ab[k] == pytest.approx(genre_matrix(b)[k].eer - genre_matrix(a)[k].eer)


def test_diff_report_coverage_mismatch():
    a = _genre_records(np.random.default_rng(10))
    b = [r for r in a if r.test_genre == "dr"]
    with pytest.raises(ValueError, match="vl"):
        diff_report(a, b)


# -- files and report ----------------------------------------------------------------------------


def test_score_file_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    kinds, asv, sasv = _mixed(rng, 50)
    records = records_from(kinds, asv, 1 / (1 + np.exp(-sasv)))
    write_scores(records, tmp_path / "s.tsv")
    back = read_scores(tmp_path / "s.tsv")
    assert [r.trial_id for r in back] == [r.trial_id for r in records]
    assert sasv_eer(back).eer == pytest.approx(sasv_eer(records).eer, abs=1e-6)
    assert all(len(line.split("\t")) == 7 for line in (tmp_path / "s.tsv").read_text().splitlines())


def test_malformed_score_line(tmp_path):
    (tmp_path / "s.tsv").write_text("t0\t0.1\t0.2\t1\ttarget\tdr\n")
    with pytest.raises(ValueError, match=":1:"):
        read_scores(tmp_path / "s.tsv")


def test_report_text_and_csv():
    records = _genre_records(np.random.default_rng(12))
    text, csv_text = report({"sys": records, "base": records}, baseline="base")
    summary = text.splitlines()[2].split()
    assert summary[0] == "sys" and summary[1] == f"{sv_eer(records).percent:.2f}"
    assert "+0.00" in text
    assert csv_text.splitlines()[0] == "system,table,enroll_genre,test_genre,metric,value"
    assert any(line.startswith("sys,summary,,,sv_eer,") for line in csv_text.splitlines())


def test_report_marks_sasv_absent_without_negatives():
    records = records_from(["target", "target"], [1.0, 0.5], [0.9, 0.8])
    text, _ = report({"only": records})
    assert text.splitlines()[2].split() == ["only", "-", "-"]
