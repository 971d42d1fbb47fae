import numpy as np
import pytest

from voxcycle.errors import ValidationError
from voxcycle.evaluation import (
    FOUR_LABEL,
    SEVEN_LABEL,
    DiceReport,
    dice_coefficient,
    evaluate,
    read_reports_csv,
    report_table,
    write_reports_csv,
    write_reports_json,
)
from voxcycle.volume_io import LabelMap


def _naive_dice(pred, truth, label):
    # independent oracle: explicit voxel loops and set arithmetic
    p = set()
    t = set()
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            for k in range(pred.shape[2]):
                if pred[i, j, k] == label:
                    p.add((i, j, k))
                if truth[i, j, k] == label:
                    t.add((i, j, k))
    if not p and not t:
        return 1.0
    return 2.0 * len(p & t) / (len(p) + len(t))


def _labelmap(data, n=7):
    from voxcycle.evaluation import label_names_for

    names = label_names_for(n)
    return LabelMap(
        np.asarray(data, dtype=np.int16),
        label_set=tuple((i, nm) for i, nm in enumerate(names, start=1)),
    )


def test_dice_identity():
    m = np.zeros((4, 4, 4), dtype=np.int16)
    m[1:3, 1:3, 1:3] = 2
    assert dice_coefficient(m, m, 2) == 1.0


def test_dice_hand_counts():
    pred = np.zeros((4, 4, 4), dtype=np.int16)
    truth = np.zeros((4, 4, 4), dtype=np.int16)
    pred[0, 0, :4] = 1  # |P| = 4
    truth[0, 0, 2:4] = 1  # overlap 2
    truth[0, 1, :2] = 1  # |T| = 4
    assert dice_coefficient(pred, truth, 1) == pytest.approx(0.5)


def test_dice_empty_pred():
    pred = np.zeros((4, 4, 4), dtype=np.int16)
    truth = np.zeros((4, 4, 4), dtype=np.int16)
    truth[0, 0, 0] = 3
    assert dice_coefficient(pred, truth, 3) == 0.0


def test_dice_absent_from_both_is_one():
    z = np.zeros((4, 4, 4), dtype=np.int16)
    assert dice_coefficient(z, z, 5) == 1.0


def test_dice_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = rng.integers(0, 4, size=(4, 4, 4)).astype(np.int16)
        truth = rng.integers(0, 4, size=(4, 4, 4)).astype(np.int16)
        for label in (1, 2, 3):
            assert dice_coefficient(pred, truth, label) == _naive_dice(pred, truth, label)


def test_dice_symmetry_and_monotonicity():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 3, size=(5, 5, 5)).astype(np.int16)
    truth = rng.integers(0, 3, size=(5, 5, 5)).astype(np.int16)
    assert dice_coefficient(pred, truth, 1) == dice_coefficient(truth, pred, 1)
    # growing overlap at fixed support sizes raises the score
    a = np.zeros((4, 4, 4), dtype=np.int16)
    b = np.zeros((4, 4, 4), dtype=np.int16)
    a[0, 0, :3] = 1
    scores = []
    for overlap in (1, 2, 3):
        b[:] = 0
        b[0, 0, :overlap] = 1
        b[0, 1, : 3 - overlap] = 1  # keep |T| = 3
        scores.append(dice_coefficient(a, b, 1))
    assert scores == sorted(scores) and scores[0] < scores[-1]


def test_evaluate_identity_all_ones():
    rng = np.random.default_rng(2)
    maps = [_labelmap(rng.integers(0, 8, size=(6, 6, 6))) for _ in range(3)]
    report = evaluate(maps, maps, SEVEN_LABEL, domain="CT")
    assert all(v == 1.0 for v in report.per_label.values())
    assert report.mean == 1.0


def test_four_label_mode_ignores_extra_structures():
    rng = np.random.default_rng(3)
    base = rng.integers(0, 5, size=(6, 6, 6))
    truth_a = _labelmap(base)
    pred = _labelmap(rng.integers(0, 5, size=(6, 6, 6)))
    with_extra = base.copy()
    with_extra[base == 0] = 7  # add PA voxels in background only
    truth_b = _labelmap(with_extra)
    r_a = evaluate([pred], [truth_a], FOUR_LABEL)
    r_b = evaluate([pred], [truth_b], FOUR_LABEL)
    assert tuple(r_a.per_label) == ("AA", "LAC", "LVC", "MYO")
    assert r_a.per_label == r_b.per_label


def test_report_mean_hand_value():
    r = DiceReport(
        per_label={"AA": 0.8, "LAC": 0.9, "LVC": 1.0, "MYO": 0.7}, mode=FOUR_LABEL
    )
    assert r.mean == pytest.approx(0.85)


def test_seven_restricted_to_shared_labels_matches_four():
    rng = np.random.default_rng(4)
    truth = [_labelmap(rng.integers(0, 8, size=(6, 6, 6))) for _ in range(2)]
    pred = [_labelmap(rng.integers(0, 8, size=(6, 6, 6))) for _ in range(2)]
    r7 = evaluate(pred, truth, SEVEN_LABEL)
    r4 = evaluate(pred, truth, FOUR_LABEL)
    for name in ("AA", "LAC", "LVC", "MYO"):
        assert r7.per_label[name] == r4.per_label[name]


def test_evaluate_rejects_unmatched_sets():
    m = _labelmap(np.zeros((4, 4, 4)))
    with pytest.raises(ValidationError):
        evaluate([m], [m, m], FOUR_LABEL)


def test_evaluate_rejects_missing_label_names():
    m = LabelMap(np.zeros((4, 4, 4), dtype=np.int16), label_set=((1, "AA"),))
    with pytest.raises(ValidationError, match="not in label set"):
        evaluate([m], [m], FOUR_LABEL)


def test_report_table_perfect_run():
    r = DiceReport(per_label={n: 1.0 for n in ("AA", "LAC", "LVC", "MYO")}, mode=FOUR_LABEL, domain="CT")
    table = report_table([r])
    assert table.count("1.000") == 5  # four labels + mean
    assert report_table([r]) == table  # byte-stable


def test_reports_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    reports = [
        DiceReport(
            per_label={n: float(v) for n, v in zip(("AA", "LAC", "LVC", "MYO"), rng.uniform(size=4))},
            mode=FOUR_LABEL,
            domain=d,
            run="full",
        )
        for d in ("CT", "MRI")
    ]
    path = tmp_path / "r.csv"
    write_reports_csv(reports, path)
    back = read_reports_csv(path)
    for a, b in zip(reports, back):
        assert a.domain == b.domain and a.run == b.run
        for n in a.per_label:
            assert abs(a.per_label[n] - b.per_label[n]) < 1e-9
        assert abs(a.mean - b.mean) < 1e-9


def test_reports_json_written(tmp_path):
    r = DiceReport(per_label={n: 0.5 for n in ("AA", "LAC", "LVC", "MYO")}, mode=FOUR_LABEL)
    path = tmp_path / "r.json"
    write_reports_json([r], path)
    import json

    payload = json.loads(path.read_text())
    assert payload[0]["mean"] == 0.5


def test_ablation_comparison_table():
    rows = [
        DiceReport(per_label={n: 0.9 for n in ("AA", "LAC", "LVC", "MYO")}, mode=FOUR_LABEL, run=run, domain="CT")
        for run in ("full", "no_augment", "no_synth", "no_shape")
    ]
    table = report_table(rows)
    for run in ("full", "no_augment", "no_synth", "no_shape"):
        assert run in table
