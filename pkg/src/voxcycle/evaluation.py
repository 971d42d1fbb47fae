"""Per-label Dice scoring and report emission.

Scores are computed per label per sample, averaged across samples per
label, and the reported mean is the unweighted average over labels.
Four-label mode covers AA/LAC/LVC/MYO; seven-label mode adds
RAC/RVC/PA.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError

FOUR_LABEL = "four_label"
SEVEN_LABEL = "seven_label"

FOUR_LABEL_NAMES = ("AA", "LAC", "LVC", "MYO")
SEVEN_LABEL_NAMES = FOUR_LABEL_NAMES + ("RAC", "RVC", "PA")

_MODE_NAMES = {FOUR_LABEL: FOUR_LABEL_NAMES, SEVEN_LABEL: SEVEN_LABEL_NAMES}


def label_names_for(n_labels: int) -> tuple[str, ...]:
    """Canonical label-name ordering for 4- and 7-structure maps."""
    if n_labels == 4:
        return FOUR_LABEL_NAMES
    if n_labels == 7:
        return SEVEN_LABEL_NAMES
    raise ValidationError(f"n_labels must be 4 or 7, got {n_labels}")


def mode_names(mode: str) -> tuple[str, ...]:
    if mode not in _MODE_NAMES:
        raise ValidationError(f"unknown evaluation mode {mode!r}")
    return _MODE_NAMES[mode]


@dataclass
class DiceReport:
    """Per-label Dice coefficients plus their unweighted mean."""

    per_label: dict[str, float]
    mode: str
    domain: str = ""
    run: str = ""
    mean: float = field(init=False)

    def __post_init__(self):
        expected = mode_names(self.mode)
        if tuple(self.per_label) != expected:
            raise ValidationError(
                f"mode {self.mode} requires labels {expected}, got {tuple(self.per_label)}"
            )
        for name, v in self.per_label.items():
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"dice for {name} out of [0,1]: {v}")
        self.mean = float(np.mean(list(self.per_label.values())))

    def as_dict(self) -> dict:
        return {
            "run": self.run,
            "domain": self.domain,
            "mode": self.mode,
            "per_label": dict(self.per_label),
            "mean": self.mean,
        }


def _label_array(obj) -> np.ndarray:
    obj = getattr(obj, "labels", obj)  # accept Samples as well as LabelMaps
    data = getattr(obj, "data", obj)
    return np.asarray(data)


def dice_coefficient(pred, truth, label: int) -> float:
    """2|P∩T| / (|P|+|T|) for one label; 1.0 when absent from both."""
    p = _label_array(pred)
    t = _label_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} != truth shape {t.shape}")
    pm = p == label
    tm = t == label
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & tm).sum()) / denom


def evaluate(pred_set, truth_set, mode: str, domain: str = "", run: str = "") -> DiceReport:
    """Score matched prediction/truth label maps under the given mode.

    Label ids are resolved by name from the truth maps' label sets; every
    truth map must name all labels the mode requires.
    """
    if len(pred_set) != len(truth_set):
        raise ValidationError(
            f"unmatched sample sets: {len(pred_set)} predictions, {len(truth_set)} truths"
        )
    if not truth_set:
        raise ValidationError("empty sample sets")
    names = mode_names(mode)
    per_label: dict[str, list[float]] = {n: [] for n in names}
    for pred, truth in zip(pred_set, truth_set):
        truth_labels = getattr(truth, "labels", truth)
        for name in names:
            per_label[name].append(
                dice_coefficient(pred, truth, truth_labels.id_for(name)))
    scores = {n: float(np.mean(v)) for n, v in per_label.items()}
    return DiceReport(per_label=scores, mode=mode, domain=domain, run=run)


def report_table(reports) -> str:
    """Fixed-width table, one row per report; byte-stable for equal inputs."""
    reports = list(reports)
    if not reports:
        raise ValidationError("no reports to tabulate")
    names = mode_names(reports[0].mode)
    for r in reports:
        if r.mode != reports[0].mode:
            raise ValidationError("cannot tabulate reports of mixed modes")
    row_ids = [f"{r.run or 'run'}/{r.domain or '-'}" for r in reports]
    id_width = max(len("run/domain"), *(len(r) for r in row_ids))
    header = "  ".join([f"{'run/domain':<{id_width}}"] + [f"{n:>6}" for n in names] + [f"{'mean':>6}"])
    lines = [header, "-" * len(header)]
    for rid, r in zip(row_ids, reports):
        cells = [f"{r.per_label[n]:6.3f}" for n in names] + [f"{r.mean:6.3f}"]
        lines.append("  ".join([f"{rid:<{id_width}}"] + cells))
    return "\n".join(lines) + "\n"


def write_reports_json(reports, path) -> None:
    payload = [r.as_dict() for r in reports]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_reports_csv(reports, path) -> None:
    reports = list(reports)
    names = mode_names(reports[0].mode)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "domain", "mode", *names, "mean"])
    for r in reports:
        writer.writerow(
            [r.run, r.domain, r.mode]
            + [f"{r.per_label[n]:.9f}" for n in names]
            + [f"{r.mean:.9f}"]
        )
    Path(path).write_text(buf.getvalue())


def read_reports_csv(path) -> list[DiceReport]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            names = mode_names(row["mode"])
            per_label = {n: float(row[n]) for n in names}
            out.append(
                DiceReport(per_label=per_label, mode=row["mode"], domain=row["domain"], run=row["run"])
            )
    return out
