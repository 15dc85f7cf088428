"""ROC/AUC statistics, paired permutation testing, operating-point metrics.

Score conventions: a scan is called positive when its score is >= the
threshold. AUC follows the Mann-Whitney pair semantics (ties count half),
which coincides with trapezoidal integration of the tie-grouped ROC curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataConsistencyError, DegenerateCohortError, PairingError


@dataclass
class ScoredCohort:
    """Aligned per-scan scores, labels and optional Lung-RADS categories."""

    scan_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray
    lungrads: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.scan_ids)
        if self.scores.shape != (n,) or self.labels.shape != (n,):
            raise DataConsistencyError("scan_ids, scores and labels must have equal length")
        if len(set(self.scan_ids)) != n:
            raise DataConsistencyError("scan_ids must be unique")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise DataConsistencyError("labels must be 0 or 1")
        if self.lungrads is not None and len(self.lungrads) != n:
            raise DataConsistencyError("lungrads list must match the cohort length")

    @classmethod
    def from_dicts(cls, scores: dict[str, float], labels: dict[str, int],
                   lungrads: dict[str, int] | None = None) -> "ScoredCohort":
        missing = sorted(set(scores) - set(labels))
        if missing:
            raise DataConsistencyError(f"scans without labels: {missing[:10]}")
        ids = sorted(scores)
        return cls(
            scan_ids=ids,
            scores=np.array([scores[i] for i in ids]),
            labels=np.array([labels[i] for i in ids]),
            lungrads=None if lungrads is None else [lungrads.get(i) for i in ids],
        )

    def subset(self, mask: np.ndarray) -> "ScoredCohort":
        idx = np.flatnonzero(mask)
        return ScoredCohort(
            scan_ids=[self.scan_ids[i] for i in idx],
            scores=self.scores[idx],
            labels=self.labels[idx],
            lungrads=None if self.lungrads is None else [self.lungrads[i] for i in idx],
        )

    def check_both_classes(self):
        if not (np.any(self.labels == 1) and np.any(self.labels == 0)):
            raise DegenerateCohortError("cohort must contain both classes")


@dataclass
class RocCurve:
    """Threshold-swept operating points from (0,0) to (1,1)."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def __iter__(self):
        return iter(zip(self.fpr, self.tpr, self.thresholds))


def roc_curve(c: ScoredCohort) -> RocCurve:
    """One point per distinct score (ties grouped) plus the (0,0) sentinel."""
    c.check_both_classes()
    order = np.argsort(-c.scores, kind="stable")
    scores = c.scores[order]
    labels = c.labels[order]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    # indices where a tie group ends
    distinct = np.flatnonzero(np.diff(scores) != 0)
    ends = np.r_[distinct, scores.size - 1]
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, scores[ends]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(c: ScoredCohort) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties half."""
    c.check_both_classes()
    return float(_auc_rows(c.scores[None, :], c.labels)[0])


def _auc_rows(score_rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Midrank AUC of each row of `score_rows` against shared labels."""
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(score_rows, method="average", axis=1)
    pos_rank_sum = ranks[:, labels == 1].sum(axis=1)
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def trapezoid_auc(curve: RocCurve) -> float:
    """Trapezoidal area under a tie-grouped ROC curve."""
    return float(np.trapezoid(curve.tpr, curve.fpr))


def permutation_test_auc(a: ScoredCohort, b: ScoredCohort, n_perm: int = 10_000,
                         rng: np.random.Generator | None = None) -> float:
    """One-sided paired permutation test of auc(a) - auc(b) > 0.

    Each permutation swaps the two models' scores independently per scan
    with probability 1/2; the p-value uses add-one smoothing:
    p = (1 + #{permuted stat >= observed}) / (1 + n_perm).
    """
    if n_perm < 1:
        raise ConfigError("n_perm must be at least 1")
    rng = rng or np.random.default_rng(0)
    if a.scan_ids != b.scan_ids or not np.array_equal(a.labels, b.labels):
        # try aligning b onto a's ordering before giving up
        index = {sid: i for i, sid in enumerate(b.scan_ids)}
        if set(a.scan_ids) != set(b.scan_ids):
            raise PairingError("cohorts do not cover the same scans")
        perm = np.array([index[sid] for sid in a.scan_ids])
        b = ScoredCohort(scan_ids=list(a.scan_ids), scores=b.scores[perm],
                         labels=b.labels[perm], lungrads=b.lungrads)
        if not np.array_equal(a.labels, b.labels):
            raise PairingError("cohorts disagree on labels")
    a.check_both_classes()

    observed = auc(a) - auc(b)
    exceed = 0
    done = 0
    chunk = max(1, min(n_perm, 20_000_000 // max(a.scores.size, 1) // 8))
    while done < n_perm:
        m = min(chunk, n_perm - done)
        swap = rng.random((m, a.scores.size)) < 0.5
        sa = np.where(swap, b.scores, a.scores)
        sb = np.where(swap, a.scores, b.scores)
        stats = _auc_rows(sa, a.labels) - _auc_rows(sb, a.labels)
        exceed += int(np.count_nonzero(stats >= observed))
        done += m
    return (1 + exceed) / (1 + n_perm)


def _threshold_sweep(c: ScoredCohort):
    """All candidate thresholds (distinct scores + one above the max) with
    the sensitivity and specificity of the `score >= threshold` rule."""
    c.check_both_classes()
    pos = np.sort(c.scores[c.labels == 1])
    neg = np.sort(c.scores[c.labels == 0])
    thresholds = np.unique(c.scores)
    top = thresholds[-1] + 1.0 if np.isfinite(thresholds[-1]) else np.inf
    thresholds = np.r_[thresholds, top]
    # counts of scores >= t / < t via binary search on the sorted arrays
    sens = (len(pos) - np.searchsorted(pos, thresholds, side="left")) / len(pos)
    spec = np.searchsorted(neg, thresholds, side="left") / len(neg)
    return thresholds, sens, spec


def sensitivity_at_specificity(c: ScoredCohort, target_specificity: float = 0.80) -> float:
    """Sensitivity at the smallest threshold whose specificity meets the target."""
    thresholds, sens, spec = _threshold_sweep(c)
    ok = np.flatnonzero(spec >= target_specificity)
    return float(sens[ok[0]])


def specificity_at_sensitivity(c: ScoredCohort, target_sensitivity: float = 0.84) -> float:
    """Specificity at the largest threshold whose sensitivity meets the target."""
    thresholds, sens, spec = _threshold_sweep(c)
    ok = np.flatnonzero(sens >= target_sensitivity)
    return float(spec[ok[-1]])


@dataclass
class GroupMetrics:
    category: int
    n: int
    n_pos: int
    sensitivity_at_spec: float | None
    specificity_at_sens: float | None


def grouped_metrics(c: ScoredCohort, target_specificity: float = 0.80,
                    target_sensitivity: float = 0.84) -> list[GroupMetrics]:
    """Operating-point metrics within each Lung-RADS category subset.

    Categories whose subset lacks one of the classes report None metrics.
    """
    if c.lungrads is None:
        raise ConfigError("cohort has no lungrads categories to group by")
    cats = sorted({g for g in c.lungrads if g is not None})
    out = []
    for cat in cats:
        mask = np.array([g == cat for g in c.lungrads])
        sub = c.subset(mask)
        n_pos = int(sub.labels.sum())
        if 0 < n_pos < sub.labels.size:
            sens = sensitivity_at_specificity(sub, target_specificity)
            spec = specificity_at_sensitivity(sub, target_sensitivity)
        else:
            sens = spec = None
        out.append(GroupMetrics(category=cat, n=sub.labels.size, n_pos=n_pos,
                                sensitivity_at_spec=sens, specificity_at_sens=spec))
    return out


# ---------------------------------------------------------------------------
# report files


@dataclass
class EvalReport:
    auc: float
    n: int
    n_pos: int
    target_specificity: float
    target_sensitivity: float
    sensitivity_at_spec: float
    specificity_at_sens: float
    groups: list[GroupMetrics] = field(default_factory=list)
    curve: RocCurve | None = None


def evaluate_cohort(c: ScoredCohort, target_specificity: float = 0.80,
                    target_sensitivity: float = 0.84, group: bool = False) -> EvalReport:
    report = EvalReport(
        auc=auc(c),
        n=c.labels.size,
        n_pos=int(c.labels.sum()),
        target_specificity=target_specificity,
        target_sensitivity=target_sensitivity,
        sensitivity_at_spec=sensitivity_at_specificity(c, target_specificity),
        specificity_at_sens=specificity_at_sensitivity(c, target_sensitivity),
        curve=roc_curve(c),
    )
    if group:
        report.groups = grouped_metrics(c, target_specificity, target_sensitivity)
    return report


def write_report_csv(report: EvalReport, path):
    """Machine-readable (metric, group, value) rows."""
    rows = [
        ("n", "all", report.n),
        ("n_pos", "all", report.n_pos),
        ("auc", "all", repr(report.auc)),
        (f"sensitivity_at_spec_{report.target_specificity:g}", "all",
         repr(report.sensitivity_at_spec)),
        (f"specificity_at_sens_{report.target_sensitivity:g}", "all",
         repr(report.specificity_at_sens)),
    ]
    for g in report.groups:
        tag = f"lungrads_{g.category}"
        rows.append(("n", tag, g.n))
        rows.append(("n_pos", tag, g.n_pos))
        rows.append((f"sensitivity_at_spec_{report.target_specificity:g}", tag,
                     "NA" if g.sensitivity_at_spec is None else repr(g.sensitivity_at_spec)))
        rows.append((f"specificity_at_sens_{report.target_sensitivity:g}", tag,
                     "NA" if g.specificity_at_sens is None else repr(g.specificity_at_sens)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "group", "value"])
        writer.writerows(rows)


def write_roc_csv(curve: RocCurve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in curve:
            writer.writerow([repr(float(fpr)), repr(float(tpr)), repr(float(thr))])


def format_report(report: EvalReport) -> str:
    """Human-readable summary table."""
    lines = [
        f"cohort: n={report.n}  positives={report.n_pos}",
        f"AUC: {report.auc:.4f}",
        f"sensitivity @ specificity>={report.target_specificity:.2f}: "
        f"{report.sensitivity_at_spec:.4f}",
        f"specificity @ sensitivity>={report.target_sensitivity:.2f}: "
        f"{report.specificity_at_sens:.4f}",
    ]
    if report.groups:
        lines.append("per Lung-RADS category:")
        lines.append("  cat     n   pos   sens@spec   spec@sens")
        for g in report.groups:
            sens = "NA" if g.sensitivity_at_spec is None else f"{g.sensitivity_at_spec:.4f}"
            spec = "NA" if g.specificity_at_sens is None else f"{g.specificity_at_sens:.4f}"
            lines.append(f"  {g.category:3d} {g.n:5d} {g.n_pos:5d}   {sens:>9}   {spec:>9}")
    return "\n".join(lines)
