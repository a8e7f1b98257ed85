"""
Evaluation Metrics and Subgroup Reports
Confusion-table metrics, Mann-Whitney AUC and ROC points, macro-F1, stratified
subgroup tables with a patient-level bootstrap, pre-onset feature trajectories
and fold summaries
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from seeding import philox_generator

logger = logging.getLogger(__name__)

DECISION_THRESHOLD = 0.5
BOOTSTRAP_RESAMPLES = 1000
METRIC_COLUMNS = ('accuracy', 'recall', 'precision', 'f1', 'f2', 'auc', 'macro_f1')
RISK_FLAG_NAMES = ('hypertension', 'diabetes', 'hyperlipidemia', 'ckd', 'ihd')


@dataclass
class MetricReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    f2: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    auc: float = math.nan
    macro_f1: float = math.nan

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def _f_beta(precision: float, recall: float, beta: float) -> float:
    b2 = beta * beta
    denominator = b2 * precision + recall
    return (1.0 + b2) * precision * recall / denominator if denominator else 0.0


def _counts(preds: np.ndarray, labels: np.ndarray):
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return tp, fp, tn, fn


def _as_binary(values: Sequence[int], name: str) -> np.ndarray:
    array = np.asarray(values).astype(np.int64)
    if array.ndim != 1 or not np.isin(array, (0, 1)).all():
        raise ValueError(f"{name} must be a 1-D sequence of 0/1")
    return array


def report_from_counts(tp: int, fp: int, tn: int, fn: int) -> MetricReport:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    n = tp + fp + tn + fn
    return MetricReport(
        accuracy=_ratio(tp + tn, n),
        recall=recall,
        precision=precision,
        f1=_f_beta(precision, recall, 1.0),
        f2=_f_beta(precision, recall, 2.0),
        tp=tp, fp=fp, tn=tn, fn=fn, n=n)


def confusion_metrics(preds: Sequence[int], labels: Sequence[int]) -> MetricReport:
    """Accuracy, recall, precision, F1 and F2 of binary predictions (AUC left undefined)"""
    preds = _as_binary(preds, 'preds')
    labels = _as_binary(labels, 'labels')
    if preds.size != labels.size or preds.size == 0:
        raise ValueError("preds and labels must be non-empty and of equal length")
    return report_from_counts(*_counts(preds, labels))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mann-Whitney AUC with tie-averaged ranks

    (sum of positive ranks - n_pos (n_pos + 1) / 2) / (n_pos n_neg); NaN when
    only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _as_binary(labels, 'labels')
    if scores.size != labels.size:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores, method='average')
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_f1(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Unweighted mean of the class-1 and class-0 F1 scores"""
    preds = _as_binary(preds, 'preds')
    labels = _as_binary(labels, 'labels')
    positive = confusion_metrics(preds, labels).f1
    negative = confusion_metrics(1 - preds, 1 - labels).f1
    return (positive + negative) / 2.0


def metric_report(scores: Sequence[float], labels: Sequence[int],
                  threshold: float = DECISION_THRESHOLD) -> MetricReport:
    """Full report from positive-class probabilities"""
    scores = np.asarray(scores, dtype=np.float64)
    preds = (scores >= threshold).astype(np.int64)
    report = confusion_metrics(preds, labels)
    report.auc = roc_auc(scores, labels)
    report.macro_f1 = macro_f1(preds, labels)
    return report


# Subgroups

@dataclass(frozen=True)
class StrataSpec:
    patient_id: str
    age_group: str
    sex: str
    race: str
    risk_tier: str

    ATTRIBUTES = ('age_group', 'sex', 'race', 'risk_tier')

    @classmethod
    def from_record(cls, patient_id: str, record: Mapping) -> "StrataSpec":
        flags = record.get('flags', {})
        return cls(
            patient_id=patient_id,
            age_group=age_group(record['age']),
            sex=str(record.get('sex', 'Unknown')),
            race=str(record.get('race', 'Unknown')),
            risk_tier=risk_tier(flags))


def age_group(age: float) -> str:
    return '<65' if age < 65 else '>=65'


def risk_tier(flags: Mapping[str, bool]) -> str:
    """Low = no comorbidities, Medium = 1-2, High = 3 or more"""
    count = sum(1 for name in RISK_FLAG_NAMES if flags.get(name))
    if count == 0:
        return 'Low'
    return 'Medium' if count <= 2 else 'High'


SUBGROUP_LEVELS = {
    'age_group': ('<65', '>=65'),
    'risk_tier': ('Low', 'Medium', 'High'),
}


def _patient_counts(preds: np.ndarray, labels: np.ndarray, patients: np.ndarray, order: List[str]) -> np.ndarray:
    """P x 4 (tp, fp, tn, fn) per patient in the given order"""
    counts = np.zeros((len(order), 4), dtype=np.int64)
    index = {p: i for i, p in enumerate(order)}
    rows = np.array([index[p] for p in patients], dtype=np.int64)
    for column, (pv, lv) in enumerate(((1, 1), (1, 0), (0, 0), (0, 1))):
        np.add.at(counts[:, column], rows, ((preds == pv) & (labels == lv)).astype(np.int64))
    return counts


def _f1_from_counts(counts: np.ndarray) -> np.ndarray:
    """Vectorized F1 over the last axis (tp, fp, tn, fn)"""
    tp, fp, fn = counts[..., 0], counts[..., 1], counts[..., 3]
    denominator = 2 * tp + fp + fn
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(denominator > 0, 2 * tp / np.maximum(denominator, 1), 0.0)


def bootstrap_f1_difference(group: np.ndarray, rest: np.ndarray, n_boot: int, seed: int, stream: int = 0) -> float:
    """
    Shift-method bootstrap p-value for F1(group) - F1(rest)

    Patients are resampled with replacement within each side; the p-value is
    (1 + #{|d_b - d_obs| >= |d_obs|}) / (1 + n_boot).
    """
    d_obs = float(_f1_from_counts(group.sum(axis=0)) - _f1_from_counts(rest.sum(axis=0)))
    rng = philox_generator(seed, 0xB007, stream)
    draws_group = rng.integers(0, group.shape[0], size=(n_boot, group.shape[0]))
    draws_rest = rng.integers(0, rest.shape[0], size=(n_boot, rest.shape[0]))
    d_boot = _f1_from_counts(group[draws_group].sum(axis=1)) - _f1_from_counts(rest[draws_rest].sum(axis=1))
    exceed = int(np.sum(np.abs(d_boot - d_obs) >= abs(d_obs)))
    return (1.0 + exceed) / (1.0 + n_boot)


def subgroup_report(preds: Sequence[int], labels: Sequence[int], patients: Sequence[str],
                    strata: Mapping[str, StrataSpec], scores: Optional[Sequence[float]] = None,
                    n_boot: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> pd.DataFrame:
    """
    Metrics per subgroup of every stratification attribute

    Each row carries subgroup n (windows and patients), the metric suite and
    the bootstrap p-value of its F1 difference against the rest of the
    cohort. Empty subgroups are omitted and listed in the 'note' column of
    the first row of their attribute.
    """
    preds = _as_binary(preds, 'preds')
    labels = _as_binary(labels, 'labels')
    patients = np.asarray(patients, dtype=object)
    missing = sorted(set(patients) - set(strata))
    if missing:
        raise ValueError(f"no strata for patients: {missing[:5]}")
    scores_array = None if scores is None else np.asarray(scores, dtype=np.float64)

    order = sorted(set(patients))
    counts = _patient_counts(preds, labels, patients, order)
    rows = []
    for attr_index, attribute in enumerate(StrataSpec.ATTRIBUTES):
        values = {p: getattr(strata[p], attribute) for p in order}
        levels = SUBGROUP_LEVELS.get(attribute, tuple(sorted(set(values.values()))))
        present = [level for level in levels if any(v == level for v in values.values())]
        notes = [f"{level}: empty subgroup omitted" for level in levels if level not in present]
        for level_index, level in enumerate(present):
            in_group = np.array([values[p] == level for p in order])
            window_mask = np.array([values[p] == level for p in patients])
            report = confusion_metrics(preds[window_mask], labels[window_mask])
            report.macro_f1 = macro_f1(preds[window_mask], labels[window_mask])
            if scores_array is not None:
                report.auc = roc_auc(scores_array[window_mask], labels[window_mask])
            p_value = math.nan
            if 0 < in_group.sum() < len(order):
                p_value = bootstrap_f1_difference(counts[in_group], counts[~in_group], n_boot, seed,
                                                  attr_index * 100 + level_index)
            row = {'attribute': attribute, 'subgroup': level, 'n_patients': int(in_group.sum())}
            row.update(report.as_dict())
            row['p_value'] = p_value
            row['note'] = '; '.join(notes) if level_index == 0 else ''
            rows.append(row)
        for note in notes:
            logger.info("Subgroup %s %s", attribute, note)
    return pd.DataFrame(rows)


# Curves and trajectories

TRAJECTORY_FEATURES = ('T_sp_Rel', 'T_sp', 'A_sp_Rel')
TRAJECTORY_BIN_MIN = 10.0


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> pd.DataFrame:
    """
    ROC operating points, one per distinct score

    Rows run from (fpr, tpr) = (0, 0) at threshold +inf to (1, 1) at the lowest
    score; a window is called positive when its score >= threshold, so tied
    scores move together. Empty when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _as_binary(labels, 'labels')
    if scores.size != labels.size:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return pd.DataFrame(columns=['threshold', 'fpr', 'tpr'])

    order = np.argsort(-scores, kind='mergesort')
    ranked, hits = scores[order], labels[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(ranked) != 0), ranked.size - 1]
    tp = np.cumsum(hits)[last_of_tie]
    fp = (last_of_tie + 1) - tp
    return pd.DataFrame({
        'threshold': np.r_[np.inf, ranked[last_of_tie]],
        'fpr': np.r_[0.0, fp / n_neg],
        'tpr': np.r_[0.0, tp / n_pos],
    })


def curve_area(curve: pd.DataFrame) -> float:
    """Trapezoidal area under an ROC curve table; matches roc_auc"""
    if curve.empty:
        return math.nan
    fpr = curve['fpr'].to_numpy(dtype=np.float64)
    tpr = curve['tpr'].to_numpy(dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def feature_trajectories(frame: pd.DataFrame, onsets: Mapping[str, Optional[float]],
                         features: Sequence[str] = TRAJECTORY_FEATURES,
                         bin_minutes: float = TRAJECTORY_BIN_MIN) -> pd.DataFrame:
    """
    Cohort mean of per-beat features against time before onset

    Beats of patients with a known onset are binned by minutes before onset,
    bin k covering [k * bin_minutes, (k + 1) * bin_minutes). Each patient is
    averaged within a bin first, so long records do not outweigh short ones;
    the table holds the mean and SD of those patient means, nearest bin first.
    """
    if bin_minutes <= 0:
        raise ValueError("bin_minutes must be positive")
    missing = [f for f in features if f not in frame.columns]
    if missing:
        raise ValueError(f"unknown trajectory features: {missing}")
    columns = ['minutes_before_onset', 'n_patients', 'n_beats']
    columns += [f"{f}_{s}" for f in features for s in ('mean', 'sd')]

    known = {pid: float(ts) for pid, ts in onsets.items() if ts is not None}
    rows = frame[frame['patient_id'].isin(list(known))]
    if rows.empty:
        return pd.DataFrame(columns=columns)
    minutes = (rows['patient_id'].map(known) - rows['timestamp'].astype(np.float64)) / 60.0
    before = minutes >= 0
    rows = rows.loc[before, ['patient_id'] + list(features)].copy()
    rows['bin'] = np.floor(minutes[before] / bin_minutes).astype(np.int64)
    if rows.empty:
        return pd.DataFrame(columns=columns)

    per_patient = rows.groupby(['bin', 'patient_id'], sort=True)[list(features)].mean()
    cohort = per_patient.groupby(level='bin')
    table = pd.DataFrame({
        'minutes_before_onset': cohort.size().index.to_numpy(dtype=np.float64) * bin_minutes,
        'n_patients': cohort.size().to_numpy(),
        'n_beats': rows.groupby('bin', sort=True).size().to_numpy(),
    })
    mean, sd = cohort.mean(), cohort.std(ddof=1)
    for feature in features:
        table[f"{feature}_mean"] = mean[feature].to_numpy()
        table[f"{feature}_sd"] = sd[feature].to_numpy()
    return table[columns]


# Fold summaries

def summarize_folds(fold_table: pd.DataFrame, keys: Sequence[str] = ('window', 'dataset')) -> pd.DataFrame:
    """Mean and SD across folds of every metric, one row per key combination"""
    keys = [k for k in keys if k in fold_table.columns]
    metrics = [m for m in METRIC_COLUMNS if m in fold_table.columns]
    grouped = fold_table.groupby(keys, sort=True)[metrics] if keys else fold_table[metrics]
    mean = grouped.mean().add_suffix('_mean')
    std = grouped.std(ddof=1).add_suffix('_sd')
    if not keys:
        return pd.concat([mean, std]).to_frame().T
    summary = pd.concat([mean, std], axis=1).reset_index()
    ordered = list(keys) + [f"{m}_{s}" for m in metrics for s in ('mean', 'sd')]
    return summary[ordered]


def format_table(summary: pd.DataFrame) -> str:
    """Text table: window x dataset rows, 'mean ± SD' metric cells"""
    metrics = [m for m in METRIC_COLUMNS if f"{m}_mean" in summary.columns]
    keys = [k for k in ('window', 'dataset') if k in summary.columns]
    header = [k.capitalize() for k in keys] + [m.replace('_', '-').upper() if m == 'auc' else m.replace('_', '-')
                                               for m in metrics]
    lines = []
    for _, row in summary.iterrows():
        cells = [str(row[k]) for k in keys]
        for m in metrics:
            mean, sd = row[f"{m}_mean"], row[f"{m}_sd"]
            cells.append('n/a' if not np.isfinite(mean) else
                         f"{mean:.4f} ± {sd:.4f}" if np.isfinite(sd) else f"{mean:.4f}")
        lines.append(cells)
    widths = [max(len(h), *(len(line[i]) for line in lines)) if lines else len(h) for i, h in enumerate(header)]
    out = ['  '.join(h.ljust(w) for h, w in zip(header, widths)),
           '  '.join('-' * w for w in widths)]
    out.extend('  '.join(c.ljust(w) for c, w in zip(line, widths)) for line in lines)
    return '\n'.join(out) + '\n'
