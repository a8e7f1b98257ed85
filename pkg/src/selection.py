"""
Two-stage feature filtering: effect-size screening, then correlation pruning
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from biomarkers import FEATURE_COLUMNS
from labeling import LabeledDataset

logger = logging.getLogger(__name__)

D_MIN = 0.05
R_MAX = 0.80


class SelectionError(ValueError):
    """Raised when selection cannot produce a usable feature set"""


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Standardized mean difference (mean(b) - mean(a)) / pooled SD

    Zero pooled SD gives 0.0 for equal means and a signed infinity otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("cohens_d needs at least 2 values per group")
    pooled = math.sqrt(((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2))
    diff = float(b.mean() - a.mean())
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / pooled


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Product-moment correlation; NaN when either side has zero variance"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    denominator = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denominator == 0.0:
        return math.nan
    return float(np.clip(np.dot(da, db) / denominator, -1.0, 1.0))


@dataclass
class SelectionReport:
    features: List[str]
    cohens_d: Dict[str, float]
    kept: List[str]
    dropped: Dict[str, dict] = field(default_factory=dict)
    pearson_pairs: List[Tuple[str, str, float]] = field(default_factory=list)
    d_min: float = D_MIN
    r_max: float = R_MAX

    def to_dict(self) -> dict:
        def encode(value: float):
            return value if math.isfinite(value) else ('+inf' if value > 0 else '-inf')

        return {
            'features': self.features,
            'cohens_d': {k: encode(v) for k, v in self.cohens_d.items()},
            'kept': self.kept,
            'dropped': self.dropped,
            'pearson_pairs': [[f1, f2, r] for f1, f2, r in self.pearson_pairs],
            'd_min': self.d_min,
            'r_max': self.r_max,
        }

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path


def _canonical_rank(columns: Sequence[str]) -> Dict[str, int]:
    canonical = {name: i for i, name in enumerate(FEATURE_COLUMNS)}
    extra = sorted(c for c in columns if c not in canonical)
    return {c: canonical[c] if c in canonical else len(canonical) + extra.index(c) for c in columns}


def select_from_means(means: np.ndarray, labels: np.ndarray, columns: Sequence[str],
                      d_min: float = D_MIN, r_max: float = R_MAX) -> SelectionReport:
    """
    Run both stages on an N x F matrix of per-window feature means

    Stage 1 drops |d| <= d_min (d from Normal to Warning windows). Stage 2
    walks pairs with |r| > r_max in descending |r| and drops the member with
    the smaller |d|; on equal |d| the later column in canonical order goes.
    """
    labels = np.asarray(labels)
    if set(np.unique(labels).tolist()) != {0, 1}:
        raise SelectionError("selection needs both Normal and Warning windows")
    columns = list(columns)
    rank = _canonical_rank(columns)

    effect = {c: cohens_d(means[labels == 0, j], means[labels == 1, j]) for j, c in enumerate(columns)}
    report = SelectionReport(features=columns, cohens_d=effect, kept=[], d_min=d_min, r_max=r_max)

    survivors = [c for c in columns if abs(effect[c]) > d_min]
    for c in columns:
        if c not in survivors:
            report.dropped[c] = {'reason': 'LowEffect'}
    survivors.sort(key=rank.get)

    index = {c: j for j, c in enumerate(columns)}
    pairs = []
    for i, f1 in enumerate(survivors):
        for f2 in survivors[i + 1:]:
            r = pearson(means[:, index[f1]], means[:, index[f2]])
            if math.isfinite(r) and abs(r) > r_max:
                pairs.append((f1, f2, r))
    pairs.sort(key=lambda pair: (-abs(pair[2]), rank[pair[0]], rank[pair[1]]))
    report.pearson_pairs = pairs

    alive = set(survivors)
    for f1, f2, r in pairs:
        if f1 not in alive or f2 not in alive:
            continue
        d1, d2 = abs(effect[f1]), abs(effect[f2])
        if d1 < d2 or (d1 == d2 and rank[f1] > rank[f2]):
            victim, keeper = f1, f2
        else:
            victim, keeper = f2, f1
        alive.discard(victim)
        report.dropped[victim] = {'reason': 'Redundant', 'with': keeper, 'r': r}

    report.kept = [c for c in survivors if c in alive]
    if not report.kept:
        raise SelectionError("empty selection")
    logger.info("Selected %d/%d features: %s", len(report.kept), len(columns), ', '.join(report.kept))
    return report


def window_means(dataset: LabeledDataset) -> np.ndarray:
    """N x F per-window feature means"""
    return dataset.X.mean(axis=2)


def select_features(dataset: LabeledDataset, d_min: float = D_MIN, r_max: float = R_MAX,
                    columns: Optional[Sequence[str]] = None) -> SelectionReport:
    """Feature selection on a (training) LabeledDataset"""
    if columns is not None:
        dataset = dataset.select_columns(columns)
    return select_from_means(window_means(dataset), dataset.y, dataset.columns, d_min, r_max)
