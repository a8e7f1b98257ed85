"""
Retrospective Onset-Anchored Labeling
Zone assignment around the onset (Normal / Buffer / Warning / LeadTime) and
fixed-length model input windows on a 1-minute grid
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from biomarkers import FEATURE_COLUMNS, FeatureMatrix

logger = logging.getLogger(__name__)

WINDOW_LENGTH = 30
TRAIN_STRIDE = 30
EVAL_STRIDE = 5
MAX_GAP_FRACTION = 0.2


class LabelingError(ValueError):
    """Raised for invalid label parameters or a missing onset"""


class Zone(Enum):
    WARNING = 'Warning'
    NORMAL = 'Normal'
    BUFFER = 'Buffer'
    LEAD_TIME = 'LeadTime'
    OUT_OF_RANGE = 'OutOfRange'

    @property
    def label(self) -> Optional[int]:
        return {Zone.WARNING: 1, Zone.NORMAL: 0}.get(self)

    @property
    def dropped(self) -> bool:
        return self.label is None


@dataclass(frozen=True)
class LabelParams:
    """Zone geometry in minutes relative to onset"""

    T_w: float = 360.0
    delta_pre: float = 15.0
    delta_0: float = 15.0
    horizon_start: float = 480.0

    def validate(self) -> "LabelParams":
        if min(self.T_w, self.delta_pre, self.delta_0, self.horizon_start) < 0:
            raise LabelingError("LabelParams must be non-negative")
        if not self.T_w - self.delta_pre > self.delta_0:
            raise LabelingError(f"need T_w - delta_pre > delta_0 ({self.T_w} - {self.delta_pre} <= {self.delta_0})")
        if not self.T_w + self.delta_pre < self.horizon_start:
            raise LabelingError(f"need T_w + delta_pre < horizon_start ({self.T_w} + {self.delta_pre} >= {self.horizon_start})")
        return self

    def zone_measures(self) -> Dict[Zone, float]:
        return {
            Zone.NORMAL: self.horizon_start - (self.T_w + self.delta_pre),
            Zone.BUFFER: 2.0 * self.delta_pre,
            Zone.WARNING: self.T_w - self.delta_pre - self.delta_0,
            Zone.LEAD_TIME: self.delta_0,
        }


def assign_label(t: float, p: LabelParams) -> Zone:
    """
    Zone of time t (minutes relative to onset)

    Normal    [-horizon, -(T_w + delta_pre)]
    Buffer    (-(T_w + delta_pre), -(T_w - delta_pre))
    Warning   [-(T_w - delta_pre), -delta_0]
    LeadTime  (-delta_0, 0]
    The shared point -(T_w + delta_pre) belongs to Normal.
    """
    if t < -p.horizon_start or t > 0:
        return Zone.OUT_OF_RANGE
    if t <= -(p.T_w + p.delta_pre):
        return Zone.NORMAL
    if t < -(p.T_w - p.delta_pre):
        return Zone.BUFFER
    if t <= -p.delta_0:
        return Zone.WARNING
    return Zone.LEAD_TIME


@dataclass
class LabeledWindow:
    patient_id: str
    t_center: float
    label: int
    features: np.ndarray          # L x F, gap-free
    zone: Zone = Zone.NORMAL
    segment_id: str = ""


@dataclass
class LabeledDataset:
    windows: List[LabeledWindow]
    columns: Sequence[str] = FEATURE_COLUMNS
    L: int = WINDOW_LENGTH
    stride: int = TRAIN_STRIDE
    params: LabelParams = field(default_factory=LabelParams)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def X(self) -> np.ndarray:
        """N x F x L tensor (channels first)"""
        if not self.windows:
            return np.zeros((0, len(self.columns), self.L))
        return np.stack([w.features.T for w in self.windows]).astype(np.float64)

    @property
    def y(self) -> np.ndarray:
        return np.array([w.label for w in self.windows], dtype=np.int64)

    @property
    def patient_ids(self) -> np.ndarray:
        return np.array([w.patient_id for w in self.windows], dtype=object)

    def patients(self) -> List[str]:
        return list(dict.fromkeys(w.patient_id for w in self.windows))

    def subset(self, patients: Sequence[str]) -> "LabeledDataset":
        keep = set(patients)
        return LabeledDataset([w for w in self.windows if w.patient_id in keep],
                              self.columns, self.L, self.stride, self.params)

    def select_columns(self, columns: Sequence[str]) -> "LabeledDataset":
        index = [list(self.columns).index(c) for c in columns]
        windows = [LabeledWindow(w.patient_id, w.t_center, w.label, w.features[:, index], w.zone, w.segment_id)
                   for w in self.windows]
        return LabeledDataset(windows, tuple(columns), self.L, self.stride, self.params)

    def manifest(self) -> dict:
        return {
            'L': self.L,
            'F': len(self.columns),
            'stride': self.stride,
            'columns': list(self.columns),
            'label_params': asdict(self.params),
            'n_windows': len(self.windows),
            'n_warning': int(self.y.sum()) if self.windows else 0,
        }

    def to_frame(self) -> pd.DataFrame:
        value_columns = [f"{c}@{j}" for j in range(self.L) for c in self.columns]
        rows = [[w.patient_id, w.t_center, w.label] + w.features.reshape(-1).tolist() for w in self.windows]
        return pd.DataFrame(rows, columns=['patient_id', 't_center', 'label'] + value_columns)

    def to_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.12g', lineterminator='\n')
        with open(path + '.json', 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    @classmethod
    def from_csv(cls, path: str) -> "LabeledDataset":
        with open(path + '.json', 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        frame = pd.read_csv(path, dtype={'patient_id': str})
        L, columns = manifest['L'], tuple(manifest['columns'])
        values = frame.iloc[:, 3:].to_numpy(dtype=np.float64).reshape(len(frame), L, len(columns))
        windows = [LabeledWindow(str(pid), float(t), int(label), values[i],
                                 Zone.WARNING if int(label) == 1 else Zone.NORMAL)
                   for i, (pid, t, label) in enumerate(zip(frame['patient_id'], frame['t_center'], frame['label']))]
        return cls(windows, columns, L, manifest['stride'], LabelParams(**manifest['label_params']))


def aggregate_minutes(rows: pd.DataFrame, onset: float, horizon_start: float,
                      columns: Sequence[str] = FEATURE_COLUMNS) -> pd.DataFrame:
    """
    Per-feature median on right-closed minute bins (k-1, k], k = -horizon+1 .. 0

    The returned frame is indexed by k; empty minutes are all-gap rows and
    'segment_id' is None where a minute holds beats of more than one segment.
    """
    first = int(-math.floor(horizon_start)) + 1
    grid = pd.RangeIndex(first, 1, name='minute')
    minutes = np.ceil((rows['timestamp'].to_numpy(dtype=np.float64) - onset) / 60.0).astype(np.int64)
    inside = (minutes >= first) & (minutes <= 0)
    binned = rows.loc[inside, list(columns) + ['segment_id']].copy()
    binned['minute'] = minutes[inside]

    grouped = binned.groupby('minute')
    medians = grouped[list(columns)].median().reindex(grid)
    segments = grouped['segment_id'].agg(lambda s: s.iloc[0] if s.nunique() == 1 else None)
    medians['segment_id'] = segments.reindex(grid)
    return medians


def _fill_window(values: np.ndarray) -> np.ndarray:
    """Forward-fill, then per-feature window mean, then 0.0 for fully gapped features"""
    frame = pd.DataFrame(values)
    means = frame.mean(axis=0)
    filled = frame.ffill().fillna(means).fillna(0.0)
    return filled.to_numpy(dtype=np.float64)


def window_dataset(m: FeatureMatrix, onset: Optional[float], p: LabelParams,
                   L: int = WINDOW_LENGTH, stride: int = TRAIN_STRIDE,
                   patient_id: Optional[str] = None, negative: bool = False) -> List[LabeledWindow]:
    """
    Cut labeled L-minute windows for one patient

    Args:
        m: Feature matrix (rows of other patients are ignored when patient_id is given)
        onset: Onset epoch seconds; for a negative patient, the pseudo-onset at record end
        p: Label parameters
        L: Window length in minutes
        stride: Anchor step in minutes
        patient_id: Patient to window
        negative: Patient has no onset; only Normal-zone windows are emitted

    Returns:
        Windows ordered by t_center
    """
    p.validate()
    if L < 1 or stride < 1:
        raise LabelingError("L and stride must be positive")
    if onset is None or not math.isfinite(onset):
        raise LabelingError("onset missing")

    rows = m.frame if patient_id is None else m.for_patient(patient_id)
    if rows.empty:
        return []
    if patient_id is None:
        ids = rows['patient_id'].unique()
        if len(ids) != 1:
            raise LabelingError("window_dataset needs a single patient or an explicit patient_id")
        patient_id = str(ids[0])

    grid = aggregate_minutes(rows, onset, p.horizon_start)
    values = grid[list(FEATURE_COLUMNS)].to_numpy(dtype=np.float64)
    segments = grid['segment_id'].tolist()
    first = int(grid.index[0])

    windows = []
    k0 = first
    while k0 + L - 1 <= 0:
        zones = {assign_label(k - 1, p) for k in range(k0, k0 + L)} | \
                {assign_label(k, p) for k in range(k0, k0 + L)}
        if len(zones) == 1:
            zone = zones.pop()
            if zone.label is not None and not (negative and zone is not Zone.NORMAL):
                window = _cut(values, segments, k0 - first, L, patient_id, zone, k0)
                if window is not None:
                    windows.append(window)
        k0 += stride
    return windows


def _cut(values: np.ndarray, segments: list, offset: int, L: int,
         patient_id: str, zone: Zone, k0: int) -> Optional[LabeledWindow]:
    block = values[offset:offset + L]
    if np.isnan(block).mean() > MAX_GAP_FRACTION:
        return None
    seen = segments[offset:offset + L]
    ids = {s for s in seen if isinstance(s, str)}
    populated = ~np.all(np.isnan(block), axis=1)
    if len(ids) != 1 or any(s is None and has for s, has in zip(seen, populated)):
        # window would cross a source segment boundary
        return None
    t_center = (k0 - 1) + L / 2.0
    return LabeledWindow(patient_id, t_center, zone.label, _fill_window(block), zone, ids.pop())


def baseline_overlap(m: FeatureMatrix, onsets: Dict[str, Optional[float]], p: LabelParams) -> Dict[str, float]:
    """
    Minutes of each patient's baseline period that lie inside the labeled span

    The _Rel columns compare against the first baseline_window seconds of a
    record. When those beats fall after -horizon_start they also feed labeled
    windows; 0.0 means the baseline is clear of them.
    """
    overlap: Dict[str, float] = {}
    for patient_id in sorted(m.patients()):
        if patient_id not in onsets:
            continue
        stamps = m.for_patient(patient_id)['timestamp']
        onset = onsets[patient_id]
        if onset is None:
            onset = float(stamps.max())
        start = float(stamps.min())
        end = min(start + m.baseline_window, onset)
        labeled_from = onset - 60.0 * p.horizon_start
        overlap[patient_id] = max(0.0, (end - max(start, labeled_from)) / 60.0)
    return overlap


def label_cohort(m: FeatureMatrix, onsets: Dict[str, Optional[float]], p: LabelParams,
                 L: int = WINDOW_LENGTH, stride: int = TRAIN_STRIDE) -> LabeledDataset:
    """
    Window every patient of the matrix

    Patients with onset None are negatives windowed against a pseudo-onset at
    their last beat; patients absent from the onset manifest are skipped.
    """
    windows: List[LabeledWindow] = []
    for patient_id in sorted(m.patients()):
        if patient_id not in onsets:
            logger.warning("Skipping %s: no entry in onset manifest", patient_id)
            continue
        onset = onsets[patient_id]
        negative = onset is None
        if negative:
            onset = float(m.for_patient(patient_id)['timestamp'].max())
        windows.extend(window_dataset(m, onset, p, L, stride, patient_id=patient_id, negative=negative))
    windows.sort(key=lambda w: (w.patient_id, w.t_center))
    logger.info("Labeled %d windows (%d warning) at T_w=%g", len(windows),
                sum(w.label for w in windows), p.T_w)
    return LabeledDataset(windows, FEATURE_COLUMNS, L, stride, p)
