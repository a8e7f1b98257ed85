"""
Hemodynamic Biomarkers for the PPG Stroke Early-Warning Pipeline
Per-beat timing and amplitude indicators, baseline-relative displacement and
rolling variability, assembled into the 17-column feature matrix
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from kinematics import DerivativeStack, FiducialSet

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = (
    'T_sp', 'SI', 'A_off', 'R_sysdia', 'T_u_Tpi', 'T_b_Tpi', 'T_v', 'T_u_TaTpi',
    'CV_Tpi', 'CV_PA',
    'T_sp_Rel', 'A_sp_Rel', 'SI_Rel', 'DSI_Rel', 'T_c_Rel', 'A_off_Rel', 'A_on_Rel',
)
COLUMN_VERSION = "1"

# Absolute bases kept alongside the 17 indicators
BASE_COLUMNS = ('T_pi', 'PA', 'A_sp', 'A_on', 'T_c', 'DSI')
META_COLUMNS = ('patient_id', 'segment_id', 'timestamp')

RELATIVE_BASES = {
    'T_sp_Rel': 'T_sp',
    'A_sp_Rel': 'A_sp',
    'SI_Rel': 'SI',
    'DSI_Rel': 'DSI',
    'T_c_Rel': 'T_c',
    'A_off_Rel': 'A_off',
    'A_on_Rel': 'A_on',
}
CV_BASES = {'CV_Tpi': 'T_pi', 'CV_PA': 'PA'}

EPS_BASE = 1e-9
BASELINE_WINDOW_S = 3600.0
BASELINE_MIN_BEATS = 30
CV_WINDOW = 30

GAP = float('nan')


@dataclass
class BeatFeatureVector:
    """Absolute per-beat indicators; NaN marks a gap"""

    timestamp: float
    T_sp: float
    T_pi: float
    PA: float
    SI: float
    A_off: float
    R_sysdia: float
    T_u_Tpi: float
    T_b_Tpi: float
    T_v: float
    T_u_TaTpi: float
    A_sp: float
    A_on: float
    T_c: float
    DSI: float
    patient_id: str = ""
    segment_id: str = ""

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class BaselineStats:
    """Per-feature baseline means; a NaN mu_base marks an invalid baseline"""

    patient_id: str
    window_s: float
    mu_base: Dict[str, float] = field(default_factory=dict)
    n_base: Dict[str, int] = field(default_factory=dict)

    def is_valid(self, feature: str) -> bool:
        return self.n_base.get(feature, 0) >= BASELINE_MIN_BEATS and math.isfinite(self.mu_base.get(feature, GAP))


def _optional_time(index: Optional[int], origin: int, fs: float) -> float:
    return GAP if index is None else (index - origin) / fs


def beat_features(f: FiducialSet, d: DerivativeStack, segment_id: str = "") -> BeatFeatureVector:
    """
    Absolute indicators of one valid beat

    Missing optional fiducials (dn, v, c) turn the dependent indicators into
    gaps; nothing is interpolated.
    """
    if not f.valid:
        raise ValueError("beat_features requires a valid beat")
    fs = d.fs
    ppg = d.ppg
    on_value = float(ppg[f.on])
    amplitude = float(ppg[f.sp]) - on_value

    t_sp = (f.sp - f.on) / fs
    t_pi = (f.off - f.on) / fs

    if f.dn is not None:
        t_sys = (f.dn - f.on) / fs
        t_dia = (f.off - f.dn) / fs
        si = amplitude / t_sys if t_sys > 0 else GAP
        r_sysdia = t_sys / t_dia if t_dia > 0 else GAP
        dsi = (float(ppg[f.dn]) - on_value) / amplitude if amplitude != 0 else GAP
    else:
        si = r_sysdia = dsi = GAP

    return BeatFeatureVector(
        timestamp=float(d.t0 + f.on / fs),
        T_sp=t_sp,
        T_pi=t_pi,
        PA=amplitude,
        SI=si,
        A_off=float(ppg[f.off]) - on_value,
        R_sysdia=r_sysdia,
        T_u_Tpi=((f.u - f.on) / fs) / t_pi,
        T_b_Tpi=((f.b - f.on) / fs) / t_pi,
        T_v=_optional_time(f.v, f.sp, fs),
        T_u_TaTpi=((f.u - f.a) / fs) / t_pi,
        A_sp=float(ppg[f.sp]),
        A_on=on_value,
        T_c=_optional_time(f.c, f.on, fs),
        DSI=dsi,
        patient_id=d.patient_id,
        segment_id=segment_id,
    )


def beats_frame(beats: Iterable[BeatFeatureVector]) -> pd.DataFrame:
    columns = list(META_COLUMNS) + [f.name for f in fields(BeatFeatureVector) if f.name not in META_COLUMNS]
    rows = [b.as_row() for b in beats]
    return pd.DataFrame(rows, columns=columns)


def baseline_stats(rows: pd.DataFrame, baseline_window: float = BASELINE_WINDOW_S,
                   features: Sequence[str] = tuple(RELATIVE_BASES.values())) -> BaselineStats:
    """
    Baseline means over the initial stable period of one patient

    The period is the first baseline_window seconds of the record and is not
    checked against the labeled span; records that start less than
    baseline_window before -horizon_start share beats between the reference and
    labeled windows (labeling.baseline_overlap measures it, the label stage logs it).

    Args:
        rows: Per-beat absolute indicators of a single patient
        baseline_window: Period length in seconds from the first beat
        features: Columns to summarize

    Returns:
        BaselineStats; features with fewer than 30 non-gap beats get NaN
    """
    patient_ids = rows['patient_id'].unique() if 'patient_id' in rows else []
    if len(patient_ids) > 1:
        raise ValueError("baseline_stats expects rows of a single patient")
    stats = BaselineStats(patient_id=str(patient_ids[0]) if len(patient_ids) else "", window_s=baseline_window)
    if rows.empty:
        for feature in features:
            stats.mu_base[feature], stats.n_base[feature] = GAP, 0
        return stats

    start = float(rows['timestamp'].min())
    period = rows[(rows['timestamp'] >= start) & (rows['timestamp'] <= start + baseline_window)]
    for feature in features:
        values = period[feature].to_numpy(dtype=np.float64)
        values = values[np.isfinite(values)]
        stats.n_base[feature] = int(values.size)
        if values.size >= BASELINE_MIN_BEATS:
            stats.mu_base[feature] = float(values.mean())
        else:
            stats.mu_base[feature] = GAP
            logger.warning("Baseline invalid for %s/%s: %d beats < %d",
                           stats.patient_id, feature, values.size, BASELINE_MIN_BEATS)
    return stats


def relative_displacement(x, mu_base: float):
    """(x - mu_base) / |mu_base|; gap when |mu_base| < EPS_BASE or the baseline is invalid"""
    if not math.isfinite(mu_base) or abs(mu_base) < EPS_BASE:
        return np.full(np.shape(x), GAP) if np.ndim(x) else GAP
    result = (np.asarray(x, dtype=np.float64) - mu_base) / abs(mu_base)
    return result if np.ndim(x) else float(result)


def rolling_cv(series: Sequence[float], window_beats: int = CV_WINDOW) -> np.ndarray:
    """
    Trailing coefficient of variation over non-gap values

    At beat i the window holds the last window_beats non-gap values up to and
    including i. Gap rows stay gaps, as do warm-up positions and windows whose
    mean is within 1e-9 of zero.
    """
    if window_beats < 2:
        raise ValueError(f"window_beats must be >= 2, got {window_beats}")
    values = pd.Series(np.asarray(series, dtype=np.float64))
    present = values.dropna()
    rolling = present.rolling(window_beats, min_periods=window_beats)
    mean = rolling.mean()
    cv = rolling.std(ddof=1) / mean
    cv[mean.abs() < 1e-9] = np.nan
    return cv.reindex(values.index).to_numpy(dtype=np.float64)


@dataclass
class FeatureMatrix:
    """Time-ordered per-beat rows: metadata, the 17 indicators, then absolute bases"""

    frame: pd.DataFrame
    baseline_window: float = BASELINE_WINDOW_S
    cv_window: int = CV_WINDOW

    COLUMNS = META_COLUMNS + FEATURE_COLUMNS + BASE_COLUMNS

    def __post_init__(self):
        missing = [c for c in self.COLUMNS if c not in self.frame.columns]
        if missing:
            raise ValueError(f"FeatureMatrix missing columns: {missing}")
        self.frame = self.frame[list(self.COLUMNS)].reset_index(drop=True)
        for patient_id, group in self.frame.groupby('patient_id', sort=False):
            if not np.all(np.diff(group['timestamp'].to_numpy()) > 0):
                raise ValueError(f"timestamps not strictly increasing for patient {patient_id}")

    def __len__(self) -> int:
        return len(self.frame)

    def patients(self) -> List[str]:
        return list(dict.fromkeys(self.frame['patient_id'].tolist()))

    def for_patient(self, patient_id: str) -> pd.DataFrame:
        return self.frame[self.frame['patient_id'] == patient_id]

    def manifest(self) -> dict:
        return {
            'column_version': COLUMN_VERSION,
            'feature_columns': list(FEATURE_COLUMNS),
            'columns': list(self.COLUMNS),
            'baseline_window_s': self.baseline_window,
            'cv_window': self.cv_window,
        }

    def to_csv(self, path: str) -> str:
        """CSV with empty cells for gaps, plus '<path>.json' manifest"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.frame.to_csv(path, index=False, na_rep='', float_format='%.12g', lineterminator='\n')
        with open(path + '.json', 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    @classmethod
    def from_csv(cls, path: str) -> "FeatureMatrix":
        frame = pd.read_csv(path, dtype={'patient_id': str, 'segment_id': str})
        manifest_path = path + '.json'
        baseline_window, cv_window = BASELINE_WINDOW_S, CV_WINDOW
        if os.path.exists(manifest_path):
            with open(manifest_path, 'r', encoding='utf-8') as f:
                manifest = json.load(f)
            if manifest.get('column_version') != COLUMN_VERSION:
                raise ValueError(f"column version {manifest.get('column_version')} != {COLUMN_VERSION}")
            baseline_window = manifest.get('baseline_window_s', baseline_window)
            cv_window = manifest.get('cv_window', cv_window)
        return cls(frame, baseline_window, cv_window)

    @classmethod
    def concat(cls, matrices: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not matrices:
            return cls(pd.DataFrame(columns=list(cls.COLUMNS)))
        return cls(pd.concat([m.frame for m in matrices], ignore_index=True),
                   matrices[0].baseline_window, matrices[0].cv_window)


def build_feature_matrix(beats: Sequence[BeatFeatureVector], baselines: BaselineStats,
                         cv_window: int = CV_WINDOW) -> FeatureMatrix:
    """
    Assemble the 17-column matrix for one patient

    _Rel columns apply relative_displacement against the patient's baseline;
    CV columns apply rolling_cv within each source segment.
    """
    frame = beats_frame(beats)
    if frame.empty:
        return FeatureMatrix(pd.DataFrame(columns=list(FeatureMatrix.COLUMNS)),
                             baselines.window_s, cv_window)
    if baselines.patient_id and set(frame['patient_id']) != {baselines.patient_id}:
        raise ValueError("baselines computed from a different patient")

    frame = frame.sort_values(['timestamp'], kind='mergesort').reset_index(drop=True)
    for column, base in RELATIVE_BASES.items():
        if baselines.is_valid(base):
            frame[column] = relative_displacement(frame[base].to_numpy(dtype=np.float64), baselines.mu_base[base])
        else:
            frame[column] = GAP

    for column, base in CV_BASES.items():
        frame[column] = np.nan
        for _, index in frame.groupby('segment_id', sort=False).groups.items():
            frame.loc[index, column] = rolling_cv(frame.loc[index, base].to_numpy(dtype=np.float64), cv_window)

    return FeatureMatrix(frame, baselines.window_s, cv_window)
