"""
Pulse Kinematics for the PPG Stroke Early-Warning Pipeline
Derivative stack (VPG, APG, jerk), beat segmentation and fiducial detection
"""

import csv
import logging
import os
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
from scipy import signal

from ingest import Waveform

logger = logging.getLogger(__name__)


class BeatDetectionError(ValueError):
    """Raised when beats cannot be segmented from a record"""


@dataclass
class DerivativeStack:
    """Smoothed PPG and its first three derivatives, sharing length and fs"""

    ppg: np.ndarray
    vpg: np.ndarray
    apg: np.ndarray
    jerk: np.ndarray
    fs: float
    patient_id: str = ""
    t0: float = 0.0

    def __post_init__(self):
        n = len(self.ppg)
        if not (len(self.vpg) == len(self.apg) == len(self.jerk) == n):
            raise ValueError("DerivativeStack sequences must share one length")

    def __len__(self) -> int:
        return len(self.ppg)


@dataclass(frozen=True)
class BeatSpan:
    onset_idx: int
    offset_idx: int
    patient_id: str = ""

    def __post_init__(self):
        if not self.onset_idx < self.offset_idx:
            raise ValueError(f"BeatSpan onset {self.onset_idx} must precede offset {self.offset_idx}")

    @property
    def length(self) -> int:
        return self.offset_idx - self.onset_idx


@dataclass
class FiducialSet:
    """Per-beat landmark indices; None marks an absent optional fiducial"""

    on: int
    sp: int
    off: int
    u: int
    v: Optional[int]
    a: int
    b: int
    dn: Optional[int] = None
    w: Optional[int] = None
    c: Optional[int] = None
    d: Optional[int] = None
    e: Optional[int] = None
    valid: bool = True

    def as_dict(self) -> Dict[str, Optional[int]]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'valid'}

    @classmethod
    def invalid(cls, span: BeatSpan) -> "FiducialSet":
        return cls(on=span.onset_idx, sp=span.onset_idx, off=span.offset_idx,
                   u=span.onset_idx, v=None, a=span.onset_idx, b=span.onset_idx, valid=False)


class PulseAnalyzer:
    """Stateless beat-level analysis of a derivative stack"""

    MIN_SAMPLES = 5
    # centred 4-point moving average (2x4 MA); zero phase
    SMOOTHING_TAPS = np.array([1.0, 2.0, 2.0, 2.0, 1.0]) / 8.0
    THRESHOLD_WINDOW_S = 2.0
    THRESHOLD_STD_GAIN = 0.5
    REFRACTORY_S = 0.3
    RATE_BOUNDS_BPM = (30.0, 220.0)

    @staticmethod
    def smooth(x: np.ndarray) -> np.ndarray:
        half = len(PulseAnalyzer.SMOOTHING_TAPS) // 2
        padded = np.pad(x, half, mode='edge')
        return np.convolve(padded, PulseAnalyzer.SMOOTHING_TAPS, mode='valid')

    @staticmethod
    def differentiate(x: np.ndarray, fs: float) -> np.ndarray:
        """Central difference (s[i+1] - s[i-1]) * fs / 2, one-sided at the ends"""
        return np.gradient(x, 1.0 / fs)

    @staticmethod
    def derivatives(w: Waveform) -> DerivativeStack:
        """
        Build the derivative stack of a waveform

        Each level is smoothed with the centred 4-point moving average before
        the central difference, so vpg is the exact central difference of the
        returned (smoothed) ppg.
        """
        if len(w) < PulseAnalyzer.MIN_SAMPLES:
            raise BeatDetectionError(f"segment too short: {len(w)} < {PulseAnalyzer.MIN_SAMPLES} samples")

        ppg = PulseAnalyzer.smooth(w.samples)
        vpg = PulseAnalyzer.differentiate(ppg, w.fs)
        apg = PulseAnalyzer.differentiate(PulseAnalyzer.smooth(vpg), w.fs)
        jerk = PulseAnalyzer.differentiate(PulseAnalyzer.smooth(apg), w.fs)
        return DerivativeStack(ppg, vpg, apg, jerk, w.fs, w.patient_id, w.t0)

    @staticmethod
    def adaptive_threshold(ppg: np.ndarray, fs: float) -> np.ndarray:
        """Rolling 2 s mean + 0.5 x rolling standard deviation"""
        window = max(2, int(round(PulseAnalyzer.THRESHOLD_WINDOW_S * fs)))
        rolling = pd.Series(ppg).rolling(window, center=True, min_periods=1)
        std = rolling.std(ddof=0).fillna(0.0).to_numpy()
        return rolling.mean().to_numpy() + PulseAnalyzer.THRESHOLD_STD_GAIN * std

    @staticmethod
    def detect_peaks(d: DerivativeStack) -> np.ndarray:
        threshold = PulseAnalyzer.adaptive_threshold(d.ppg, d.fs)
        distance = max(1, int(np.ceil(PulseAnalyzer.REFRACTORY_S * d.fs)))
        peaks, _ = signal.find_peaks(d.ppg, height=threshold, distance=distance)
        return peaks

    @staticmethod
    def detect_beats(d: DerivativeStack) -> List[BeatSpan]:
        """
        Segment complete cardiac cycles

        Systolic peaks are local maxima above the adaptive threshold with a
        0.3 s refractory spacing. Each onset is the ppg minimum between the
        previous peak and its own peak, searched backward from the peak.

        The first peak has no previous peak: its onset is the minimum since
        the record start, kept only when it lies after the first sample (a
        minimum on the first sample means the foot precedes the record). The
        last cycle closes one median peak-to-next-onset lag after the last
        peak when the record reaches that far. Spans run from one onset to
        the next; intervals outside 30-220 bpm are dropped.
        """
        if len(d) < PulseAnalyzer.THRESHOLD_WINDOW_S * d.fs:
            raise BeatDetectionError(f"segment too short: need {PulseAnalyzer.THRESHOLD_WINDOW_S:g} s of signal")

        peaks = PulseAnalyzer.detect_peaks(d)
        if peaks.size == 0:
            raise BeatDetectionError("no peaks found")

        onsets = []
        lags = []
        previous = 0
        for i, peak in enumerate(peaks):
            # argmin of the reversed slice keeps the minimum closest to the peak
            window = d.ppg[previous:peak + 1][::-1]
            onset = int(peak) - int(np.argmin(window))
            if i > 0:
                onsets.append(onset)
                lags.append(onset - previous)
            elif onset > 0:
                onsets.append(onset)
            previous = int(peak)

        if lags:
            closing = int(peaks[-1]) + int(round(float(np.median(lags))))
            if closing < len(d):
                onsets.append(closing)

        lo_s = 60.0 / PulseAnalyzer.RATE_BOUNDS_BPM[1]
        hi_s = 60.0 / PulseAnalyzer.RATE_BOUNDS_BPM[0]
        spans = []
        for on, off in zip(onsets[:-1], onsets[1:]):
            if off <= on:
                continue
            interval = (off - on) / d.fs
            if lo_s <= interval <= hi_s:
                spans.append(BeatSpan(int(on), int(off), d.patient_id))
        if not spans:
            raise BeatDetectionError("no peaks found: no complete beat within rate bounds")
        return spans

    @staticmethod
    def _local_extrema(x: np.ndarray, start: int, stop: int, kind: str) -> np.ndarray:
        """Interior local extrema of x with index in [start, stop)"""
        lo = max(start, 1)
        hi = min(stop, len(x) - 1)
        if hi <= lo:
            return np.empty(0, dtype=int)
        centre = x[lo:hi]
        left = x[lo - 1:hi - 1]
        right = x[lo + 1:hi + 1]
        if kind == 'max':
            hits = (centre > left) & (centre >= right)
        else:
            hits = (centre < left) & (centre <= right)
        return np.flatnonzero(hits) + lo

    @staticmethod
    def _first(indices: np.ndarray) -> Optional[int]:
        return int(indices[0]) if indices.size else None

    @staticmethod
    def locate_fiducials(d: DerivativeStack, span: BeatSpan) -> FiducialSet:
        """
        Locate PPG/VPG/APG landmarks inside one beat

        Returns a FiducialSet flagged invalid when the systolic peak sits on
        the span boundary or when no upstroke is left between the a-wave and
        the systolic peak.
        """
        on, off = span.onset_idx, span.offset_idx
        ppg, vpg, apg = d.ppg, d.vpg, d.apg

        sp = on + int(np.argmax(ppg[on:off]))
        if sp <= on or sp >= off - 1:
            return FiducialSet.invalid(span)

        u = on + int(np.argmax(vpg[on:sp + 1]))
        a = on + int(np.argmax(apg[on:u + 1]))
        if a >= sp:
            return FiducialSet.invalid(span)

        b_candidates = PulseAnalyzer._local_extrema(apg, a + 1, sp + 1, 'min')
        b = int(b_candidates[0]) if b_candidates.size else a + 1 + int(np.argmin(apg[a + 1:sp + 1]))
        b = min(b, sp)

        v = PulseAnalyzer._first(PulseAnalyzer._local_extrema(vpg, sp + 1, off, 'min'))
        w = None
        if v is not None:
            w = PulseAnalyzer._first(PulseAnalyzer._local_extrema(vpg, v + 1, off, 'max'))

        dn = None
        for j in PulseAnalyzer._local_extrema(ppg, sp + 1, off, 'min'):
            if vpg[j - 1] < 0 < vpg[j + 1]:
                dn = int(j)
                break

        c = d_wave = e = None
        if dn is not None:
            c = PulseAnalyzer._first(PulseAnalyzer._local_extrema(apg, b + 1, off, 'max'))
            if c is not None:
                d_wave = PulseAnalyzer._first(PulseAnalyzer._local_extrema(apg, c + 1, off, 'min'))
            if d_wave is not None:
                e = PulseAnalyzer._first(PulseAnalyzer._local_extrema(apg, d_wave + 1, off, 'max'))

        return FiducialSet(on=on, sp=sp, off=off, u=u, v=v, a=a, b=b,
                           dn=dn, w=w, c=c, d=d_wave, e=e)

    @staticmethod
    def analyze(d: DerivativeStack) -> List[FiducialSet]:
        """Detect beats and locate fiducials for every span"""
        return [PulseAnalyzer.locate_fiducials(d, span) for span in PulseAnalyzer.detect_beats(d)]

    @staticmethod
    def dump_fiducials(fiducials: Iterable[FiducialSet], path: str) -> str:
        """Debug dump: one (beat_index, fiducial_name, sample_index) row per landmark"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['beat_index', 'fiducial_name', 'sample_index'])
            for beat_index, fid in enumerate(fiducials):
                for name, index in fid.as_dict().items():
                    if index is not None:
                        writer.writerow([beat_index, name, index])
        return path
