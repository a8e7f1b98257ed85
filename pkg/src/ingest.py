"""
Waveform Ingestion Utilities for the PPG Stroke Early-Warning Pipeline
Handles waveform loading, validation, resampling and band-pass filtering
"""

import logging
import os
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import signal

logger = logging.getLogger(__name__)


class WaveformFormatError(ValueError):
    """Raised when a waveform file cannot be parsed"""


class FilterDesignError(ValueError):
    """Raised when a band-pass filter cannot be applied to a segment"""


@dataclass
class Waveform:
    """Uniformly sampled PPG record with an absolute time origin"""

    samples: np.ndarray
    fs: float
    t0: float
    patient_id: str
    channel: str = "PPG"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 2:
            raise ValueError("Waveform needs at least 2 samples")
        if not self.fs > 0:
            raise ValueError(f"Sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return (self.samples.size - 1) / self.fs

    def time_of(self, index) -> np.ndarray:
        """Absolute time of sample index (t0 + i/fs)"""
        return self.t0 + np.asarray(index, dtype=np.float64) / self.fs

    def with_samples(self, samples: np.ndarray, fs: Optional[float] = None) -> "Waveform":
        return Waveform(samples, self.fs if fs is None else fs, self.t0, self.patient_id, self.channel)


@dataclass
class SourceSegment:
    """One contiguous run of finite samples from a single source file"""

    waveform: Waveform
    source_file_id: str

    def map(self, fn) -> "SourceSegment":
        """Apply a Waveform -> Waveform transform without leaving the segment"""
        return SourceSegment(fn(self.waveform), self.source_file_id)


@dataclass
class WaveformHeader:
    fs: Optional[float] = None
    t0: Optional[float] = None
    patient_id: Optional[str] = None
    extras: dict = field(default_factory=dict)


class WaveformProcessor:
    """Handles waveform file I/O and signal conditioning for the pipeline"""

    SUPPORTED_FORMATS = {'.csv', '.txt'}
    CANONICAL_FS = 125.0
    PASSBAND = (0.5, 12.0)
    FILTER_ORDER = 4
    SETTLING_LEVEL = 0.01

    HEADER_PATTERN = re.compile(r"(\w+)=(\S+)")

    @staticmethod
    def is_supported_format(file_path: str) -> bool:
        """Check if the file format is supported"""
        _, ext = os.path.splitext(file_path.lower())
        return ext in WaveformProcessor.SUPPORTED_FORMATS

    @staticmethod
    def parse_header(line: str, fs_hint: Optional[float] = None) -> WaveformHeader:
        """
        Parse the '# fs=<Hz> t0=<epoch-seconds> patient=<id>' header line

        Args:
            line: First line of the file
            fs_hint: Sampling rate to use when the header omits fs

        Returns:
            WaveformHeader with every required field set
        """
        if not line.startswith('#'):
            raise WaveformFormatError("malformed header: first line must start with '#'")

        fields = dict(WaveformProcessor.HEADER_PATTERN.findall(line))
        header = WaveformHeader()
        try:
            if 'fs' in fields:
                header.fs = float(fields.pop('fs'))
            elif fs_hint is not None:
                header.fs = float(fs_hint)
            header.t0 = float(fields.pop('t0')) if 't0' in fields else None
        except ValueError as e:
            raise WaveformFormatError(f"malformed header: {e}") from e
        header.patient_id = fields.pop('patient', None)
        header.extras = fields

        if header.fs is None or not np.isfinite(header.fs) or header.fs <= 0:
            raise WaveformFormatError("malformed header: missing or invalid fs")
        if header.t0 is None or not np.isfinite(header.t0):
            raise WaveformFormatError("malformed header: missing or invalid t0")
        if not header.patient_id:
            raise WaveformFormatError("malformed header: missing patient")
        return header

    @staticmethod
    def load_waveform(path: str, fs_hint: Optional[float] = None) -> List[SourceSegment]:
        """
        Load a CSV waveform file into contiguous SourceSegments

        Rows with a non-finite amplitude split the record at that row; the
        offending row belongs to neither side.

        Args:
            path: Path to the waveform CSV
            fs_hint: Sampling rate used when the header has none

        Returns:
            List of SourceSegment, in file order
        """
        if not os.path.exists(path):
            raise WaveformFormatError(f"missing file: {path}")

        with open(path, 'r', encoding='utf-8') as f:
            first_line = f.readline().strip()
        header = WaveformProcessor.parse_header(first_line, fs_hint)

        frame = pd.read_csv(path, skiprows=1, header=None, skip_blank_lines=True,
                            dtype=str, keep_default_na=False)
        if frame.shape[1] not in (1, 2):
            raise WaveformFormatError(f"malformed body: expected 1 or 2 columns, got {frame.shape[1]}")

        amplitude = pd.to_numeric(frame.iloc[:, -1].str.strip(), errors='coerce').to_numpy(dtype=np.float64)
        if frame.shape[1] == 2:
            times = pd.to_numeric(frame.iloc[:, 0].str.strip(), errors='coerce').to_numpy(dtype=np.float64)
            finite_t = times[np.isfinite(times)]
            if finite_t.size > 1 and np.any(np.diff(finite_t) <= 0):
                raise WaveformFormatError("non-monotone timestamps")
        else:
            times = header.t0 + np.arange(amplitude.size, dtype=np.float64) / header.fs

        good = np.isfinite(amplitude) & np.isfinite(times)
        base_name = os.path.basename(path)
        segments = []
        for start, stop in WaveformProcessor._finite_runs(good):
            if stop - start < 2:
                logger.warning("Dropping %d-sample fragment at row %d of %s", stop - start, start, base_name)
                continue
            waveform = Waveform(amplitude[start:stop], header.fs, float(times[start]), header.patient_id)
            segments.append(SourceSegment(waveform, f"{base_name}#{len(segments)}"))

        logger.debug("Loaded %s: %d segment(s), fs=%.3f", base_name, len(segments), header.fs)
        return segments

    @staticmethod
    def _finite_runs(mask: np.ndarray) -> List[Tuple[int, int]]:
        """Half-open [start, stop) runs where mask is True"""
        padded = np.concatenate(([False], mask, [False]))
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        return list(zip(edges[::2].tolist(), edges[1::2].tolist()))

    @staticmethod
    def save_waveform(w: Waveform, path: str) -> str:
        """Write a waveform in the single-column CSV format"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(f"# fs={w.fs:g} t0={w.t0:.3f} patient={w.patient_id}\n")
            np.savetxt(f, w.samples, fmt='%.6f')
        return path

    @staticmethod
    def design_bandpass(fs: float, lo: float, hi: float, order: int = FILTER_ORDER) -> np.ndarray:
        """Butterworth band-pass as second-order sections"""
        if not (0 < lo < hi < fs / 2):
            raise FilterDesignError(f"band outside Nyquist: need 0 < {lo} < {hi} < {fs / 2}")
        return signal.butter(order, [lo, hi], btype='bandpass', fs=fs, output='sos')

    @staticmethod
    def settling_samples(sos: np.ndarray, fs: float, lo: float) -> int:
        """Samples until the impulse response stays below SETTLING_LEVEL of its peak"""
        n = int(np.ceil(60.0 / lo * fs))
        impulse = np.zeros(n)
        impulse[0] = 1.0
        response = np.abs(signal.sosfilt(sos, impulse))
        above = np.flatnonzero(response >= WaveformProcessor.SETTLING_LEVEL * response.max())
        return int(above[-1]) + 1

    @staticmethod
    def padding_samples(fs: float, lo: float, hi: float) -> int:
        sos = WaveformProcessor.design_bandpass(fs, lo, hi)
        settling = WaveformProcessor.settling_samples(sos, fs, lo)
        return max(int(np.ceil(fs)), 3 * settling)

    @staticmethod
    def bandpass_filter(w: Waveform, lo: float = PASSBAND[0], hi: float = PASSBAND[1]) -> Waveform:
        """
        Zero-phase Butterworth band-pass (order 4 per pass, forward-backward)

        The segment is extended on both ends by odd reflection about its end
        samples over max(1 s, 3x filter settling) samples, so level and slope
        continue across the edge; the filter state starts at steady state for
        the first extended sample.

        Args:
            w: Input waveform
            lo, hi: Pass band edges in Hz

        Returns:
            Filtered waveform with the same length, fs and t0
        """
        sos = WaveformProcessor.design_bandpass(w.fs, lo, hi)
        pad = max(int(np.ceil(w.fs)), 3 * WaveformProcessor.settling_samples(sos, w.fs, lo))
        if len(w) < 3 * pad:
            raise FilterDesignError(
                f"segment shorter than 3x padding: {len(w)} < {3 * pad} samples")

        filtered = signal.sosfiltfilt(sos, w.samples, padtype='odd', padlen=pad)
        return w.with_samples(filtered)

    @staticmethod
    def resample(w: Waveform, target_fs: float = CANONICAL_FS) -> Waveform:
        """
        Linear-interpolation resampling onto a uniform grid starting at t0

        Output length is floor((N-1) * target_fs / fs) + 1.
        """
        if not target_fs > 0:
            raise ValueError(f"target_fs must be positive, got {target_fs}")
        if target_fs == w.fs:
            return w.with_samples(w.samples.copy())

        n_out = int(np.floor((len(w) - 1) * target_fs / w.fs + 1e-9)) + 1
        positions = np.arange(n_out, dtype=np.float64) * (w.fs / target_fs)
        resampled = np.interp(positions, np.arange(len(w), dtype=np.float64), w.samples)
        return w.with_samples(resampled, fs=float(target_fs))

    @staticmethod
    def condition(segment: SourceSegment, target_fs: float = CANONICAL_FS,
                  band: Tuple[float, float] = PASSBAND) -> SourceSegment:
        """Resample then band-pass one segment (never across segments)"""
        return segment.map(lambda w: WaveformProcessor.bandpass_filter(
            WaveformProcessor.resample(w, target_fs), *band))

    @staticmethod
    def get_waveform_info(w: Waveform) -> dict:
        """Summary information about a waveform"""
        return {
            'patient_id': w.patient_id,
            'fs': w.fs,
            't0': w.t0,
            'n_samples': len(w),
            'duration_s': w.duration,
            'channel': w.channel,
        }
