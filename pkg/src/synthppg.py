"""
Synthetic PPG Cohort Generator
Two-Gaussian beat model with HR jitter, additive noise and pre-onset drift.
Every record carries analytic ground truth so downstream stages can be oracled.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ingest import Waveform
from seeding import canonical_json, philox_generator

logger = logging.getLogger(__name__)

# 2019-01-01T00:00:00Z; patient i starts i days later
COHORT_EPOCH = 1546300800.0
RISK_FLAGS = ('hypertension', 'diabetes', 'hyperlipidemia', 'ckd', 'ihd')


@dataclass(frozen=True)
class BeatModel:
    """
    One beat as a systolic plus a diastolic Gaussian

    Centres and widths are fractions of the beat period t_pi; the diastolic
    amplitude is a2_ratio * a1 so that amplitude drift scales the whole beat.
    """

    a1: float = 1.0
    mu1: float = 0.25
    sigma1: float = 0.06
    a2_ratio: float = 0.25
    mu2: float = 0.55
    sigma2: float = 0.10
    baseline: float = 0.0
    t_pi: float = 1.0

    @property
    def a2(self) -> float:
        return self.a2_ratio * self.a1

    def validate(self) -> "BeatModel":
        if not 0 < self.mu1 < self.mu2 < 1:
            raise ValueError(f"BeatModel needs 0 < mu1 < mu2 < 1, got mu1={self.mu1}, mu2={self.mu2}")
        if not self.a1 > self.a2 >= 0:
            raise ValueError(f"BeatModel needs a1 > a2 >= 0, got a1={self.a1}, a2={self.a2}")
        if not (self.sigma1 > 0 and self.sigma2 > 0 and self.t_pi > 0):
            raise ValueError("BeatModel widths and period must be positive")
        return self


@dataclass(frozen=True)
class DriftSpec:
    """Linear pre-onset drift of the systolic centre and amplitude"""

    delta_tsp: float = 0.0    # fractional change of mu1 per hour
    delta_asp: float = 0.0    # fractional change of a1 per hour
    window_s: float = 360 * 60.0
    noise: float = 0.0        # white noise SD as a fraction of a1
    hr_jitter: float = 0.0    # beat-period SD as a fraction of t_pi

    def factors(self, hours: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return 1.0 + self.delta_tsp * hours, 1.0 + self.delta_asp * hours

    def validate_for(self, model: BeatModel) -> "DriftSpec":
        if self.noise < 0 or self.hr_jitter < 0 or self.window_s < 0:
            raise ValueError("DriftSpec noise, jitter and window must be non-negative")
        hours = np.array([0.0, self.window_s / 3600.0])
        tsp_factor, asp_factor = self.factors(hours)
        if np.any(tsp_factor <= 0) or np.any(model.mu1 * tsp_factor >= model.mu2):
            raise ValueError(f"invariant-violating drift: mu1 would leave (0, mu2) under delta_tsp={self.delta_tsp}")
        if np.any(asp_factor <= 0):
            raise ValueError(f"invariant-violating drift: a1 would become non-positive under delta_asp={self.delta_asp}")
        return self


@dataclass
class GroundTruth:
    """Analytic per-beat truth for one synthetic record"""

    beat_start_s: np.ndarray
    t_pi: np.ndarray
    sp_idx: np.ndarray
    on_idx: np.ndarray
    true_tsp: np.ndarray
    true_asp: np.ndarray
    onset_s: Optional[float] = None

    def spans(self) -> List[Tuple[int, int]]:
        return list(zip(self.on_idx[:-1].tolist(), self.on_idx[1:].tolist()))


@dataclass
class CohortParams:
    """Sampling ranges and drift for a synthetic cohort"""

    n_pos: int = 20
    n_neg: int = 20
    duration_min: float = 480.0
    fs: float = 125.0
    hr_bpm: Tuple[float, float] = (60.0, 90.0)
    hr_jitter: float = 0.02
    mu1: Tuple[float, float] = (0.22, 0.28)
    sigma1: Tuple[float, float] = (0.05, 0.07)
    a2_ratio: Tuple[float, float] = (0.2, 0.3)
    mu2: Tuple[float, float] = (0.52, 0.58)
    sigma2: Tuple[float, float] = (0.09, 0.11)
    baseline: Tuple[float, float] = (0.0, 0.5)
    noise: float = 0.02
    delta_tsp: float = 0.05
    delta_asp: float = -0.05
    drift_min: float = 360.0
    id_prefix: str = "P"
    epoch: float = COHORT_EPOCH
    sample_format: str = '%.5f'

    @classmethod
    def from_dict(cls, data: dict) -> "CohortParams":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        for key, value in known.items():
            if isinstance(getattr(cls, key, None), tuple) and isinstance(value, list):
                known[key] = tuple(value)
        return cls(**known)

    def validate(self) -> "CohortParams":
        if self.n_pos + self.n_neg < 10:
            raise ValueError("cohort needs n_pos + n_neg >= 10 for cross-validation")
        if self.drift_min > self.duration_min:
            raise ValueError("drift window cannot exceed the record duration")
        return self


@dataclass
class CohortManifest:
    root: str
    waveform_files: Dict[str, str] = field(default_factory=dict)
    onsets: Dict[str, Optional[float]] = field(default_factory=dict)
    strata: Dict[str, dict] = field(default_factory=dict)
    notes_file: str = ""


def synth_record(model: BeatModel, duration: float, fs: float, drift: DriftSpec,
                 onset_at: Optional[float], seed: int, stream: int = 0,
                 t0: float = 0.0, patient_id: str = "SYN") -> Tuple[Waveform, GroundTruth]:
    """
    Synthesize one PPG record

    Args:
        model: Nominal beat model
        duration: Record length in seconds
        fs: Sampling rate in Hz
        drift: Drift, noise and jitter; drift is active on [onset_at - window_s, onset_at)
        onset_at: Onset time in seconds from record start, None for no onset
        seed, stream: Philox key words
        t0: Absolute time of sample 0
        patient_id: Identifier written into the waveform

    Returns:
        (Waveform, GroundTruth)
    """
    model.validate()
    if onset_at is not None:
        drift.validate_for(model)
    rng = philox_generator(seed, stream)

    n = int(round(duration * fs))
    if n < 2:
        raise ValueError("duration too short for a single sample pair")

    # Beat periods, drawn in blocks until they cover the record
    periods: List[np.ndarray] = []
    covered = 0.0
    while covered < duration:
        block = model.t_pi * (1.0 + drift.hr_jitter * rng.standard_normal(int(duration / model.t_pi) + 16))
        block = np.clip(block, 0.5 * model.t_pi, 1.5 * model.t_pi)
        periods.append(block)
        covered += float(block.sum())
    t_pi = np.concatenate(periods)
    starts = np.concatenate(([0.0], np.cumsum(t_pi)[:-1]))
    keep = starts < duration
    starts, t_pi = starts[keep], t_pi[keep]

    if onset_at is not None:
        drift_start = onset_at - drift.window_s
        hours = np.clip(starts - drift_start, 0.0, drift.window_s) / 3600.0
    else:
        hours = np.zeros_like(starts)
    tsp_factor, asp_factor = drift.factors(hours)
    mu1 = model.mu1 * tsp_factor
    a1 = model.a1 * asp_factor

    clean = np.full(n, model.baseline, dtype=np.float64)
    centres = starts + mu1 * t_pi
    for k in range(starts.size):
        period = t_pi[k]
        lo = max(0, int(np.floor((starts[k] - period) * fs)))
        hi = min(n, int(np.ceil((starts[k] + 2.0 * period) * fs)) + 1)
        if hi <= lo:
            continue
        t = np.arange(lo, hi, dtype=np.float64) / fs
        systolic = np.exp(-0.5 * ((t - centres[k]) / (model.sigma1 * period)) ** 2)
        diastolic = np.exp(-0.5 * ((t - (starts[k] + model.mu2 * period)) / (model.sigma2 * period)) ** 2)
        clean[lo:hi] += a1[k] * (systolic + model.a2_ratio * diastolic)

    samples = clean
    if drift.noise > 0:
        samples = clean + drift.noise * model.a1 * rng.standard_normal(n)

    sp_idx = np.round(centres * fs).astype(np.int64)
    inside = sp_idx < n
    sp_idx = sp_idx[inside]
    on_idx = np.empty_like(sp_idx)
    previous = 0
    for k, peak in enumerate(sp_idx):
        on_idx[k] = previous + int(np.argmin(clean[previous:peak + 1]))
        previous = int(peak)

    truth = GroundTruth(
        beat_start_s=starts[inside], t_pi=t_pi[inside], sp_idx=sp_idx, on_idx=on_idx,
        true_tsp=(mu1 * t_pi)[inside], true_asp=a1[inside], onset_s=onset_at)
    return Waveform(samples, fs, t0, patient_id), truth


def beat_train(n_beats: int, fs: float = 125.0, model: BeatModel = BeatModel(),
               amplitude_scale: Optional[Dict[int, float]] = None) -> Tuple[Waveform, GroundTruth]:
    """Noise-free constant-rate train of n_beats beats, optionally rescaling single beats"""
    waveform, truth = synth_record(model, n_beats * model.t_pi, fs, DriftSpec(), None, seed=0)
    if not amplitude_scale:
        return waveform, truth

    samples = np.full(len(waveform), model.baseline)
    for k in range(n_beats):
        single = replace(model, a1=model.a1 * amplitude_scale.get(k, 1.0), baseline=0.0)
        lo = max(0, int(np.floor((k - 1) * model.t_pi * fs)))
        hi = min(len(waveform), int(np.ceil((k + 2) * model.t_pi * fs)) + 1)
        t = np.arange(lo, hi) / fs - k * model.t_pi
        period = model.t_pi
        samples[lo:hi] += single.a1 * (
            np.exp(-0.5 * ((t - single.mu1 * period) / (single.sigma1 * period)) ** 2)
            + single.a2_ratio * np.exp(-0.5 * ((t - single.mu2 * period) / (single.sigma2 * period)) ** 2))
    return waveform.with_samples(samples), truth


def sample_beat_model(params: CohortParams, rng: np.random.Generator) -> BeatModel:
    hr = rng.uniform(*params.hr_bpm)
    return BeatModel(
        a1=1.0,
        mu1=rng.uniform(*params.mu1),
        sigma1=rng.uniform(*params.sigma1),
        a2_ratio=rng.uniform(*params.a2_ratio),
        mu2=rng.uniform(*params.mu2),
        sigma2=rng.uniform(*params.sigma2),
        baseline=rng.uniform(*params.baseline),
        t_pi=60.0 / hr,
    ).validate()


def sample_strata(rng: np.random.Generator) -> dict:
    """Demographics and comorbidity flags for subgroup reports"""
    age = int(np.clip(np.round(rng.normal(67.0, 15.0)), 18, 100))
    sex = 'F' if rng.random() < 0.5 else 'M'
    race = str(rng.choice(['White', 'Asian', 'Black', 'Other'], p=[0.60, 0.15, 0.10, 0.15]))
    prevalence = {'hypertension': 0.60, 'diabetes': 0.25, 'hyperlipidemia': 0.35, 'ckd': 0.10, 'ihd': 0.25}
    flags = {name: bool(rng.random() < prevalence[name]) for name in RISK_FLAGS}
    return {'age': age, 'sex': sex, 'race': race, 'flags': flags}


def _clock(epoch: float) -> str:
    seconds = int(round(epoch)) % 86400
    hour, minute = divmod(seconds // 60, 60)
    suffix = 'AM' if hour < 12 else 'PM'
    return f"{(hour % 12) or 12}:{minute:02d} {suffix}"


def synth_notes(patient_id: str, record_start: float, onset: Optional[float],
                rng: np.random.Generator) -> List[dict]:
    """Clinical notes whose onset mentions resolve to the true onset"""
    notes = []
    if rng.random() < 0.5:
        notes.append({'note_time': record_start + 3600.0,
                      'text': "History of CVA in 2010, no acute events today. Vitals stable."})

    if onset is None:
        notes.append({'note_time': record_start + 7200.0,
                      'text': rng.choice(["Prior stroke in 2015. No evidence of acute stroke on exam.",
                                          "Routine check, patient resting comfortably, no new deficits."])})
    else:
        style = int(rng.integers(3))
        if style == 0:
            notes.append({'note_time': onset + 60.0 * int(rng.integers(60, 240)),
                          'text': f"Code stroke activated. Acute ischemic stroke, onset at {_clock(onset)}."})
        elif style == 1:
            hours = int(rng.integers(1, 5))
            notes.append({'note_time': onset + 3600.0 * hours,
                          'text': f"New onset left hemiparesis, symptoms began {hours} hours ago."})
        else:
            notes.append({'note_time': onset + 60.0 * int(rng.integers(2, 12)),
                          'text': "Right-sided hemiparesis noted on exam, code stroke called."})

    for k, note in enumerate(notes):
        note['note_id'] = f"{patient_id}-N{k + 1}"
        note['patient_id'] = patient_id
    return notes


def _synth_patient(params: CohortParams, seed: int, index: int, positive: bool, root: str):
    rng = philox_generator(seed, index, 0)
    patient_id = f"{params.id_prefix}{index + 1:04d}"
    model = sample_beat_model(params, rng)
    strata = sample_strata(rng)
    duration = params.duration_min * 60.0
    t0 = params.epoch + index * 86400.0
    onset_at = duration if positive else None
    drift = DriftSpec(
        delta_tsp=params.delta_tsp if positive else 0.0,
        delta_asp=params.delta_asp if positive else 0.0,
        window_s=params.drift_min * 60.0,
        noise=params.noise,
        hr_jitter=params.hr_jitter)

    waveform, _ = synth_record(model, duration, params.fs, drift, onset_at, seed,
                               stream=index + 1, t0=t0, patient_id=patient_id)
    path = os.path.join(root, 'waveforms', f"{patient_id}.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"# fs={params.fs:g} t0={t0:.3f} patient={patient_id}\n")
        np.savetxt(f, waveform.samples, fmt=params.sample_format)

    onset = t0 + duration if positive else None
    notes = synth_notes(patient_id, t0, onset, rng)
    return patient_id, path, onset, strata, asdict(model), notes


def synth_cohort(root: str, params: CohortParams, seed: int, jobs: int = 1,
                 progress_callback: Optional[Callable[[int, int], None]] = None) -> CohortManifest:
    """
    Write a synthetic cohort: waveforms/*.csv, onsets.json, strata.json,
    notes.jsonl and generator.json

    Positives occupy indices [0, n_pos) and carry drift plus an onset at the
    end of their record; negatives are drift-free records of equal length.
    """
    params.validate()
    os.makedirs(root, exist_ok=True)
    total = params.n_pos + params.n_neg
    tasks = [(i, i < params.n_pos) for i in range(total)]

    results = [None] * total
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = {pool.submit(_synth_patient, params, seed, i, positive, root): i for i, positive in tasks}
        for done, future in enumerate(futures, start=1):
            results[futures[future]] = future.result()
            if progress_callback:
                progress_callback(done, total)

    manifest = CohortManifest(root=root, notes_file=os.path.join(root, 'notes.jsonl'))
    models = {}
    with open(manifest.notes_file, 'w', encoding='utf-8', newline='\n') as notes_out:
        for patient_id, path, onset, strata, model, notes in results:
            manifest.waveform_files[patient_id] = path
            manifest.onsets[patient_id] = onset
            manifest.strata[patient_id] = strata
            models[patient_id] = model
            for note in notes:
                notes_out.write(canonical_json(note) + '\n')

    _write_json(os.path.join(root, 'onsets.json'), manifest.onsets)
    _write_json(os.path.join(root, 'strata.json'), manifest.strata)
    _write_json(os.path.join(root, 'generator.json'), {
        'prng': 'numpy Philox (key = seed, patient stream)',
        'seed': seed,
        'params': asdict(params),
        'beat_models': models,
    })
    logger.info("Synthesized %d patients (%d with onset) under %s", total, params.n_pos, root)
    return manifest


def _write_json(path: str, payload) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')

