"""
Pipeline Configuration and Stages
Resolves the JSON/env/CLI configuration and runs the stages
synth -> parse-notes -> extract -> label -> select -> train -> eval ->
attribute -> report, each writing plain CSV/JSON artifacts plus a manifest.
"""

import json
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from attribution import (AttributionError, attribution_summary, explain_windows, normal_background,
                         save_attributions)
from biomarkers import COLUMN_VERSION, FeatureMatrix, baseline_stats, beat_features, beats_frame, build_feature_matrix
from evaluation import (DECISION_THRESHOLD, TRAJECTORY_FEATURES, StrataSpec, curve_area, feature_trajectories,
                        format_table, metric_report, roc_curve, subgroup_report, summarize_folds)
from ingest import WaveformProcessor
from kinematics import BeatDetectionError, PulseAnalyzer
from labeling import LabeledDataset, LabelParams, baseline_overlap, label_cohort
from noteanchor import load_notes, parse_corpus
from previews import PreviewRenderer
from resnet1d import BlockSpec, ModelCheckpoint, arch_for
from seeding import canonical_json, sha256_file, sha256_text
from selection import select_features
from synthppg import CohortParams, synth_cohort
from training import TrainConfig, apply_checkpoint, train_cv

logger = logging.getLogger(__name__)

ENV_PREFIX = 'STROKEWARN_'
STAGES = ('synth', 'parse-notes', 'extract', 'label', 'select', 'train', 'eval', 'attribute', 'report')
HASH_EXCLUDED = ('jobs',)


class ConfigError(ValueError):
    """Raised for an invalid or incomplete pipeline configuration"""


class StageError(RuntimeError):
    """A stage failure tagged with the stage name"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


# Configuration

@dataclass
class PathsConfig:
    cohort: str = ""
    external_cohort: str = ""
    output: str = "runs/demo"


@dataclass
class SynthConfig:
    enabled: bool = True
    cohort: dict = field(default_factory=dict)
    external: Optional[dict] = None
    external_seed_offset: int = 1


@dataclass
class FeatureConfig:
    fs: float = WaveformProcessor.CANONICAL_FS
    band: Tuple[float, float] = WaveformProcessor.PASSBAND
    baseline_window: float = 3600.0
    cv_window: int = 30
    debug_fiducials: bool = False
    preview: bool = False


@dataclass
class LabelConfig:
    windows: List[float] = field(default_factory=lambda: [360.0])
    delta_pre: float = 15.0
    delta_0: float = 15.0
    horizon_start: float = 480.0
    length: int = 30
    train_stride: int = 30
    eval_stride: int = 5
    onset_source: str = "notes"

    def params(self, T_w: float) -> LabelParams:
        return LabelParams(float(T_w), self.delta_pre, self.delta_0, self.horizon_start).validate()


@dataclass
class SelectionConfig:
    d_min: float = 0.05
    r_max: float = 0.80


@dataclass
class ModelConfig:
    stem_channels: int = 32
    stem_kernel: int = 7
    blocks: List[List[int]] = field(default_factory=lambda: [[32, 5, 1], [64, 5, 2], [64, 3, 1]])
    use_norm: bool = True


@dataclass
class EvalConfig:
    threshold: float = DECISION_THRESHOLD
    n_boot: int = 1000


@dataclass
class AttributionConfig:
    n_instances: int = 20
    instance: int = 0


@dataclass
class PipelineConfig:
    seed: int
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every setting that can change an artifact"""
        data = self.to_dict()
        for key in HASH_EXCLUDED:
            data.pop(key, None)
        data['paths'] = {k: v for k, v in data['paths'].items() if k != 'output'}
        return sha256_text(canonical_json(data))

    def validate(self) -> "PipelineConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not self.labels.windows:
            raise ConfigError("labels.windows must name at least one T_w")
        if self.labels.onset_source not in ('notes', 'manifest'):
            raise ConfigError("labels.onset_source must be 'notes' or 'manifest'")
        if self.labels.length < 1 or self.labels.train_stride < 1 or self.labels.eval_stride < 1:
            raise ConfigError("labels.length and strides must be positive")
        try:
            for T_w in self.labels.windows:
                self.labels.params(T_w)
            self.train.validate()
            self.arch_template(1)
            if self.synth.enabled:
                CohortParams.from_dict(self.synth.cohort).validate()
        except ValueError as e:
            raise ConfigError(str(e))
        if not self.synth.enabled and not self.paths.cohort:
            raise ConfigError("paths.cohort is required when synth is disabled")
        if not 0 < self.selection.r_max <= 1 or self.selection.d_min < 0:
            raise ConfigError("selection thresholds out of range")
        return self

    def arch_template(self, n_features: int):
        blocks = [BlockSpec(*b) for b in self.model.blocks]
        return arch_for(n_features, self.labels.length, blocks, stem_channels=self.model.stem_channels,
                        stem_kernel=self.model.stem_kernel, use_norm=self.model.use_norm)


def _build(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    values = {}
    for name, value in data.items():
        default = _default_of(known[name])
        if is_dataclass(default) and isinstance(value, Mapping):
            value = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        values[name] = value
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}")


def _default_of(f):
    if f.default_factory is not MISSING:
        return f.default_factory()
    return f.default


def _set_path(data: dict, path: Sequence[str], value):
    node = data
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override below non-object key {key!r}")
    node[path[-1]] = value


def env_overrides(environ: Mapping[str, str]) -> Dict[str, object]:
    """STROKEWARN_TRAIN__EPOCHS=10 -> {'train': {'epochs': 10}}; values parse as JSON when they can"""
    overrides: Dict[str, object] = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in key[len(ENV_PREFIX):].split('__') if part]
        if not path:
            continue
        raw = environ[key]
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        _set_path(overrides, path, value)
    return overrides


def _merge(base: dict, extra: Mapping) -> dict:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping] = None) -> PipelineConfig:
    """
    Resolve a PipelineConfig: JSON file, then STROKEWARN_ environment
    variables, then explicit overrides (CLI flags)
    """
    data: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except ValueError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})")
    _merge(data, env_overrides(os.environ if environ is None else environ))
    _merge(data, overrides or {})
    data.pop('$schema', None)
    if 'seed' not in data:
        raise ConfigError("seed is required (set it in the config, STROKEWARN_SEED or --seed)")
    data.setdefault('train', {}).setdefault('seed', data['seed'])
    return _build(PipelineConfig, data, 'config').validate()


# Stage bookkeeping

class StageRun:
    """
    Collects the files a stage writes; on failure removes them and raises
    StageError, on success writes the stage manifest
    """

    def __init__(self, stage: str, config: PipelineConfig, directory: str):
        self.stage = stage
        self.config = config
        self.directory = directory
        self.inputs: List[str] = []
        self.outputs: List[str] = []
        self.extra: dict = {}

    def __enter__(self) -> "StageRun":
        os.makedirs(self.directory, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self._write_manifest()
            return False
        for path in reversed(self.outputs):
            if os.path.isdir(path):
                shutil.rmtree(path, ignore_errors=True)
            elif os.path.exists(path):
                os.remove(path)
        if isinstance(exc, StageError):
            return False
        raise StageError(self.stage, str(exc)) from exc

    def need(self, path: str) -> str:
        if not os.path.exists(path):
            raise StageError(self.stage, f"missing input: {path}")
        self.inputs.append(path)
        return path

    def out(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.outputs.append(path)
        return path

    def _hashes(self, paths: Sequence[str]) -> Dict[str, str]:
        hashes = {}
        for path in paths:
            files = [path] if os.path.isfile(path) else sorted(
                os.path.join(root, name) for root, _, names in os.walk(path) for name in names)
            for name in files:
                hashes[os.path.relpath(name, self.config.paths.output)] = sha256_file(name)
        return hashes

    def _write_manifest(self):
        manifest = {
            'stage': self.stage,
            'config_hash': self.config.config_hash(),
            'seed': self.config.seed,
            'column_version': COLUMN_VERSION,
            'inputs': self._hashes(self.inputs),
            'outputs': self._hashes([p for p in self.outputs if os.path.exists(p)]),
        }
        manifest.update(self.extra)
        path = os.path.join(self.directory, 'manifest.json')
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write('\n')


def _write_json(path: str, payload) -> str:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def _read_json(path: str):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _window_tag(T_w: float) -> str:
    return f"w{T_w:g}"


def _publish_dir(staging: str, target: str) -> str:
    """Move a finished staging directory into place; same-named entries in target are replaced"""
    if not os.path.isdir(target):
        os.makedirs(os.path.dirname(os.path.abspath(target)), exist_ok=True)
        shutil.move(staging, target)
        return target
    for name in sorted(os.listdir(staging)):
        destination = os.path.join(target, name)
        if os.path.isdir(destination):
            shutil.rmtree(destination)
        elif os.path.exists(destination):
            os.remove(destination)
        shutil.move(os.path.join(staging, name), destination)
    shutil.rmtree(staging, ignore_errors=True)
    return target


# Per-patient extraction

def extract_patient(path: str, cfg: FeatureConfig, fiducial_dir: str = "") -> FeatureMatrix:
    """
    Waveform file -> per-beat feature matrix of one patient

    Beats within the band-pass edge extension of either segment end carry the
    filter transient and are left out of the features (the fiducial dump
    still lists them).
    """
    segments = WaveformProcessor.load_waveform(path)
    beats = []
    for segment in segments:
        try:
            conditioned = WaveformProcessor.condition(segment, cfg.fs, tuple(cfg.band))
            stack = PulseAnalyzer.derivatives(conditioned.waveform)
            fiducials = PulseAnalyzer.analyze(stack)
            margin = WaveformProcessor.padding_samples(stack.fs, *cfg.band)
        except (BeatDetectionError, ValueError) as e:
            logger.warning("Skipping segment %s: %s", segment.source_file_id, e)
            continue
        if fiducial_dir:
            name = segment.source_file_id.replace('#', '_').replace('.csv', '')
            PulseAnalyzer.dump_fiducials(fiducials, os.path.join(fiducial_dir, f"{name}.csv"))
        settled = [f for f in fiducials if f.valid and f.on >= margin and f.off <= len(stack) - margin]
        beats.extend(beat_features(f, stack, segment.source_file_id) for f in settled)

    rows = beats_frame(beats)
    baselines = baseline_stats(rows, cfg.baseline_window)
    return build_feature_matrix(beats, baselines, cfg.cv_window)


class Pipeline:
    """
    Runs the stages of one resolved configuration

    Every stage reads its inputs from, and writes its artifacts under,
    config.paths.output.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.paths.output
        self.progress_callback: Optional[Callable[[int, int], None]] = None

    def set_progress_callback(self, callback: Callable[[int, int], None]):
        """Set a callback function for progress updates inside long stages"""
        self.progress_callback = callback

    # Paths

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def cohort_dir(self, dataset: str) -> str:
        paths = self.config.paths
        if dataset == 'internal':
            return paths.cohort or self.path('cohort')
        return paths.external_cohort or self.path('external')

    def datasets(self) -> List[str]:
        has_external = bool(self.config.paths.external_cohort) or \
            (self.config.synth.enabled and self.config.synth.external is not None)
        return ['internal', 'external'] if has_external else ['internal']

    def label_file(self, dataset: str, T_w: float, split: str) -> str:
        return self.path('labels', f"{dataset}_{_window_tag(T_w)}_{split}.csv")

    # Stages

    def synth(self) -> dict:
        cfg = self.config
        if not cfg.synth.enabled:
            logger.info("Synthesis disabled; using %s", self.cohort_dir('internal'))
            return {}
        # Cohorts are written to staging folders under the output tree; only a
        # finished synthesis is moved to the (possibly user-owned) cohort paths.
        staging_root = self.path('synth', 'staging')
        shutil.rmtree(staging_root, ignore_errors=True)
        staged = {}
        with StageRun('synth', cfg, self.path('synth')) as run:
            run.out(staging_root)
            params = CohortParams.from_dict(cfg.synth.cohort)
            staged['internal'] = os.path.join(staging_root, 'internal')
            synth_cohort(staged['internal'], params, cfg.seed, cfg.jobs, self.progress_callback)
            if cfg.synth.external is not None:
                external = CohortParams.from_dict({**cfg.synth.cohort, **cfg.synth.external})
                if 'id_prefix' not in cfg.synth.external:
                    external.id_prefix = 'X'
                staged['external'] = os.path.join(staging_root, 'external')
                synth_cohort(staged['external'], external, cfg.seed + cfg.synth.external_seed_offset, cfg.jobs,
                             self.progress_callback)
            written = {dataset: _publish_dir(staging, self.cohort_dir(dataset)) for dataset, staging in staged.items()}
            shutil.rmtree(staging_root, ignore_errors=True)
            # nothing can fail past this point, so the published folders are only hashed
            run.outputs = list(written.values())
            run.extra['cohorts'] = written
        return written

    def parse_notes(self) -> dict:
        written = {}
        with StageRun('parse-notes', self.config, self.path('notes')) as run:
            for dataset in self.datasets():
                notes = load_notes(run.need(os.path.join(self.cohort_dir(dataset), 'notes.jsonl')))
                result = parse_corpus(notes)
                result.to_csv(run.out(self.path('notes', f"{dataset}_onsets.csv")))
                _write_json(run.out(self.path('notes', f"{dataset}_onsets.json")), result.onset_map())
                run.extra.setdefault('reports', {})[dataset] = result.report()
                written[dataset] = self.path('notes', f"{dataset}_onsets.json")
        return written

    def extract(self) -> dict:
        cfg = self.config
        written = {}
        with StageRun('extract', cfg, self.path('features')) as run:
            for dataset in self.datasets():
                folder = run.need(os.path.join(self.cohort_dir(dataset), 'waveforms'))
                files = sorted(os.path.join(folder, name) for name in os.listdir(folder)
                               if WaveformProcessor.is_supported_format(name))
                if not files:
                    raise StageError('extract', f"no waveform files in {folder}")
                fiducial_dir = self.path('features', 'fiducials', dataset) if cfg.features.debug_fiducials else ""
                if fiducial_dir:
                    run.out(fiducial_dir)

                matrices: List[Optional[FeatureMatrix]] = [None] * len(files)

                def work(i: int):
                    matrices[i] = extract_patient(files[i], cfg.features, fiducial_dir)

                with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                    for done, _ in enumerate(pool.map(work, range(len(files))), start=1):
                        if self.progress_callback:
                            self.progress_callback(done, len(files))

                matrix = FeatureMatrix.concat(matrices)
                target = run.out(self.path('features', f"{dataset}.csv"))
                matrix.to_csv(target)
                run.outputs.append(target + '.json')
                written[dataset] = target
                logger.info("Extracted %d beats from %d %s patients", len(matrix), len(files), dataset)

                if cfg.features.preview and dataset == 'internal':
                    self._fiducial_preview(files[0], run)
        return written

    def _fiducial_preview(self, path: str, run: StageRun):
        segment = WaveformProcessor.load_waveform(path)[0]
        conditioned = WaveformProcessor.condition(segment, self.config.features.fs, tuple(self.config.features.band))
        stack = PulseAnalyzer.derivatives(conditioned.waveform)
        image = PreviewRenderer.fiducial_preview(stack, PulseAnalyzer.analyze(stack))
        PreviewRenderer.save_image(image, run.out(self.path('features', 'preview_fiducials.png')))

    def _onsets(self, dataset: str, run: StageRun) -> Dict[str, Optional[float]]:
        if self.config.labels.onset_source == 'notes':
            return _read_json(run.need(self.path('notes', f"{dataset}_onsets.json")))
        return _read_json(run.need(os.path.join(self.cohort_dir(dataset), 'onsets.json')))

    def label(self) -> dict:
        cfg = self.config
        written = {}
        with StageRun('label', cfg, self.path('labels')) as run:
            for dataset in self.datasets():
                matrix = FeatureMatrix.from_csv(run.need(self.path('features', f"{dataset}.csv")))
                onsets = self._onsets(dataset, run)
                overlap = baseline_overlap(matrix, onsets, cfg.labels.params(cfg.labels.windows[0]))
                flagged = {pid: minutes for pid, minutes in overlap.items() if minutes > 0}
                if flagged:
                    logger.warning("%d/%d %s patients: baseline period reaches into labeled windows (up to %.0f min)",
                                   len(flagged), len(overlap), dataset, max(flagged.values()))
                run.extra.setdefault('baseline_overlap_min', {})[dataset] = flagged
                for T_w in cfg.labels.windows:
                    params = cfg.labels.params(T_w)
                    for split, stride in (('train', cfg.labels.train_stride), ('eval', cfg.labels.eval_stride)):
                        if dataset == 'external' and split == 'train':
                            continue
                        labeled = label_cohort(matrix, onsets, params, cfg.labels.length, stride)
                        target = run.out(self.label_file(dataset, T_w, split))
                        labeled.to_csv(target)
                        run.outputs.append(target + '.json')
                        written[(dataset, T_w, split)] = target
        return written

    def select(self) -> dict:
        cfg = self.config
        written = {}
        with StageRun('select', cfg, self.path('selection')) as run:
            for T_w in cfg.labels.windows:
                dataset = LabeledDataset.from_csv(run.need(self.label_file('internal', T_w, 'train')))
                report = select_features(dataset, cfg.selection.d_min, cfg.selection.r_max)
                written[T_w] = report.save(run.out(self.path('selection', f"{_window_tag(T_w)}.json")))
        return written

    def train(self) -> dict:
        cfg = self.config
        written = {}
        with StageRun('train', cfg, self.path('models')) as run:
            for T_w in cfg.labels.windows:
                dataset = LabeledDataset.from_csv(run.need(self.label_file('internal', T_w, 'train')))
                tag = _window_tag(T_w)
                result = train_cv(dataset, cfg.arch_template(len(dataset.columns)), cfg.train,
                                  cfg.selection.d_min, cfg.selection.r_max, self.progress_callback)
                for checkpoint in result.checkpoints:
                    checkpoint.save(run.out(self.path('models', tag, f"fold{checkpoint.fold}.ckpt")))
                for fold, report in enumerate(result.selections):
                    report.save(run.out(self.path('models', tag, f"fold{fold}_selection.json")))
                table = result.fold_table.copy()
                table.insert(0, 'window', T_w)
                table.to_csv(run.out(self.path('models', tag, 'validation.csv')), index=False,
                             float_format='%.12g', lineterminator='\n')
                _write_json(run.out(self.path('models', tag, 'folds.json')), result.folds)
                written[T_w] = self.path('models', tag)
        return written

    def _checkpoints(self, T_w: float, run: StageRun) -> List[ModelCheckpoint]:
        tag = _window_tag(T_w)
        folds = _read_json(run.need(self.path('models', tag, 'folds.json')))
        return [ModelCheckpoint.load(run.need(self.path('models', tag, f"fold{k}.ckpt"))) for k in range(len(folds))]

    def _strata(self, dataset: str) -> Dict[str, StrataSpec]:
        path = os.path.join(self.cohort_dir(dataset), 'strata.json')
        if not os.path.exists(path):
            return {}
        return {pid: StrataSpec.from_record(pid, record) for pid, record in _read_json(path).items()}

    def evaluate(self) -> dict:
        cfg = self.config
        rows, subgroup_tables = [], []
        with StageRun('eval', cfg, self.path('eval')) as run:
            for T_w in cfg.labels.windows:
                checkpoints = self._checkpoints(T_w, run)
                internal = LabeledDataset.from_csv(run.need(self.label_file('internal', T_w, 'eval')))
                pooled_scores, pooled_labels, pooled_patients = [], [], []
                for checkpoint in checkpoints:
                    held_out = internal.subset(checkpoint.val_patients)
                    row = {'window': T_w, 'dataset': 'internal', 'fold': checkpoint.fold, 'n': len(held_out)}
                    if len(held_out):
                        scores = apply_checkpoint(checkpoint, held_out)
                        row.update(metric_report(scores, held_out.y, cfg.eval.threshold).as_dict())
                        pooled_scores.append(scores)
                        pooled_labels.append(held_out.y)
                        pooled_patients.append(held_out.patient_ids)
                    rows.append(row)

                curves = {}
                if pooled_scores:
                    curves['internal'] = roc_curve(np.concatenate(pooled_scores), np.concatenate(pooled_labels))

                if 'external' in self.datasets():
                    external = LabeledDataset.from_csv(run.need(self.label_file('external', T_w, 'eval')))
                    external_scores = []
                    for checkpoint in checkpoints:
                        row = {'window': T_w, 'dataset': 'external', 'fold': checkpoint.fold, 'n': len(external)}
                        if len(external):
                            scores = apply_checkpoint(checkpoint, external)
                            row.update(metric_report(scores, external.y, cfg.eval.threshold).as_dict())
                            external_scores.append(scores)
                        rows.append(row)
                    if external_scores:
                        curves['external'] = roc_curve(np.concatenate(external_scores),
                                                       np.tile(external.y, len(external_scores)))
                self._save_roc(T_w, curves, run)

                strata = self._strata('internal')
                if pooled_scores and strata:
                    scores = np.concatenate(pooled_scores)
                    table = subgroup_report((scores >= cfg.eval.threshold).astype(np.int64),
                                            np.concatenate(pooled_labels), np.concatenate(pooled_patients),
                                            strata, scores, cfg.eval.n_boot, cfg.seed)
                    table.insert(0, 'window', T_w)
                    subgroup_tables.append(table)

            fold_table = pd.DataFrame(rows)
            fold_table.to_csv(run.out(self.path('eval', 'folds.csv')), index=False,
                              float_format='%.12g', lineterminator='\n')
            summary = summarize_folds(fold_table)
            summary.to_csv(run.out(self.path('eval', 'summary.csv')), index=False,
                           float_format='%.12g', lineterminator='\n')
            with open(run.out(self.path('eval', 'table.txt')), 'w', encoding='utf-8', newline='\n') as f:
                f.write(format_table(summary))
            if subgroup_tables:
                pd.concat(subgroup_tables, ignore_index=True).to_csv(
                    run.out(self.path('eval', 'subgroups.csv')), index=False, float_format='%.12g',
                    lineterminator='\n')
            self._save_trajectories(run)
        return {'folds': self.path('eval', 'folds.csv'), 'summary': self.path('eval', 'summary.csv')}

    def _save_roc(self, T_w: float, curves: Dict[str, pd.DataFrame], run: StageRun):
        """ROC points of the fold models pooled per dataset, as CSV and PNG"""
        tag = _window_tag(T_w)
        tables = [curve.assign(window=T_w, dataset=dataset) for dataset, curve in curves.items() if not curve.empty]
        if not tables:
            logger.warning("No ROC curve for %s: a single class in every evaluation set", tag)
            return
        table = pd.concat(tables, ignore_index=True)[['window', 'dataset', 'threshold', 'fpr', 'tpr']]
        table.to_csv(run.out(self.path('eval', f"roc_{tag}.csv")), index=False, float_format='%.12g',
                     lineterminator='\n')
        run.extra.setdefault('roc_auc', {})[tag] = {d: curve_area(c) for d, c in curves.items() if not c.empty}
        PreviewRenderer.save_image(PreviewRenderer.roc_preview(curves, title=f"ROC at T_w = {T_w:g} min"),
                                   run.out(self.path('eval', f"roc_{tag}.png")))

    def _save_trajectories(self, run: StageRun):
        """Mean pre-onset trajectories of T_sp_Rel, T_sp and A_sp_Rel per dataset"""
        tables = {}
        for dataset in self.datasets():
            matrix = FeatureMatrix.from_csv(run.need(self.path('features', f"{dataset}.csv")))
            tables[dataset] = feature_trajectories(matrix.frame, self._onsets(dataset, run))
        combined = pd.concat([t.assign(dataset=d) for d, t in tables.items()], ignore_index=True)
        combined = combined[['dataset'] + [c for c in combined.columns if c != 'dataset']]
        combined.to_csv(run.out(self.path('eval', 'trajectories.csv')), index=False, float_format='%.12g',
                        lineterminator='\n')
        PreviewRenderer.save_image(PreviewRenderer.trajectory_preview(tables, TRAJECTORY_FEATURES),
                                   run.out(self.path('eval', 'trajectories.png')))

    def attribute(self) -> dict:
        cfg = self.config
        written = {}
        with StageRun('attribute', cfg, self.path('attribution')) as run:
            for T_w in cfg.labels.windows:
                tag = _window_tag(T_w)
                checkpoints = self._checkpoints(T_w, run)
                best = max(checkpoints, key=lambda c: (c.val_macro_f1 if math.isfinite(c.val_macro_f1) else -1.0,
                                                       -c.fold))
                train = LabeledDataset.from_csv(run.need(self.label_file('internal', T_w, 'train')))
                evaluation = LabeledDataset.from_csv(run.need(self.label_file('internal', T_w, 'eval')))
                background = normal_background(train.subset(best.train_patients), best.features)

                held_out = evaluation.subset(best.val_patients)
                order = sorted(range(len(held_out)), key=lambda i: (-held_out.windows[i].label, i))
                chosen = LabeledDataset([held_out.windows[i] for i in order], held_out.columns,
                                        held_out.L, held_out.stride, held_out.params)
                if not len(chosen):
                    raise AttributionError(f"no held-out windows to explain for {tag}")
                results = explain_windows(best, chosen, background, cfg.attribution.n_instances, cfg.jobs,
                                          self.progress_callback)
                instance = min(cfg.attribution.instance, len(results) - 1)
                json_path = run.out(self.path('attribution', f"{tag}.json"))
                csv_path = run.out(self.path('attribution', f"{tag}_phi.csv"))
                save_attributions(results, json_path, csv_path, instance)
                waterfall = attribution_summary(results, instance)['waterfall']
                PreviewRenderer.save_image(PreviewRenderer.waterfall_preview(waterfall),
                                           run.out(self.path('attribution', f"{tag}_waterfall.png")))
                run.extra.setdefault('explained_fold', {})[tag] = best.fold
                written[T_w] = json_path
        return written

    def report(self) -> str:
        cfg = self.config
        with StageRun('report', cfg, self.path('report')) as run:
            summary = pd.read_csv(run.need(self.path('eval', 'summary.csv')))
            lines = ["# Stroke early-warning run", "",
                     f"- seed: {cfg.seed}", f"- config hash: {cfg.config_hash()}", "",
                     "## Cross-validated metrics (mean ± SD over folds)", "", "```",
                     format_table(summary).rstrip('\n'), "```", ""]
            for T_w in cfg.labels.windows:
                tag = _window_tag(T_w)
                selection = self.path('selection', f"{tag}.json")
                if os.path.exists(selection):
                    run.inputs.append(selection)
                    kept = _read_json(selection)['kept']
                    lines += [f"## Selected features at T_w = {T_w:g} min", "", ', '.join(kept), ""]
                attribution = self.path('attribution', f"{tag}.json")
                if os.path.exists(attribution):
                    run.inputs.append(attribution)
                    ranking = _read_json(attribution)['ranking']
                    lines += [f"## Attribution ranking at T_w = {T_w:g} min (mean |phi|, log-odds)", ""]
                    lines += [f"{i + 1}. {r['feature']}: {r['mean_abs_phi']:.4f}" for i, r in enumerate(ranking)]
                    lines.append("")
                roc = self.path('eval', f"roc_{tag}.csv")
                if os.path.exists(roc):
                    run.inputs.append(roc)
                    points = pd.read_csv(roc)
                    counts = ', '.join(f"{d}: {n} points" for d, n in points.groupby('dataset').size().items())
                    lines += [f"## ROC curves at T_w = {T_w:g} min", "", f"![ROC](../eval/roc_{tag}.png)", "",
                              counts, ""]
            trajectories = self.path('eval', 'trajectories.csv')
            if os.path.exists(trajectories):
                run.inputs.append(trajectories)
                table = pd.read_csv(trajectories)
                columns = ['dataset', 'minutes_before_onset', 'n_patients'] + [f"{f}_mean" for f in TRAJECTORY_FEATURES]
                lines += ["## Pre-onset trajectories (cohort mean per bin)", "", "![trajectories](../eval/trajectories.png)",
                          "", "```", table[columns].to_string(index=False, float_format='%.4f'), "```", ""]
            subgroups = self.path('eval', 'subgroups.csv')
            if os.path.exists(subgroups):
                run.inputs.append(subgroups)
                table = pd.read_csv(subgroups)
                columns = [c for c in ('window', 'attribute', 'subgroup', 'n_patients', 'f1', 'auc', 'p_value')
                           if c in table.columns]
                lines += ["## Subgroups", "", "```", table[columns].to_string(index=False, float_format='%.4f'),
                          "```", ""]
            target = run.out(self.path('report', 'report.md'))
            with open(target, 'w', encoding='utf-8', newline='\n') as f:
                f.write('\n'.join(lines))
        return target

    STAGE_METHODS = {
        'synth': 'synth',
        'parse-notes': 'parse_notes',
        'extract': 'extract',
        'label': 'label',
        'select': 'select',
        'train': 'train',
        'eval': 'evaluate',
        'attribute': 'attribute',
        'report': 'report',
    }

    def run_stage(self, stage: str):
        if stage not in self.STAGE_METHODS:
            raise ConfigError(f"unknown stage {stage!r}")
        logger.info("Stage %s", stage)
        return getattr(self, self.STAGE_METHODS[stage])()

    def run_all(self, on_stage: Optional[Callable[[str], None]] = None) -> dict:
        """Chain every stage; parse-notes is skipped when labels come from the onset manifest"""
        results = {}
        for stage in STAGES:
            if stage == 'parse-notes' and self.config.labels.onset_source != 'notes':
                continue
            if on_stage:
                on_stage(stage)
            results[stage] = self.run_stage(stage)
        return results
