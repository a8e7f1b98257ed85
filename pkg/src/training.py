"""
Training Protocol for the ResNet-1D Classifier
Adam with decoupled weight decay, patient-level stratified folds and
cross-validated training with macro-F1 checkpoint selection
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from biomarkers import COLUMN_VERSION
from evaluation import macro_f1, metric_report
from labeling import LabeledDataset, LabeledWindow
from resnet1d import ArchSpec, ModelCheckpoint, ResNet1D, fit_standardizer, softmax_positive, standardize
from seeding import philox_generator
from selection import D_MIN, R_MAX, SelectionReport, select_features

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lambda_pos: float = 3.0
    batch: int = 64
    epochs: int = 50
    seed: int = 0
    folds: int = 5

    def validate(self) -> "TrainConfig":
        for name in ('lr', 'lambda_pos', 'batch', 'epochs', 'folds'):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.weight_decay < 0 or self.seed < 0:
            raise ValueError("TrainConfig weight_decay and seed must be non-negative")
        return self


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig,
              decay_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, AdamState]:
    """
    One Adam update with decoupled weight decay

    Decay is applied first (params <- params - lr * wd * params on masked
    coordinates), then the bias-corrected Adam delta.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state must share one shape")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)

    decay = cfg.lr * cfg.weight_decay * params
    if decay_mask is not None:
        decay = decay * decay_mask
    updated = params - decay
    updated = updated - cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return updated, AdamState(m, v, t)


def patient_folds(patients: Sequence[Tuple[str, bool]], k: int = 5, seed: int = 0) -> List[List[str]]:
    """
    k disjoint patient sets, stratified on has_warning

    Positive-bearing patients are dealt round-robin after a seeded shuffle;
    negatives continue the deal where the positives stopped.
    """
    unique = dict(patients)
    if len(unique) < k:
        raise ValueError(f"fewer patients than folds: {len(unique)} < {k}")
    rng = philox_generator(seed, 0xF01D)
    positives = sorted(p for p, has_warning in unique.items() if has_warning)
    negatives = sorted(p for p, has_warning in unique.items() if not has_warning)
    folds: List[List[str]] = [[] for _ in range(k)]
    position = 0
    for group in (positives, negatives):
        order = rng.permutation(len(group))
        for i in order:
            folds[position % k].append(group[i])
            position += 1
    return [sorted(fold) for fold in folds]


def dataset_folds(dataset: LabeledDataset, k: int, seed: int) -> List[List[str]]:
    has_warning: Dict[str, bool] = {}
    for w in dataset.windows:
        has_warning[w.patient_id] = has_warning.get(w.patient_id, False) or w.label == 1
    return patient_folds(sorted(has_warning.items()), k, seed)


def shuffle_labels(dataset: LabeledDataset, seed: int) -> LabeledDataset:
    """Permutation-null copy of a dataset: labels shuffled across all windows"""
    labels = philox_generator(seed, 0x9E11).permutation(dataset.y)
    windows = [LabeledWindow(w.patient_id, w.t_center, int(label), w.features, w.zone, w.segment_id)
               for w, label in zip(dataset.windows, labels)]
    return LabeledDataset(windows, dataset.columns, dataset.L, dataset.stride, dataset.params)


@dataclass
class CVResult:
    checkpoints: List[ModelCheckpoint]
    fold_table: pd.DataFrame
    selections: List[SelectionReport] = field(default_factory=list)
    folds: List[List[str]] = field(default_factory=list)


class FoldTrainer:
    """
    Trains one network on one fold, keeping the epoch with the best
    validation macro-F1 (earliest on ties)
    """

    def __init__(self, arch: ArchSpec, cfg: TrainConfig, fold: int = 0):
        self.arch = arch
        self.cfg = cfg.validate()
        self.fold = fold
        self.net = ResNet1D(arch)
        self.progress_callback: Optional[Callable[[int, int], None]] = None

    def set_progress_callback(self, callback: Callable[[int, int], None]):
        """Set a callback function for per-epoch progress updates"""
        self.progress_callback = callback

    def _update_progress(self, epoch: int):
        if self.progress_callback:
            self.progress_callback(epoch, self.cfg.epochs)

    def predict(self, params: np.ndarray, stats: np.ndarray, x: np.ndarray, batch: int = 256) -> np.ndarray:
        if x.shape[0] == 0:
            return np.zeros(0)
        return np.concatenate([softmax_positive(self.net.forward(params, x[i:i + batch], 'eval', stats))
                               for i in range(0, x.shape[0], batch)])

    def fit(self, x_train: np.ndarray, y_train: np.ndarray,
            x_val: np.ndarray, y_val: np.ndarray) -> dict:
        """
        Train on standardized inputs

        Returns:
            dict with params, stats, epoch, val_macro_f1 and the per-epoch history
        """
        cfg = self.cfg
        params = self.net.init_params(cfg.seed, self.fold)
        stats = self.net.init_stats()
        mask = self.net.decay_mask()
        state = AdamState.zeros(self.net.n_params)
        best = {'params': params.copy(), 'stats': stats.copy(), 'epoch': 0, 'val_macro_f1': -math.inf}
        history = []

        n = x_train.shape[0]
        for epoch in range(1, cfg.epochs + 1):
            order = philox_generator(cfg.seed, 0xE90C, self.fold, epoch).permutation(n)
            losses = []
            for start in range(0, n, cfg.batch):
                idx = order[start:start + cfg.batch]
                loss, grads = self.net.loss_and_grad(params, x_train[idx], y_train[idx],
                                                     cfg.lambda_pos, 'train', stats)
                params, state = adam_step(params, grads, state, cfg, mask)
                losses.append(loss)

            if y_val.size:
                score = macro_f1((self.predict(params, stats, x_val) >= 0.5).astype(np.int64), y_val)
            else:
                score = math.nan
            history.append({'epoch': epoch, 'loss': float(np.mean(losses)) if losses else math.nan,
                            'val_macro_f1': score})
            if score > best['val_macro_f1'] or (not y_val.size and epoch == cfg.epochs):
                best = {'params': params.copy(), 'stats': stats.copy(), 'epoch': epoch, 'val_macro_f1': score}
            logger.debug("fold %d epoch %d loss %.5f val macro-F1 %.4f", self.fold, epoch,
                         history[-1]['loss'], score)
            self._update_progress(epoch)

        best['history'] = history
        return best


def train_cv(dataset: LabeledDataset, arch: ArchSpec, cfg: TrainConfig,
             d_min: float = D_MIN, r_max: float = R_MAX,
             progress_callback: Optional[Callable[[int, int], None]] = None) -> CVResult:
    """
    Patient-level stratified k-fold training

    Per fold: feature selection and input standardization on the training
    patients only, then training with per-epoch validation on the held-out
    patients. The architecture's in_channels and length are taken from the
    fold's selection and the dataset.
    """
    cfg.validate()
    if len(set(dataset.y.tolist())) < 2:
        raise ValueError("dataset is degenerate: both classes are required")
    folds = dataset_folds(dataset, cfg.folds, cfg.seed)
    checkpoints, rows, selections = [], [], []

    for fold, val_patients in enumerate(folds):
        train_patients = sorted(p for other, members in enumerate(folds) if other != fold for p in members)
        train_ds = dataset.subset(train_patients)
        val_ds = dataset.subset(val_patients)

        report = select_features(train_ds, d_min, r_max)
        selections.append(report)
        train_ds = train_ds.select_columns(report.kept)
        val_ds = val_ds.select_columns(report.kept)

        x_train = train_ds.X
        mean, std = fit_standardizer(x_train)
        x_train = standardize(x_train, mean, std)
        x_val = standardize(val_ds.X, mean, std)

        fold_arch = replace(arch, in_channels=len(report.kept), length=dataset.L)
        trainer = FoldTrainer(fold_arch, cfg, fold)
        if progress_callback:
            trainer.set_progress_callback(progress_callback)
        logger.info("Fold %d/%d: %d train / %d val windows, %d features",
                    fold + 1, len(folds), len(train_ds), len(val_ds), len(report.kept))
        best = trainer.fit(x_train, train_ds.y, x_val, val_ds.y)

        checkpoint = ModelCheckpoint(
            arch=fold_arch, params=best['params'], stats=best['stats'], features=list(report.kept),
            column_version=COLUMN_VERSION, label_params=vars(dataset.params).copy(),
            seed=cfg.seed, epoch=best['epoch'], val_macro_f1=float(best['val_macro_f1']),
            input_mean=mean.tolist(), input_std=std.tolist(), fold=fold,
            train_patients=train_patients, val_patients=list(val_patients))
        checkpoints.append(checkpoint)

        row = {'fold': fold, 'epoch': best['epoch'], 'n_train': len(train_ds), 'n_val': len(val_ds)}
        if len(val_ds):
            scores = trainer.predict(best['params'], best['stats'], x_val)
            row.update(metric_report(scores, val_ds.y).as_dict())
        rows.append(row)

    return CVResult(checkpoints, pd.DataFrame(rows), selections, folds)


def apply_checkpoint(checkpoint: ModelCheckpoint, dataset: LabeledDataset) -> np.ndarray:
    """Positive-class probabilities of a checkpoint on the dataset's windows"""
    columns = list(dataset.columns)
    missing = [f for f in checkpoint.features if f not in columns]
    if missing:
        raise ValueError(f"dataset lacks checkpoint features: {missing}")
    subset = dataset.select_columns(checkpoint.features)
    return checkpoint.predict_proba(subset.X)
