"""
Exact Shapley Attribution
Full coalition enumeration against a single composite background point
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from labeling import LabeledDataset
from resnet1d import ModelCheckpoint

logger = logging.getLogger(__name__)

MAX_FEATURES = 20
EVAL_CHUNK = 4096


class AttributionError(ValueError):
    """Raised when an explanation cannot be computed exactly"""


@dataclass
class AttributionResult:
    phi: np.ndarray
    base_value: float
    fx: float
    features: List[str] = field(default_factory=list)
    patient_id: str = ""
    t_center: float = math.nan

    def as_dict(self) -> dict:
        return {
            'patient_id': self.patient_id,
            't_center': self.t_center,
            'base_value': self.base_value,
            'fx': self.fx,
            'phi': {name: float(value) for name, value in zip(self.features, self.phi)},
        }


def shapley_weights(n_features: int) -> np.ndarray:
    """w[s] = s! (F - s - 1)! / F! for coalition sizes s = 0 .. F-1"""
    total = math.factorial(n_features)
    return np.array([math.factorial(s) * math.factorial(n_features - s - 1) / total
                     for s in range(n_features)])


def coalition_masks(n_features: int) -> np.ndarray:
    """2^F x F booleans; row m marks the features present in bitmask m"""
    codes = np.arange(1 << n_features)
    return ((codes[:, None] >> np.arange(n_features)[None, :]) & 1).astype(bool)


def exact_shapley(score_fn: Callable, x: np.ndarray, background: np.ndarray,
                  vectorized: bool = False, jobs: int = 1,
                  features: Optional[Sequence[str]] = None) -> AttributionResult:
    """
    Shapley values of score_fn at x with absent features set to the
    background mean

    Args:
        score_fn: Instance -> real, or a batch (M, *x.shape) -> M reals when vectorized
        x: Instance; axis 0 indexes features (any trailing axes are masked jointly)
        background: One or more background points stacked on axis 0, or a single
            point broadcastable to x
        vectorized: score_fn accepts batches
        jobs: Worker threads for coalition evaluation
        features: Feature names for the result

    Returns:
        AttributionResult with sum(phi) == fx - base_value
    """
    x = np.asarray(x, dtype=np.float64)
    n_features = x.shape[0]
    if n_features > MAX_FEATURES:
        raise AttributionError(
            f"{n_features} features need 2^{n_features} coalitions; "
            f"subset the features to at most {MAX_FEATURES} before explaining")
    if n_features == 0:
        raise AttributionError("nothing to explain: zero features")
    reference = _background_point(background, x)

    masks = coalition_masks(n_features)
    expand = (slice(None), slice(None)) + (None,) * (x.ndim - 1)
    values = np.empty(masks.shape[0])

    def evaluate(start: int):
        block = masks[start:start + EVAL_CHUNK][expand]
        batch = np.where(block, x[None], reference[None])
        if vectorized:
            values[start:start + len(batch)] = np.asarray(score_fn(batch), dtype=np.float64).reshape(-1)
        else:
            values[start:start + len(batch)] = [float(score_fn(instance)) for instance in batch]

    starts = range(0, masks.shape[0], EVAL_CHUNK)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(evaluate, starts))
    else:
        for start in starts:
            evaluate(start)

    weights = shapley_weights(n_features)
    sizes = masks.sum(axis=1)
    codes = np.arange(masks.shape[0])
    phi = np.empty(n_features)
    for i in range(n_features):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weights[sizes[without]] * (values[without | (1 << i)] - values[without]))

    names = list(features) if features is not None else [f"f{i}" for i in range(n_features)]
    return AttributionResult(phi, float(values[0]), float(values[-1]), names)


def _background_point(background: np.ndarray, x: np.ndarray) -> np.ndarray:
    background = np.asarray(background, dtype=np.float64)
    if background.size == 0:
        raise AttributionError("background is empty")
    if background.ndim == x.ndim + 1:
        background = background.mean(axis=0)
    try:
        return np.broadcast_to(background, x.shape).astype(np.float64)
    except ValueError:
        raise AttributionError(f"background shape {background.shape} does not fit instance shape {x.shape}")


def model_score_fn(checkpoint: ModelCheckpoint) -> Callable[[np.ndarray], np.ndarray]:
    """Batch of raw F x L windows -> log-odds z1 - z0 of the checkpoint"""
    def score(batch: np.ndarray) -> np.ndarray:
        logits = checkpoint.logits(batch)
        return logits[:, 1] - logits[:, 0]
    return score


def normal_background(dataset: LabeledDataset, features: Sequence[str]) -> np.ndarray:
    """Per-feature scalar mean over Normal windows, shaped F x 1 for broadcasting across time"""
    normal = dataset.select_columns(features)
    x = normal.X[normal.y == 0]
    if x.shape[0] == 0:
        raise AttributionError("no Normal windows to build the background from")
    return x.mean(axis=(0, 2))[:, None]


def explain_windows(checkpoint: ModelCheckpoint, dataset: LabeledDataset, background: np.ndarray,
                    limit: Optional[int] = None, jobs: int = 1,
                    progress_callback: Optional[Callable[[int, int], None]] = None) -> List[AttributionResult]:
    """Exact attributions for (up to limit) windows of a dataset"""
    subset = dataset.select_columns(checkpoint.features)
    x = subset.X
    count = x.shape[0] if limit is None else min(limit, x.shape[0])
    score = model_score_fn(checkpoint)
    results = []
    for i in range(count):
        result = exact_shapley(score, x[i], background, vectorized=True, jobs=jobs,
                               features=checkpoint.features)
        window = subset.windows[i]
        result.patient_id = window.patient_id
        result.t_center = window.t_center
        results.append(result)
        if progress_callback:
            progress_callback(i + 1, count)
    return results


def attribution_summary(results: Sequence[AttributionResult], instance: int = 0) -> dict:
    """
    Features ranked by mean |phi| plus a waterfall for one instance

    The waterfall starts at base_value and adds contributions in descending
    |phi| until it reaches fx.
    """
    if not results:
        raise AttributionError("attribution_summary needs at least one result")
    names = results[0].features
    phi = np.stack([r.phi for r in results])
    mean_abs = np.abs(phi).mean(axis=0)
    mean_phi = phi.mean(axis=0)
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], j))
    ranking = [{'feature': names[j], 'mean_abs_phi': float(mean_abs[j]), 'mean_phi': float(mean_phi[j])}
               for j in order]

    chosen = results[instance]
    running = chosen.base_value
    steps = []
    for j in sorted(range(len(names)), key=lambda j: (-abs(chosen.phi[j]), j)):
        start = running
        running += float(chosen.phi[j])
        steps.append({'feature': names[j], 'phi': float(chosen.phi[j]), 'start': start, 'end': running})

    return {
        'n_instances': len(results),
        'base_value': float(np.mean([r.base_value for r in results])),
        'ranking': ranking,
        'waterfall': {
            'patient_id': chosen.patient_id,
            't_center': chosen.t_center,
            'base_value': chosen.base_value,
            'fx': chosen.fx,
            'steps': steps,
        },
    }


def save_attributions(results: Sequence[AttributionResult], json_path: str,
                      csv_path: Optional[str] = None, instance: int = 0) -> Dict[str, str]:
    """JSON report (summary plus every explanation) and an optional per-instance phi CSV"""
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    report = attribution_summary(results, instance)
    report['instances'] = [r.as_dict() for r in results]
    with open(json_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write('\n')
    written = {'json': json_path}

    if csv_path:
        frame = pd.DataFrame([r.phi for r in results], columns=results[0].features)
        frame.insert(0, 'fx', [r.fx for r in results])
        frame.insert(0, 'base_value', [r.base_value for r in results])
        frame.insert(0, 't_center', [r.t_center for r in results])
        frame.insert(0, 'patient_id', [r.patient_id for r in results])
        frame.to_csv(csv_path, index=False, float_format='%.12g', lineterminator='\n')
        written['csv'] = csv_path
    logger.info("Wrote %d attributions to %s", len(results), json_path)
    return written
