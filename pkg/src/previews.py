"""
Preview Rendering
PNG sketches of detected fiducials, attribution waterfalls, ROC curves
and pre-onset feature trajectories
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from kinematics import DerivativeStack, FiducialSet

logger = logging.getLogger(__name__)

BACKGROUND = (255, 255, 255)
TRACE = (40, 40, 40)
AXIS = (200, 200, 200)
POSITIVE = (200, 60, 60)
NEGATIVE = (60, 110, 200)
CURVE_COLORS = ((200, 60, 60), (60, 110, 200), (40, 150, 80))

FIDUCIAL_COLORS = {
    'on': (60, 110, 200),
    'sp': (200, 60, 60),
    'dn': (40, 150, 80),
    'off': (120, 120, 120),
}


class PreviewRenderer:
    """Draws small diagnostic images with Pillow"""

    MARGIN = 20

    @staticmethod
    def _scale(values: np.ndarray, lo: float, hi: float, span: int) -> np.ndarray:
        if hi - lo < 1e-12:
            return np.full(values.shape, span / 2.0)
        return (values - lo) / (hi - lo) * span

    @staticmethod
    def fiducial_preview(d: DerivativeStack, fiducials: Sequence[FiducialSet], n_beats: int = 5,
                         size: Tuple[int, int] = (900, 320)) -> Image.Image:
        """PPG trace over the first n_beats valid beats with on/sp/dn/off markers"""
        beats = [f for f in fiducials if f.valid][:n_beats]
        image = Image.new('RGB', size, BACKGROUND)
        if not beats:
            return image
        draw = ImageDraw.Draw(image)
        start, stop = beats[0].on, beats[-1].off + 1
        segment = d.ppg[start:stop]
        width, height = size[0] - 2 * PreviewRenderer.MARGIN, size[1] - 2 * PreviewRenderer.MARGIN
        lo, hi = float(segment.min()), float(segment.max())

        xs = PreviewRenderer.MARGIN + PreviewRenderer._scale(np.arange(segment.size, dtype=np.float64),
                                                             0.0, max(segment.size - 1, 1), width)
        ys = PreviewRenderer.MARGIN + height - PreviewRenderer._scale(segment, lo, hi, height)
        draw.line(list(zip(xs.tolist(), ys.tolist())), fill=TRACE, width=2)

        for fid in beats:
            for name, color in FIDUCIAL_COLORS.items():
                index = getattr(fid, name)
                if index is None or not start <= index < stop:
                    continue
                x, y = float(xs[index - start]), float(ys[index - start])
                draw.ellipse([x - 4, y - 4, x + 4, y + 4], outline=color, width=2)
        return image

    @staticmethod
    def waterfall_preview(waterfall: dict, size: Tuple[int, int] = (720, 40)) -> Image.Image:
        """
        Horizontal waterfall: one bar per feature from its running start to end

        Height grows with the number of steps; red bars push the score up,
        blue bars pull it down.
        """
        steps: List[dict] = waterfall['steps']
        row = 22
        width = size[0]
        height = size[1] + row * (len(steps) + 1)
        image = Image.new('RGB', (width, height), BACKGROUND)
        draw = ImageDraw.Draw(image)

        label_width = 150
        plot = width - label_width - 2 * PreviewRenderer.MARGIN
        ends = [waterfall['base_value'], waterfall['fx']] + [s['start'] for s in steps] + [s['end'] for s in steps]
        lo, hi = min(ends), max(ends)

        def x_of(value: float) -> float:
            return label_width + PreviewRenderer.MARGIN + float(
                PreviewRenderer._scale(np.array([value]), lo, hi, plot)[0])

        top = PreviewRenderer.MARGIN
        base_x = x_of(waterfall['base_value'])
        draw.line([(base_x, top), (base_x, height - PreviewRenderer.MARGIN)], fill=AXIS, width=1)
        for i, step in enumerate(steps):
            y = top + i * row
            x0, x1 = sorted((x_of(step['start']), x_of(step['end'])))
            color = POSITIVE if step['phi'] >= 0 else NEGATIVE
            draw.rectangle([x0, y + 3, max(x1, x0 + 1), y + row - 3], fill=color)
            draw.text((PreviewRenderer.MARGIN, y + 5), f"{step['feature']} {step['phi']:+.3f}", fill=TRACE)
        y = top + len(steps) * row
        draw.text((PreviewRenderer.MARGIN, y + 5),
                  f"f(x) {waterfall['fx']:.3f}  E[f] {waterfall['base_value']:.3f}", fill=TRACE)
        return image

    @staticmethod
    def _panel(draw: ImageDraw.ImageDraw, box: Tuple[int, int, int, int], curves: Dict[str, Tuple[np.ndarray, np.ndarray]],
               title: str, bounds: Optional[Tuple[float, float, float, float]] = None, diagonal: bool = False):
        """Line plot of named (x, y) curves inside box = (left, top, right, bottom)"""
        left, top, right, bottom = box
        draw.rectangle(list(box), outline=AXIS, width=1)
        draw.text((left + 4, top + 2), title, fill=TRACE)
        points = [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) for x, y in curves.values()]
        finite = [(x[np.isfinite(x) & np.isfinite(y)], y[np.isfinite(x) & np.isfinite(y)]) for x, y in points]
        if bounds is None:
            xs = np.concatenate([x for x, _ in finite]) if finite else np.zeros(0)
            ys = np.concatenate([y for _, y in finite]) if finite else np.zeros(0)
            if xs.size == 0:
                return
            bounds = (float(xs.min()), float(xs.max()), float(ys.min()), float(ys.max()))
        x_lo, x_hi, y_lo, y_hi = bounds
        width, height = right - left, bottom - top - 14

        def to_pixels(x: np.ndarray, y: np.ndarray) -> List[Tuple[float, float]]:
            px = left + PreviewRenderer._scale(x, x_lo, x_hi, width)
            py = bottom - PreviewRenderer._scale(y, y_lo, y_hi, height)
            return list(zip(px.tolist(), py.tolist()))

        if diagonal:
            draw.line(to_pixels(np.array([x_lo, x_hi]), np.array([y_lo, y_hi])), fill=AXIS, width=1)
        for i, (name, (x, y)) in enumerate(zip(curves, finite)):
            color = CURVE_COLORS[i % len(CURVE_COLORS)]
            if x.size > 1:
                draw.line(to_pixels(x, y), fill=color, width=2)
            elif x.size == 1:
                (px, py), = to_pixels(x, y)
                draw.ellipse([px - 3, py - 3, px + 3, py + 3], outline=color, width=2)
            draw.text((right - 150, top + 2 + 12 * i), name, fill=color)

    @staticmethod
    def roc_preview(curves: Dict[str, pd.DataFrame], size: Tuple[int, int] = (420, 420),
                    title: str = "ROC") -> Image.Image:
        """ROC curves (one per dataset) over the chance diagonal"""
        image = Image.new('RGB', size, BACKGROUND)
        draw = ImageDraw.Draw(image)
        margin = PreviewRenderer.MARGIN
        series = {name: (curve['fpr'].to_numpy(), curve['tpr'].to_numpy())
                  for name, curve in curves.items() if not curve.empty}
        PreviewRenderer._panel(draw, (margin, margin, size[0] - margin, size[1] - margin), series, title,
                               bounds=(0.0, 1.0, 0.0, 1.0), diagonal=True)
        return image

    @staticmethod
    def trajectory_preview(tables: Dict[str, pd.DataFrame], features: Sequence[str],
                           size: Tuple[int, int] = (720, 200)) -> Image.Image:
        """
        One panel per feature: cohort mean against minutes before onset

        The x axis runs from the earliest bin on the left to the onset on the
        right; size is per panel.
        """
        margin = PreviewRenderer.MARGIN
        image = Image.new('RGB', (size[0], size[1] * len(features)), BACKGROUND)
        draw = ImageDraw.Draw(image)
        for i, feature in enumerate(features):
            series = {name: (-table['minutes_before_onset'].to_numpy(), table[f"{feature}_mean"].to_numpy())
                      for name, table in tables.items() if not table.empty}
            top = i * size[1]
            PreviewRenderer._panel(draw, (margin, top + margin, size[0] - margin, top + size[1] - margin / 2),
                                   series, f"{feature} vs minutes to onset")
        return image

    @staticmethod
    def save_image(image: Image.Image, output_path: str) -> str:
        """Save as PNG (or whatever the extension names)"""
        os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
        _, ext = os.path.splitext(output_path.lower())
        image.save(output_path, 'PNG' if ext == '.png' else None)
        logger.info("Saved preview %s", output_path)
        return output_path
