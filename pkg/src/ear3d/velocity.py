"""Mask post-processing and global myocardial velocity curves.

Sign conventions: radial velocity is positive outward from the per-frame mask
centroid; circumferential velocity is positive along ``theta = (-u_col, u_row)``,
the radial unit vector turned +90 degrees in (row, col) image coordinates.
In-plane channel ``v_x`` runs along columns and ``v_y`` along rows.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyCurveError, EmptyMaskError, ShapeError

CURVES = ("longitudinal", "radial", "circumferential")
CSV_HEADER = ("frame", "longitudinal_cm_s", "radial_cm_s", "circumferential_cm_s")
CENTROID_EPS_MM = 1e-9


def _largest_label(labels: np.ndarray, count: int, exclude=None) -> int:
    """Label with the most pixels; ties go to the lowest label (first in raster order)."""
    if count == 0:
        return 0
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    sizes[0] = -1
    if exclude is not None:
        sizes[list(exclude)] = -1
    best = int(np.argmax(sizes))
    return best if sizes[best] > 0 else 0


def postprocess_frame(frame: np.ndarray) -> np.ndarray:
    fg = np.asarray(frame).astype(bool)
    labels, count = kernels.label4(fg)
    if count == 0:
        return np.zeros(fg.shape, dtype=np.uint8)
    keep = labels == _largest_label(labels, count)
    bg_labels, bg_count = kernels.label4(~keep)
    border = set(np.unique(np.concatenate([bg_labels[0], bg_labels[-1],
                                           bg_labels[:, 0], bg_labels[:, -1]])).tolist())
    border.discard(0)
    enclosed = [lab for lab in range(1, bg_count + 1) if lab not in border]
    if len(enclosed) > 1:
        cavity = _largest_label(bg_labels, bg_count, exclude=border)
        fill = np.isin(bg_labels, [lab for lab in enclosed if lab != cavity])
        keep |= fill
    return keep.astype(np.uint8)


def postprocess_mask(mask) -> np.ndarray:
    """Per frame: keep the largest 4-connected component, then fill every enclosed
    background hole except the largest one (the cavity)."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        return postprocess_frame(mask)
    if mask.ndim != 3:
        raise ShapeError(f"postprocess_mask expects [T,H,W] or [H,W], got {mask.shape}")
    return np.stack([postprocess_frame(f) for f in mask]).astype(np.uint8)


def mask_centroid(frame_mask) -> tuple:
    rows, cols = np.nonzero(np.asarray(frame_mask))
    if rows.size == 0:
        raise EmptyMaskError("centroid of an empty mask")
    return float(rows.mean()), float(cols.mean())


@dataclass
class VelocityCurves:
    """Per-frame means in cm/s; missing frames (empty mask) hold NaN."""
    longitudinal: np.ndarray
    radial: np.ndarray
    circumferential: np.ndarray
    frame_times: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return len(self.longitudinal)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.longitudinal)

    def curve(self, name: str) -> np.ndarray:
        if name not in CURVES:
            raise KeyError(name)
        return getattr(self, name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for t in range(self.frames):
            row = [t]
            for name in CURVES:
                v = self.curve(name)[t]
                row.append("" if math.isnan(v) else repr(float(v)))
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "VelocityCurves":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError(f"curve CSV must start with {','.join(CSV_HEADER)}")
        cols = [[float(r[i]) if r[i] != "" else math.nan for r in rows[1:]] for i in (1, 2, 3)]
        return cls(*(np.asarray(c) for c in cols))


def frame_velocities(vel: np.ndarray, mask: np.ndarray, spacing_mm) -> tuple:
    """(longitudinal, radial, circumferential) means of one frame.

    ``vel`` is ``[3, H, W]`` in (v_x, v_y, v_z) order; raises EmptyMaskError
    when ``mask`` is empty.
    """
    cr, cc = mask_centroid(mask)
    rows, cols = np.nonzero(mask)
    v_x, v_y, v_z = (vel[i][rows, cols].astype(np.float64) for i in range(3))
    longitudinal = float(v_z.mean())
    dr = (rows - cr) * spacing_mm[0]
    dc = (cols - cc) * spacing_mm[1]
    norm = np.hypot(dr, dc)
    ok = norm >= CENTROID_EPS_MM
    if not ok.any():
        return longitudinal, 0.0, 0.0
    ur, uc = dr[ok] / norm[ok], dc[ok] / norm[ok]
    vr, vc = v_y[ok], v_x[ok]
    radial = float(np.mean(vr * ur + vc * uc))
    circumferential = float(np.mean(-vr * uc + vc * ur))
    return longitudinal, radial, circumferential


def global_velocity_curves(rec, mask=None, frame_times=None) -> VelocityCurves:
    """Global velocity curves of ``rec`` over ``mask`` (the record's own mask by default)."""
    mask = rec.mask if mask is None else np.asarray(mask)
    t, h, w = rec.image.shape[1:]
    if mask.shape != (t, h, w):
        raise ShapeError(f"mask {mask.shape} does not match record frames {(t, h, w)}")
    out = np.full((3, t), np.nan)
    for i in range(t):
        try:
            out[:, i] = frame_velocities(rec.image[1:, i], mask[i], rec.spacing_mm)
        except EmptyMaskError:
            continue
    times = None if frame_times is None else np.asarray(frame_times, dtype=np.float64)
    return VelocityCurves(out[0], out[1], out[2], times)


@dataclass
class Peak:
    max_value: float
    max_frame: int
    min_value: float
    min_frame: int


def curve_peak(values: np.ndarray) -> Peak:
    values = np.asarray(values, dtype=np.float64)
    valid = ~np.isnan(values)
    if not valid.any():
        raise EmptyCurveError("curve has no non-missing frames")
    hi = np.where(valid, values, -np.inf)
    lo = np.where(valid, values, np.inf)
    i, j = int(np.argmax(hi)), int(np.argmin(lo))
    return Peak(float(values[i]), i, float(values[j]), j)


def peak_velocities(curves: VelocityCurves) -> dict:
    return {name: curve_peak(curves.curve(name)) for name in CURVES}


def peaks_to_dict(peaks: dict) -> dict:
    return {name: {"max": {"value": p.max_value, "frame": p.max_frame},
                   "min": {"value": p.min_value, "frame": p.min_frame}}
            for name, p in peaks.items()}


def curve_comparison(auto: VelocityCurves, manual: VelocityCurves) -> dict:
    """RMS difference over mutually present frames and peak deltas (auto minus manual)."""
    if auto.frames != manual.frames:
        raise ShapeError(f"curves have {auto.frames} and {manual.frames} frames")
    report = {}
    for name in CURVES:
        a, m = auto.curve(name), manual.curve(name)
        both = ~np.isnan(a) & ~np.isnan(m)
        if not both.any():
            raise EmptyCurveError(f"{name}: no frame is present in both curves")
        diff = a[both] - m[both]
        pa, pm = curve_peak(a), curve_peak(m)
        report[name] = {
            "rms": float(np.sqrt(np.mean(diff * diff))),
            "frames": int(both.sum()),
            "peak_max_delta": pa.max_value - pm.max_value,
            "peak_min_delta": pa.min_value - pm.min_value,
            "peak_max_frame_delta": pa.max_frame - pm.max_frame,
            "peak_min_frame_delta": pa.min_frame - pm.min_frame,
        }
    return report


def velocity_report(curves: VelocityCurves) -> str:
    """Peaks as JSON text with the sign conventions spelled out."""
    body = {
        "conventions": {
            "radial": "positive outward from the per-frame mask centroid",
            "circumferential": "positive along the radial direction turned +90 deg in (row, col)",
            "units": "cm/s",
            "missing_frames": [int(i) for i in np.flatnonzero(curves.missing)],
        },
        "peaks": peaks_to_dict(peak_velocities(curves)),
    }
    return json.dumps(body, indent=2, sort_keys=True) + "\n"
