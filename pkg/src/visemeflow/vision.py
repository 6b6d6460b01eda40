"""Frame preprocessing: grayscale, cascade mouth detection, crop, pad.

Frames are plain 2-d float arrays with values in [0, 1], height first.  The
detector is a classic attentional cascade evaluated over a sliding window at
multiple scales, using integral images for rectangle sums.  A window passes a
stage when the sum of its weak-classifier votes exceeds the stage threshold;
weak features are variance-normalized against the window's standard deviation.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

STD_FLOOR = 1e-6


@dataclass
class WeakClassifier:
    rects: list  # of (x, y, w, h, weight)
    threshold: float
    left: float
    right: float


@dataclass
class CascadeStage:
    threshold: float
    weak: list = field(default_factory=list)


@dataclass
class CascadeModel:
    base_window: tuple  # (w, h)
    stages: list = field(default_factory=list)

    def validate(self) -> None:
        bw, bh = self.base_window
        if bw <= 0 or bh <= 0:
            raise DataError(f"cascade base window {self.base_window} is degenerate")
        if not self.stages:
            raise DataError("cascade has no stages")
        for si, stage in enumerate(self.stages):
            if not stage.weak:
                raise DataError(f"cascade stage {si} has no weak classifiers")
            for wi, weak in enumerate(stage.weak):
                if not weak.rects:
                    raise DataError(f"stage {si} weak {wi} has no rectangles")
                for x, y, w, h, _wt in weak.rects:
                    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > bw or y + h > bh:
                        raise DataError(
                            f"stage {si} weak {wi} rectangle "
                            f"({x},{y},{w},{h}) leaves the {bw}x{bh} base window"
                        )


@dataclass
class ROI:
    x: int
    y: int
    width: int
    height: int

    @property
    def area(self) -> int:
        return self.width * self.height


def load_cascade(path) -> CascadeModel:
    try:
        with open(path) as fp:
            raw = json.load(fp)
    except ValueError as exc:
        raise DataError(f"cascade file {path} is not valid JSON: {exc}") from exc
    try:
        model = CascadeModel(
            base_window=tuple(raw["base_window"]),
            stages=[
                CascadeStage(
                    threshold=float(s["threshold"]),
                    weak=[
                        WeakClassifier(
                            rects=[tuple(r) for r in w["rects"]],
                            threshold=float(w["threshold"]),
                            left=float(w["left"]),
                            right=float(w["right"]),
                        )
                        for w in s["weak"]
                    ],
                )
                for s in raw["stages"]
            ],
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"cascade file {path} has a malformed field: {exc}") from exc
    model.validate()
    return model


def default_cascade() -> CascadeModel:
    """The bundled mouth detector tuned against the synthetic generator."""
    from importlib import resources

    ref = resources.files("visemeflow").joinpath("data/mouth_cascade.json")
    with resources.as_file(ref) as path:
        return load_cascade(path)


def save_cascade(path, cascade: CascadeModel) -> None:
    cascade.validate()
    raw = {
        "base_window": list(cascade.base_window),
        "stages": [
            {
                "threshold": s.threshold,
                "weak": [
                    {
                        "rects": [list(r) for r in w.rects],
                        "threshold": w.threshold,
                        "left": w.left,
                        "right": w.right,
                    }
                    for w in s.weak
                ],
            }
            for s in cascade.stages
        ],
    }
    with open(path, "w") as fp:
        json.dump(raw, fp, indent=2, sort_keys=True)
        fp.write("\n")


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (h, w, 3) frame, rescaled into [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected an (h, w, 3) color frame, got shape {rgb.shape}")
    if rgb.max(initial=0.0) > 1.0:
        rgb = rgb / 255.0
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    # algebraic rearrangement of 0.299R + 0.587G + 0.114B that keeps
    # achromatic pixels (R=G=B) exactly unchanged
    gray = b + 0.299 * (r - b) + 0.587 * (g - b)
    return np.clip(gray, 0.0, 1.0)


def integral_image(gray: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero first row and column, shape (h+1, w+1)."""
    g = np.asarray(gray, dtype=np.float64)
    h, w = g.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    ii[1:, 1:] = g.cumsum(axis=0).cumsum(axis=1)
    return ii


def rect_sum(ii: np.ndarray, x, y, w, h):
    """Sum of the w x h rectangle at (x, y); x and y may be arrays."""
    return ii[y + h, x + w] - ii[y, x + w] - ii[y + h, x] + ii[y, x]


def _scaled_rects(rects, scale, ww, wh):
    # rounding x and width independently can push a rectangle past the
    # scaled window edge, so clamp each rect back inside it
    out = []
    for rx, ry, rw, rh, wt in rects:
        sx = min(int(round(rx * scale)), ww)
        sy = min(int(round(ry * scale)), wh)
        sw = min(int(round(rw * scale)), ww - sx)
        sh = min(int(round(rh * scale)), wh - sy)
        out.append((sx, sy, sw, sh, wt))
    return out


def cascade_scan(
    gray: np.ndarray,
    cascade: CascadeModel,
    scale_factor: float = 1.1,
    min_size=None,
    step: int = 2,
):
    """All windows that pass every stage, before merging, as (x, y, w, h).

    A ``min_size`` below the base window clamps to the base window; windows
    are visited in scale order, then row-major within each scale.
    """
    cascade.validate()
    frame_h, frame_w = gray.shape
    bw, bh = cascade.base_window
    ii = integral_image(gray)
    ii2 = integral_image(np.square(gray.astype(np.float64)))
    passes = []
    if min_size is None:
        scale = 1.0
    else:
        scale = max(min_size[0] / bw, min_size[1] / bh, 1.0)
    while True:
        ww = int(round(bw * scale))
        wh = int(round(bh * scale))
        if ww > frame_w or wh > frame_h:
            break
        area = ww * wh
        ys0 = np.arange(0, frame_h - wh + 1, step)
        xs0 = np.arange(0, frame_w - ww + 1, step)
        yy, xx = np.meshgrid(ys0, xs0, indexing="ij")
        xs = xx.ravel()
        ys = yy.ravel()
        mean = rect_sum(ii, xs, ys, ww, wh) / area
        var = rect_sum(ii2, xs, ys, ww, wh) / area - mean * mean
        std = np.maximum(np.sqrt(np.maximum(var, 0.0)), STD_FLOOR)
        stage_rects = [
            [(_scaled_rects(weak.rects, scale, ww, wh), weak) for weak in stage.weak]
            for stage in cascade.stages
        ]
        for stage, weaks in zip(cascade.stages, stage_rects):
            if xs.size == 0:
                break
            total = np.zeros(xs.shape, dtype=np.float64)
            for rects, weak in weaks:
                f = np.zeros(xs.shape, dtype=np.float64)
                for sx, sy, sw, sh, wt in rects:
                    f = f + wt * rect_sum(ii, xs + sx, ys + sy, sw, sh)
                f = f / area
                total = total + np.where(f < weak.threshold * std, weak.left, weak.right)
            alive = total > stage.threshold
            xs, ys, std = xs[alive], ys[alive], std[alive]
        for x0, y0 in zip(xs.tolist(), ys.tolist()):
            passes.append((x0, y0, ww, wh))
        scale *= scale_factor
    return passes


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def merge_windows(windows, iou_threshold: float = 0.4, frame_size=None):
    """Group windows whose IoU reaches the threshold and average each group.

    Each window joins the first existing group (in creation order) that
    holds any member overlapping it at or above the threshold, so results
    depend only on the input order, not on timing or thread count.
    """
    if not windows:
        return []
    boxes = np.asarray(windows, dtype=np.float64)
    n = len(boxes)
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = x0 + boxes[:, 2], y0 + boxes[:, 3]
    areas = boxes[:, 2] * boxes[:, 3]
    # membership tests dominate on dense scans, so run each new window
    # against a whole group at once instead of member by member
    group_members = []  # ordered indices, kept for the averaging step
    group_masks = []
    for i in range(n):
        ix = np.minimum(x1[:i], x1[i]) - np.maximum(x0[:i], x0[i])
        iy = np.minimum(y1[:i], y1[i]) - np.maximum(y0[:i], y0[i])
        inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
        union = areas[:i] + areas[i] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            hits = np.where(union > 0, inter / union, 0.0) >= iou_threshold
        for members, mask in zip(group_members, group_masks):
            if np.any(hits & mask[:i]):
                members.append(i)
                mask[i] = True
                break
        else:
            mask = np.zeros(n, dtype=bool)
            mask[i] = True
            group_members.append([i])
            group_masks.append(mask)
    rois = []
    for members in group_members:
        arr = boxes[np.asarray(members)]
        x, y, w, h = (int(round(v)) for v in arr.mean(axis=0))
        if frame_size is not None:
            fw, fh = frame_size
            w = min(w, fw)
            h = min(h, fh)
            x = min(max(x, 0), fw - w)
            y = min(max(y, 0), fh - h)
        rois.append(ROI(x, y, w, h))
    return rois


def cascade_detect(
    gray: np.ndarray,
    cascade: CascadeModel,
    scale_factor: float = 1.1,
    min_size=None,
    step: int = 2,
):
    windows = cascade_scan(gray, cascade, scale_factor, min_size, step)
    h, w = gray.shape
    return merge_windows(windows, frame_size=(w, h))


def fallback_roi(frame_w: int, frame_h: int) -> ROI:
    """Center-lower-third crop used when detection has nothing to offer."""
    return ROI(frame_w // 4, (2 * frame_h) // 3, frame_w // 2, frame_h // 4)


def extract_mouth(
    gray: np.ndarray,
    cascade: CascadeModel,
    prev_roi: ROI | None = None,
    scale_factor: float = 1.1,
    min_size=None,
    step: int = 2,
) -> ROI:
    """Largest detection whose center sits in the lower half of the frame.

    Falls back to ``prev_roi`` when nothing is detected, and to a fixed
    center-lower-third crop when there is no history either, so the result
    is always usable.
    """
    frame_h, frame_w = gray.shape
    rois = cascade_detect(gray, cascade, scale_factor, min_size, step)
    lower = [r for r in rois if r.y + r.height / 2.0 >= frame_h / 2.0]
    if lower:
        return max(lower, key=lambda r: (r.area, -r.y, -r.x))
    if prev_roi is not None:
        return prev_roi
    return fallback_roi(frame_w, frame_h)


def crop_resize(gray: np.ndarray, roi: ROI, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of the ROI to (out_h, out_w), clamped to [0, 1]."""
    frame_h, frame_w = gray.shape
    if (
        roi.x < 0
        or roi.y < 0
        or roi.width <= 0
        or roi.height <= 0
        or roi.x + roi.width > frame_w
        or roi.y + roi.height > frame_h
    ):
        raise DataError(
            f"roi ({roi.x},{roi.y},{roi.width},{roi.height}) leaves the "
            f"{frame_w}x{frame_h} frame"
        )
    src = np.asarray(gray, dtype=np.float64)
    # half-pixel-center mapping; edge samples clamp to the roi border
    gx = roi.x + (np.arange(out_w) + 0.5) * (roi.width / out_w) - 0.5
    gy = roi.y + (np.arange(out_h) + 0.5) * (roi.height / out_h) - 0.5
    gx = np.clip(gx, roi.x, roi.x + roi.width - 1)
    gy = np.clip(gy, roi.y, roi.y + roi.height - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, roi.x + roi.width - 1)
    y1 = np.minimum(y0 + 1, roi.y + roi.height - 1)
    fx = gx - x0
    fy = (gy - y0)[:, None]
    top = src[y0[:, None], x0[None, :]] * (1.0 - fx) + src[y0[:, None], x1[None, :]] * fx
    bot = src[y1[:, None], x0[None, :]] * (1.0 - fx) + src[y1[:, None], x1[None, :]] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0)


def pad_frames(frames, length: int) -> np.ndarray:
    """Force a video to exactly ``length`` frames.

    Short videos get all-zero frames appended; long ones keep the centered
    ``length`` frames, dropping evenly from both ends.
    """
    frames = np.asarray(frames)
    if frames.dtype.kind != "f":
        frames = frames.astype(np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise DataError(f"expected a non-empty frame stack, got shape {frames.shape}")
    n = frames.shape[0]
    if n == length:
        return frames
    if n < length:
        zeros = np.zeros((length - n,) + frames.shape[1:], dtype=frames.dtype)
        return np.concatenate([frames, zeros], axis=0)
    start = (n - length) // 2
    return frames[start : start + length]


def frames_to_tensor(frames) -> np.ndarray:
    """Stack [n, h, w] frames into the canonical [n, 1, h, w] f32 layout."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3:
        raise DataError(f"expected a frame stack, got shape {frames.shape}")
    return frames[:, None, :, :]


def cascade_from_opencv_xml(path) -> CascadeModel:
    """Best-effort converter for new-style pretrained cascade XML files.

    Only stump weak classifiers (one internal node) are supported.  The
    converted thresholds keep their original values; because this detector's
    variance normalization may differ from the one the file was trained
    against, converted cascades can need threshold recalibration before use.
    """
    root = ET.parse(path).getroot()
    cas = root.find("cascade")
    if cas is None:
        raise DataError(f"{path} has no <cascade> element")
    bw = int(cas.findtext("width"))
    bh = int(cas.findtext("height"))
    features = []
    for feat in cas.find("features"):
        rects = []
        for r in feat.find("rects"):
            parts = r.text.split()
            rects.append(
                (int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]))
            )
        features.append(rects)
    stages = []
    for st in cas.find("stages"):
        threshold = float(st.findtext("stageThreshold"))
        weak = []
        for wc in st.find("weakClassifiers"):
            nodes = wc.findtext("internalNodes").split()
            leaves = wc.findtext("leafValues").split()
            if len(nodes) != 4:
                raise DataError("only stump weak classifiers are supported")
            feat_idx = int(nodes[2])
            weak.append(
                WeakClassifier(
                    rects=features[feat_idx],
                    threshold=float(nodes[3]),
                    left=float(leaves[0]),
                    right=float(leaves[1]),
                )
            )
        stages.append(CascadeStage(threshold=threshold, weak=weak))
    model = CascadeModel(base_window=(bw, bh), stages=stages)
    model.validate()
    return model
