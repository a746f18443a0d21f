"""Minimal single-class, anchor-free grid detector used as the task head.

One prediction per cell of a G x G grid (G = padded side / 8): an
objectness logit and a box encoded as ``(dx, dy, log w, log h)`` where
``dx, dy`` are offsets from the cell centre and ``w, h`` are in cell units.
This is a stand-in for a real detector, not a YOLO reimplementation.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .metrics import BoundingBox, Detection, iou
from .net import NetConfig, Params, padded_size
from .tensor import Tensor

BOX_LOSS_WEIGHT = 1.0
LOG_SIZE_CLIP = 8.0
# Initial objectness probability. Most cells are background, so starting at
# 0.5 makes the first updates dominated by a huge negative-class gradient that
# also floods the enhancer and saturates its residual.
OBJECTNESS_PRIOR = 0.03


def head_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.head_channels
    return {
        "head.conv1.weight": (c, 3, 3, 3),
        "head.conv1.bias": (c,),
        "head.conv2.weight": (c, c, 3, 3),
        "head.conv2.bias": (c,),
        "head.conv3.weight": (c, c, 3, 3),
        "head.conv3.bias": (c,),
        "head.pred.weight": (5, c, 1, 1),
        "head.pred.bias": (5,),
    }


def init_head_params(cfg: NetConfig, rng: np.random.Generator, dtype=None) -> Params:
    dtype = dtype or T.default_dtype()
    params: Params = {}
    for name, shape in head_shapes(cfg).items():
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    params["head.pred.bias"].data[0] = math.log(OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR))
    return params


class GridPrediction(NamedTuple):
    objectness: Tensor  # (N, 1, G, G) logits
    boxes: Tensor  # (N, 4, G, G)

    @property
    def grid(self) -> tuple[int, int]:
        return self.objectness.shape[2:]


def head_forward(enhanced: Tensor, params: Params, cfg: NetConfig) -> GridPrediction:
    """Three stride-2 conv blocks and a 1x1 prediction conv."""
    _, _, h, w = enhanced.shape
    x = T.reflect_pad(enhanced, padded_size(h) - h, padded_size(w) - w)
    for i in (1, 2, 3):
        x = T.conv2d(x, params[f"head.conv{i}.weight"], params[f"head.conv{i}.bias"], stride=2, padding=1)
        x = T.leaky_relu(x, cfg.leaky_slope)
    out = T.conv2d(x, params["head.pred.weight"], params["head.pred.bias"])
    return GridPrediction(T.slice_channels(out, 0, 1), T.slice_channels(out, 1, 5))


# ------------------------------------------------------------------ targets


def encode_targets(gts: Sequence, gh: int, gw: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Objectness mask (1, gh, gw) and box targets (4, gh, gw) for one image.

    Each ground truth goes to the cell holding its centre; when two share a
    cell the larger box wins.
    """
    mask = np.zeros((1, gh, gw), dtype=dtype)
    boxes = np.zeros((4, gh, gw), dtype=dtype)
    area = np.full((gh, gw), -1.0)
    for g in gts:
        col = min(max(int(math.floor(g.cx * gw)), 0), gw - 1)
        row = min(max(int(math.floor(g.cy * gh)), 0), gh - 1)
        a = g.w * g.h
        if a <= area[row, col]:
            continue
        area[row, col] = a
        mask[0, row, col] = 1.0
        boxes[:, row, col] = (
            g.cx * gw - (col + 0.5),
            g.cy * gh - (row + 0.5),
            math.log(max(g.w * gw, 1e-6)),
            math.log(max(g.h * gh, 1e-6)),
        )
    return mask, boxes


def detection_loss(pred: GridPrediction, gts_per_image: Sequence[Sequence]) -> Tensor:
    """Per-image sum of objectness BCE over all cells plus smooth-L1 box error
    on assigned cells, averaged over the batch."""
    n = pred.objectness.shape[0]
    if len(gts_per_image) != n:
        raise ValueError(f"got {len(gts_per_image)} ground-truth lists for a batch of {n}")
    gh, gw = pred.grid
    dtype = pred.objectness.dtype
    masks = np.zeros((n, 1, gh, gw), dtype=dtype)
    targets = np.zeros((n, 4, gh, gw), dtype=dtype)
    for i, gts in enumerate(gts_per_image):
        masks[i], targets[i] = encode_targets(gts, gh, gw, dtype)
    obj = T.bce_with_logits_sum(pred.objectness, masks)
    box = T.smooth_l1_sum(pred.boxes, targets, np.broadcast_to(masks, targets.shape))
    return T.mul(T.add(obj, T.mul(box, BOX_LOSS_WEIGHT)), 1.0 / n)


# ----------------------------------------------------------------- decoding


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression; output sorted by descending confidence."""
    order = sorted(dets, key=lambda d: -d.confidence)
    keep: list[Detection] = []
    for d in order:
        if all(iou(d.box, k.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep


def decode_predictions(pred: GridPrediction, conf_threshold: float = 0.25, nms_iou: float = 0.5, index: int = 0) -> list[Detection]:
    """Detections of batch item ``index`` above ``conf_threshold``, after NMS."""
    logits = pred.objectness.data[index, 0].astype(np.float64)
    enc = pred.boxes.data[index].astype(np.float64)
    gh, gw = logits.shape
    conf = 1.0 / (1.0 + np.exp(-np.clip(logits, -60, 60)))
    dets = []
    for row, col in zip(*np.nonzero(conf > conf_threshold)):
        dx, dy, lw, lh = enc[:, row, col]
        cx = (col + 0.5 + dx) / gw
        cy = (row + 0.5 + dy) / gh
        bw = math.exp(min(max(lw, -LOG_SIZE_CLIP), LOG_SIZE_CLIP)) / gw
        bh = math.exp(min(max(lh, -LOG_SIZE_CLIP), LOG_SIZE_CLIP)) / gh
        x0, x1 = min(max(cx - bw / 2, 0.0), 1.0), min(max(cx + bw / 2, 0.0), 1.0)
        y0, y1 = min(max(cy - bh / 2, 0.0), 1.0), min(max(cy + bh / 2, 0.0), 1.0)
        dets.append(Detection(BoundingBox.from_corners(x0, y0, x1, y1), float(conf[row, col])))
    return nms(dets, nms_iou)
