"""Training losses and evaluation metrics for the point tracker.

Losses per frame: a per-layer cross-entropy pushing the correlation peak onto
the ground-truth cell (visible queries only), an L1 offset regression against
the last reference point (visible only), visibility and confidence sigmoid
cross-entropies, and an auxiliary per-layer confidence loss on the reference
points. The confidence target is 1 iff the prediction lands within a
width-scaled 8-pixel radius of an unoccluded ground-truth point.

Metrics follow the tracking-benchmark convention: coordinates are rescaled to
a 256x256 frame before thresholding at {1, 2, 4, 8, 16} pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tracker import TrackOutput

CONF_RADIUS_PX = 8.0          # at 512-wide frames; scaled by width / 512
METRIC_THRESHOLDS = (1, 2, 4, 8, 16)
METRIC_FRAME = 256.0


@dataclass
class FrameGT:
    """Ground truth for one frame: positions in image pixels plus visibility.
    Invisible points still carry coordinates."""
    p: np.ndarray                 # (N, 2)
    visible: np.ndarray           # (N,) bool


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    vis: float
    conf: float
    conf_ref: float
    total: float
    lambda_cls: float
    total_tensor: Tensor

    def as_dict(self) -> dict:
        return {"cls": self.cls, "reg": self.reg, "vis": self.vis,
                "conf": self.conf, "conf_ref": self.conf_ref, "total": self.total}


def cls_targets(p_gt: np.ndarray, grid_shape: tuple[int, int],
                image_shape: tuple[int, int],
                v_gt: np.ndarray | None = None) -> np.ndarray:
    """Flattened index of the stride-4 cell containing each ground-truth point.

    Visible points must lie inside the image; invisible ones may have left the
    frame (they still carry coordinates) and are clamped — their indices are
    masked out of the loss anyway.
    """
    gh, gw = grid_shape
    ih, iw = image_shape
    p = np.asarray(p_gt, dtype=np.float64)
    check = np.ones(len(p), dtype=bool) if v_gt is None else np.asarray(v_gt, bool)
    bad = (p[:, 0] < 0) | (p[:, 0] > iw - 1) | (p[:, 1] < 0) | (p[:, 1] > ih - 1)
    if np.any(bad & check):
        raise ValueError("cls_targets: visible ground-truth point outside the image")
    cx = np.clip(np.floor(p[:, 0] / 4.0), 0, gw - 1).astype(np.int64)
    cy = np.clip(np.floor(p[:, 1] / 4.0), 0, gh - 1).astype(np.int64)
    return cy * gw + cx


def cls_loss(correlations: list[Tensor], grid_shape: tuple[int, int],
             p_gt: np.ndarray, v_gt: np.ndarray,
             image_shape: tuple[int, int]) -> Tensor:
    """Sum over layers of CE between the correlation map and the gt cell,
    averaged over visible queries."""
    tgt = cls_targets(p_gt, grid_shape, image_shape, v_gt)
    mask = np.asarray(v_gt, dtype=bool)
    total = None
    for c in correlations:
        term = T.cross_entropy(c, tgt, mask)
        total = term if total is None else T.add(total, term)
    return total


def reg_loss(dp: Tensor, r_last: np.ndarray, p_gt: np.ndarray,
             v_gt: np.ndarray) -> Tensor:
    """Mean L1 (both coordinates, feature-grid units) over visible queries of
    the offset against p_gt/4 - r_last."""
    target = (np.asarray(p_gt, dtype=np.float64) / 4.0 - r_last).astype(dp.data.dtype)
    return T.l1_loss(dp, target, np.asarray(v_gt, dtype=bool))


def confidence_targets(p_pred: np.ndarray, p_gt: np.ndarray, v_gt: np.ndarray,
                       image_width: int) -> np.ndarray:
    """1 iff the prediction is within the scaled 8 px radius of a visible gt."""
    radius = CONF_RADIUS_PX * (image_width / 512.0)
    dist = np.linalg.norm(np.asarray(p_pred, np.float64) - np.asarray(p_gt, np.float64),
                          axis=-1)
    return ((dist < radius) & np.asarray(v_gt, dtype=bool)).astype(np.float64)


def vis_conf_losses(out: TrackOutput, gt: FrameGT,
                    image_shape: tuple[int, int]) -> tuple[Tensor, Tensor, Tensor]:
    """(vis, conf, conf_ref) losses for one frame.

    vis is unmasked over all queries; conf targets fold visibility in; the
    reference-point confidence is supervised at every layer against the same
    scaled radius (reference coords converted to image pixels first).
    """
    ih, iw = image_shape
    v_gt = np.asarray(gt.visible, dtype=bool)
    vis = T.binary_cross_entropy(out.v_logit, v_gt.astype(out.v_logit.data.dtype))

    conf_tgt = confidence_targets(out.p_out.data, gt.p, v_gt, iw)
    conf = T.binary_cross_entropy(out.rho_logit,
                                  conf_tgt.astype(out.rho_logit.data.dtype))

    radius = CONF_RADIUS_PX * (iw / 512.0)
    conf_ref = None
    for refs in out.references:
        d = np.linalg.norm(4.0 * refs.r.astype(np.float64)
                           - np.asarray(gt.p, np.float64)[:, None, :], axis=2)
        tgt = ((d < radius) & v_gt[:, None]).astype(refs.rho_r.data.dtype)
        term = T.binary_cross_entropy(refs.rho_r, tgt)
        conf_ref = term if conf_ref is None else T.add(conf_ref, term)
    return vis, conf, conf_ref


def frame_loss(out: TrackOutput, gt: FrameGT, image_shape: tuple[int, int],
               lambda_cls: float = 1.0) -> LossBreakdown:
    """Weighted loss for one frame: lambda_cls * cls + reg + vis + conf + conf_ref."""
    cls = cls_loss(out.correlations, out.grid_shape, gt.p, gt.visible, image_shape)
    reg = reg_loss(out.dp, out.r_last, gt.p, gt.visible)
    vis, conf, conf_ref = vis_conf_losses(out, gt, image_shape)
    total = T.add(T.add(T.add(T.scale(cls, lambda_cls), reg),
                        T.add(vis, conf)), conf_ref)
    return LossBreakdown(cls=cls.item(), reg=reg.item(), vis=vis.item(),
                         conf=conf.item(), conf_ref=conf_ref.item(),
                         total=total.item(), lambda_cls=lambda_cls,
                         total_tensor=total)


# ---------------------------------------------------------------------------
# metrics


def metrics(pred_p: np.ndarray, pred_v: np.ndarray,
            gt_p: np.ndarray, gt_v: np.ndarray,
            image_shape: tuple[int, int]) -> dict[str, float]:
    """Position/visibility metrics over aligned (frames, queries) arrays.

    Coordinates are rescaled to a 256x256 reference frame, errors are
    Euclidean, and a point counts as localized when its error is strictly
    below the threshold. pred_v may be probabilities (cut at 0.5) or booleans.

    Returns average Jaccard ("aj"), the mean localization fraction over the
    five thresholds ("delta_avg") plus each "delta_<t>", and the visibility
    accuracy over all pairs ("oa").
    """
    pred_p = np.asarray(pred_p, dtype=np.float64)
    gt_p = np.asarray(gt_p, dtype=np.float64)
    gt_v = np.asarray(gt_v, dtype=bool)
    pv = np.asarray(pred_v)
    if pv.dtype != np.bool_:
        pv = pv > 0.5
    if pred_p.shape != gt_p.shape or pv.shape != gt_v.shape:
        raise ValueError("metrics: prediction/ground-truth length mismatch")

    ih, iw = image_shape
    sx = METRIC_FRAME / iw
    sy = METRIC_FRAME / ih
    diff = (pred_p - gt_p) * np.array([sx, sy])
    err = np.linalg.norm(diff, axis=-1)

    report: dict[str, float] = {}
    deltas = []
    jaccards = []
    n_vis = int(gt_v.sum())
    for tau in METRIC_THRESHOLDS:
        within = err < tau
        delta = float((within & gt_v).sum() / n_vis) if n_vis else 0.0
        deltas.append(delta)
        report[f"delta_{tau}"] = delta
        tp = int((gt_v & pv & within).sum())
        fp = int((pv & (~gt_v | ~within)).sum())
        fn = int((gt_v & (~pv | ~within)).sum())
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else 1.0)
    report["delta_avg"] = float(np.mean(deltas))
    report["aj"] = float(np.mean(jaccards))
    report["oa"] = float((pv == gt_v).mean())
    return report
