"""Loss stack for oriented-box training, with analytic gradients.

Classification uses a focal loss over per-class probabilities in which
both branches carry the alpha weight:

    -1/M * sum( alpha * (1-p)^beta * log(p)        where y = 1
                alpha * p^beta     * log(1-p)      otherwise )

Box regression combines a binary cross entropy on centerness, a
smooth-L1 on the ltrb offsets and a (1 - IoU) term on the axis-aligned
boxes the offsets span. Orientation regression combines a smooth-L1 on
the (w, h) offsets with a (1 - IoU) term computed on the "inner" boxes
[|l-w|, |t-h|, |r-w|, |b-h|], a cheap stand-in for the rotated overlap.
The composite divides all three sums once by the clamped positive count.

Every operation returns (value, gradient with respect to predictions);
:func:`grad_check` verifies any of them against central differences and
:func:`fit_demo` drives free per-location predictions to ground truth by
backtracking gradient descent as an end-to-end check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import Diverged, NonFiniteScore, ShapeMismatch
from .geometry import Quad, quad_from_offsets
from .targets import RegressionTarget

_UNION_TINY = 1e-12
# Raw parameter bound in fit_demo; keeps sigmoids strictly inside (0, 1)
# and exponentials finite in float64.
_RAW_BOUND = 30.0


@dataclass(frozen=True)
class LossWeights:
    """Scale coefficients of the composite loss.

    reg_weight / ori_weight scale the box and orientation sums in the
    composite; reg_l1_weight / ori_l1_weight scale the smooth-L1 terms
    inside those sums; focal_alpha / focal_beta parameterize the focal
    loss; smooth_l1_delta is the quadratic-to-linear switch point.
    """

    reg_weight: float = 1.0
    ori_weight: float = 1.0
    reg_l1_weight: float = 0.2
    ori_l1_weight: float = 0.2
    focal_alpha: float = 0.3
    focal_beta: float = 4.0
    smooth_l1_delta: float = 1.0

    def __post_init__(self):
        for name in (
            "reg_weight",
            "ori_weight",
            "reg_l1_weight",
            "ori_l1_weight",
            "focal_alpha",
            "focal_beta",
            "smooth_l1_delta",
        ):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    """Composite loss and its unnormalized per-branch sums.

    total = (cls_loss + reg_weight * reg_loss + ori_weight * ori_loss)
            / normalizer, where normalizer = max(num_pos, 1).
    """

    total: float
    cls_loss: float
    reg_loss: float
    ori_loss: float
    num_pos: int
    normalizer: int


@dataclass(frozen=True)
class Prediction:
    """Raw per-location network outputs (probabilities, offsets)."""

    class_scores: tuple[float, ...]
    centerness_score: float
    ltrb: tuple[float, float, float, float]
    wh: tuple[float, float]

    def __post_init__(self):
        for s in (*self.class_scores, self.centerness_score):
            if not (0.0 < s < 1.0):
                raise ValueError(f"scores must lie strictly in (0, 1), got {s}")
        if any(v <= 0 for v in self.ltrb):
            raise ValueError(f"ltrb offsets must be positive, got {self.ltrb}")
        if any(v < 0 for v in self.wh):
            raise ValueError(f"wh offsets must be >= 0, got {self.wh}")


@dataclass
class PredictionBatch:
    """Dense per-location predictions as arrays.

    class_scores: (L, C), centerness: (L,), ltrb: (L, 4), wh: (L, 2).
    """

    class_scores: np.ndarray
    centerness: np.ndarray
    ltrb: np.ndarray
    wh: np.ndarray

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=float)
        self.centerness = np.asarray(self.centerness, dtype=float)
        self.ltrb = np.asarray(self.ltrb, dtype=float)
        self.wh = np.asarray(self.wh, dtype=float)
        n = self.class_scores.shape[0] if self.class_scores.ndim == 2 else -1
        if (
            self.class_scores.ndim != 2
            or self.centerness.shape != (n,)
            or self.ltrb.shape != (n, 4)
            or self.wh.shape != (n, 2)
        ):
            raise ShapeMismatch(
                "expected class_scores (L, C), centerness (L,), ltrb (L, 4), wh (L, 2)"
            )

    @property
    def num_locations(self) -> int:
        return self.class_scores.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[1]

    @classmethod
    def from_predictions(cls, preds: Sequence[Prediction]) -> "PredictionBatch":
        return cls(
            np.array([p.class_scores for p in preds], dtype=float).reshape(len(preds), -1),
            np.array([p.centerness_score for p in preds], dtype=float),
            np.array([p.ltrb for p in preds], dtype=float),
            np.array([p.wh for p in preds], dtype=float),
        )

    def at(self, i: int) -> Prediction:
        return Prediction(
            tuple(self.class_scores[i]),
            float(self.centerness[i]),
            tuple(self.ltrb[i]),
            tuple(self.wh[i]),
        )


def _require_open_unit(scores: np.ndarray) -> None:
    if scores.size and (scores.min() <= 0.0 or scores.max() >= 1.0):
        raise NonFiniteScore("scores must lie strictly inside (0, 1)")


def focal_loss(
    scores,
    targets,
    alpha: float,
    beta: float,
    normalizer: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Focal loss over a score map and matching binary target map.

    Returns the loss and its gradient with respect to every score.
    normalizer is the keypoint count M dividing the sum (>= 1).
    """
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if scores.shape != targets.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs targets {targets.shape}")
    if normalizer < 1:
        raise ValueError(f"normalizer must be >= 1, got {normalizer}")
    _require_open_unit(scores)

    pos = targets == 1.0
    om = 1.0 - scores
    log_s = np.log(scores)
    log_om = np.log(om)
    branch = np.where(pos, alpha * om**beta * log_s, alpha * scores**beta * log_om)
    loss = -float(branch.sum()) / normalizer
    # d/ds of -branch, branch by branch
    grad_pos = -alpha * (-beta * om ** (beta - 1.0) * log_s + om**beta / scores)
    grad_neg = -alpha * (beta * scores ** (beta - 1.0) * log_om - scores**beta / om)
    grad = np.where(pos, grad_pos, grad_neg) / normalizer
    return loss, grad


def bce(pred: float, target: float) -> tuple[float, float]:
    """Binary cross entropy -(t log p + (1-t) log(1-p)) with d/dp."""
    if not (0.0 < pred < 1.0):
        raise NonFiniteScore(f"prediction must lie strictly in (0, 1), got {pred}")
    if not (0.0 <= target <= 1.0):
        raise ValueError(f"target must lie in [0, 1], got {target}")
    loss = -(target * math.log(pred) + (1.0 - target) * math.log(1.0 - pred))
    grad = (pred - target) / (pred * (1.0 - pred))
    return loss, grad


def _bce_batch(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _require_open_unit(pred)
    vals = -(target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred))
    grads = (pred - target) / (pred * (1.0 - pred))
    return vals, grads


def smooth_l1(pred, target, delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Summed smooth-L1: 0.5 e^2/delta below delta, |e| - 0.5 delta above."""
    pred = np.atleast_1d(np.asarray(pred, dtype=float))
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    e = pred - target
    small = np.abs(e) < delta
    vals = np.where(small, 0.5 * e * e / delta, np.abs(e) - 0.5 * delta)
    grad = np.where(small, e / delta, np.sign(e))
    return float(vals.sum()), grad


def inner_box(ltrb, wh) -> np.ndarray:
    """Inner-box offsets [|l-w|, |t-h|, |r-w|, |b-h|]."""
    l, t, r, b = (float(v) for v in ltrb)
    w, h = (float(v) for v in wh)
    return np.array([abs(l - w), abs(t - h), abs(r - w), abs(b - h)])


def _offset_iou(
    pred: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """IoU of boxes given as (L, 4) [l, t, r, b] offsets around shared points.

    Both boxes contain their anchor point, so the overlap width/height are
    min(l, l') + min(r, r') and min(t, t') + min(b, b'). Returns per-row
    IoU and d IoU / d pred; ties in the mins take the gradient from the
    prediction side.
    """
    wi = np.minimum(pred[:, 0], target[:, 0]) + np.minimum(pred[:, 2], target[:, 2])
    hi = np.minimum(pred[:, 1], target[:, 1]) + np.minimum(pred[:, 3], target[:, 3])
    inter = wi * hi
    area_p = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    area_t = (target[:, 0] + target[:, 2]) * (target[:, 1] + target[:, 3])
    union = area_p + area_t - inter

    active = (pred <= target).astype(float)  # pred coordinate drives the min
    d_inter = active * np.stack([hi, wi, hi, wi], axis=1)
    d_area = np.stack(
        [
            pred[:, 1] + pred[:, 3],
            pred[:, 0] + pred[:, 2],
            pred[:, 1] + pred[:, 3],
            pred[:, 0] + pred[:, 2],
        ],
        axis=1,
    )
    safe = union > _UNION_TINY
    u = np.where(safe, union, 1.0)
    iou = np.where(safe, inter / u, 0.0)
    d_union = d_area - d_inter
    grad = np.where(
        safe[:, None], (d_inter * u[:, None] - inter[:, None] * d_union) / (u * u)[:, None], 0.0
    )
    return iou, grad


def iou_hbb_loss(pred_ltrb, target_ltrb) -> tuple[float, np.ndarray]:
    """1 - IoU of the axis-aligned boxes two ltrb offset vectors span."""
    p = np.asarray(pred_ltrb, dtype=float).reshape(1, 4)
    t = np.asarray(target_ltrb, dtype=float).reshape(1, 4)
    iou, grad = _offset_iou(p, t)
    return float(1.0 - iou[0]), -grad[0]


def _inner_sign(ltrb: np.ndarray, wh: np.ndarray) -> np.ndarray:
    """sign(ltrb - [w, h, w, h]); 0 at the kink (chosen subgradient)."""
    return np.sign(ltrb - wh[:, [0, 1, 0, 1]])


def iou_obb_loss(pred, target) -> tuple[float, np.ndarray]:
    """1 - IoU of the inner boxes of two [l, t, r, b, w, h] vectors.

    Returns the loss with its gradient w.r.t. the six prediction entries;
    absolute-value kinks contribute a zero subgradient, degenerate inner
    boxes yield loss 1 with the gradient of the surviving smooth branch.
    """
    p = np.asarray(pred, dtype=float).reshape(6)
    t = np.asarray(target, dtype=float).reshape(6)
    p_ltrb, p_wh = p[:4].reshape(1, 4), p[4:].reshape(1, 2)
    t_ltrb, t_wh = t[:4].reshape(1, 4), t[4:].reshape(1, 2)

    inner_p = np.abs(p_ltrb - p_wh[:, [0, 1, 0, 1]])
    inner_t = np.abs(t_ltrb - t_wh[:, [0, 1, 0, 1]])
    iou, d_iou = _offset_iou(inner_p, inner_t)
    sign = _inner_sign(p_ltrb, p_wh)

    grad = np.empty(6)
    grad[:4] = (-d_iou * sign)[0]
    grad[4] = (d_iou[:, 0] * sign[:, 0] + d_iou[:, 2] * sign[:, 2])[0]
    grad[5] = (d_iou[:, 1] * sign[:, 1] + d_iou[:, 3] * sign[:, 3])[0]
    return float(1.0 - iou[0]), grad


@dataclass
class TotalLossResult:
    """Composite loss breakdown plus gradients for every prediction field."""

    breakdown: LossBreakdown
    class_score_grad: np.ndarray
    centerness_grad: np.ndarray
    ltrb_grad: np.ndarray
    wh_grad: np.ndarray


def total_loss(
    preds: PredictionBatch,
    targets: Sequence[RegressionTarget],
    weights: LossWeights,
) -> TotalLossResult:
    """Composite loss over aligned prediction and target maps.

    Classification is scored on every location; centerness, box and
    orientation terms only on positives. The three sums are divided once
    by max(num_pos, 1).
    """
    n = preds.num_locations
    if len(targets) != n:
        raise ShapeMismatch(f"{n} predictions vs {len(targets)} targets")
    num_classes = preds.num_classes
    labels = np.array([t.class_id for t in targets], dtype=int)
    if labels.size and labels.max() > num_classes:
        raise ShapeMismatch(
            f"target class id {labels.max()} exceeds {num_classes} prediction classes"
        )

    pos_idx = np.flatnonzero(labels > 0)
    num_pos = int(pos_idx.size)
    norm = max(num_pos, 1)

    onehot = np.zeros((n, num_classes))
    if num_pos:
        onehot[pos_idx, labels[pos_idx] - 1] = 1.0
    cls_sum, cls_grad = focal_loss(
        preds.class_scores, onehot, weights.focal_alpha, weights.focal_beta, normalizer=1.0
    )

    centerness_grad = np.zeros(n)
    ltrb_grad = np.zeros((n, 4))
    wh_grad = np.zeros((n, 2))
    reg_sum = 0.0
    ori_sum = 0.0
    if num_pos:
        for i in pos_idx:
            t = targets[i]
            if t.ltrb is None or t.wh is None or t.centerness is None:
                raise ValueError(f"positive target at index {i} lacks regression values")
        t_cent = np.array([targets[i].centerness for i in pos_idx])
        t_ltrb = np.array([targets[i].ltrb for i in pos_idx])
        t_wh = np.array([targets[i].wh for i in pos_idx])
        p_cent = preds.centerness[pos_idx]
        p_ltrb = preds.ltrb[pos_idx]
        p_wh = preds.wh[pos_idx]

        bce_vals, bce_grads = _bce_batch(p_cent, t_cent)
        e_b = p_ltrb - t_ltrb
        small_b = np.abs(e_b) < weights.smooth_l1_delta
        sl1_b = np.where(
            small_b, 0.5 * e_b * e_b / weights.smooth_l1_delta, np.abs(e_b) - 0.5 * weights.smooth_l1_delta
        )
        sl1_b_grad = np.where(small_b, e_b / weights.smooth_l1_delta, np.sign(e_b))
        iou_h, d_iou_h = _offset_iou(p_ltrb, t_ltrb)
        reg_sum = float(bce_vals.sum() + weights.reg_l1_weight * sl1_b.sum() + (1.0 - iou_h).sum())

        e_o = p_wh - t_wh
        small_o = np.abs(e_o) < weights.smooth_l1_delta
        sl1_o = np.where(
            small_o, 0.5 * e_o * e_o / weights.smooth_l1_delta, np.abs(e_o) - 0.5 * weights.smooth_l1_delta
        )
        sl1_o_grad = np.where(small_o, e_o / weights.smooth_l1_delta, np.sign(e_o))
        inner_p = np.abs(p_ltrb - p_wh[:, [0, 1, 0, 1]])
        inner_t = np.abs(t_ltrb - t_wh[:, [0, 1, 0, 1]])
        iou_o, d_iou_o = _offset_iou(inner_p, inner_t)
        sign = _inner_sign(p_ltrb, p_wh)
        ori_sum = float(weights.ori_l1_weight * sl1_o.sum() + (1.0 - iou_o).sum())

        centerness_grad[pos_idx] = weights.reg_weight * bce_grads / norm
        d_reg_ltrb = weights.reg_l1_weight * sl1_b_grad - d_iou_h
        d_ori_ltrb = -d_iou_o * sign
        ltrb_grad[pos_idx] = (
            weights.reg_weight * d_reg_ltrb + weights.ori_weight * d_ori_ltrb
        ) / norm
        d_ori_wh = np.stack(
            [
                d_iou_o[:, 0] * sign[:, 0] + d_iou_o[:, 2] * sign[:, 2],
                d_iou_o[:, 1] * sign[:, 1] + d_iou_o[:, 3] * sign[:, 3],
            ],
            axis=1,
        )
        wh_grad[pos_idx] = (
            weights.ori_weight * (weights.ori_l1_weight * sl1_o_grad + d_ori_wh) / norm
        )

    total = (cls_sum + weights.reg_weight * reg_sum + weights.ori_weight * ori_sum) / norm
    breakdown = LossBreakdown(
        total=float(total),
        cls_loss=float(cls_sum),
        reg_loss=reg_sum,
        ori_loss=ori_sum,
        num_pos=num_pos,
        normalizer=norm,
    )
    return TotalLossResult(breakdown, cls_grad / norm, centerness_grad, ltrb_grad, wh_grad)


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn maps a parameter vector to (value, gradient). Coordinates
    where both gradients are below 1e-7 in magnitude count as agreeing
    zeros. The caller is responsible for keeping `point` away from kinks
    of the loss.
    """
    point = np.asarray(point, dtype=float)
    _, analytic = loss_fn(point)
    analytic = np.asarray(analytic, dtype=float)
    if analytic.shape != point.shape:
        raise ShapeMismatch(f"gradient {analytic.shape} vs point {point.shape}")
    worst = 0.0
    for i in range(point.size):
        step = np.zeros_like(point)
        step.flat[i] = eps
        f_plus, _ = loss_fn(point + step)
        f_minus, _ = loss_fn(point - step)
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic.flat[i])
        denom = max(abs(a), abs(numeric))
        if denom < 1e-7:
            continue
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    nonneg = z >= 0
    out[nonneg] = 1.0 / (1.0 + np.exp(-z[nonneg]))
    ez = np.exp(z[~nonneg])
    out[~nonneg] = ez / (1.0 + ez)
    return out


@dataclass
class FitDemoResult:
    """Gradient-descent fit over free per-location predictions."""

    trajectory: list[LossBreakdown]
    positive_indices: list[int]
    decoded_quads: list[Quad]
    fused_scores: list[float]
    final_batch: PredictionBatch


def _fit_params_to_batch(raw: np.ndarray, num_classes: int) -> PredictionBatch:
    """Raw (L, C + 7) parameter block -> predictions.

    Columns: class logits (C), centerness logit, log ltrb (4), log wh (2).
    """
    c = num_classes
    return PredictionBatch(
        _sigmoid(raw[:, :c]),
        _sigmoid(raw[:, c]),
        np.exp(raw[:, c + 1 : c + 5]),
        np.exp(raw[:, c + 5 :]),
    )


def fit_demo(
    targets: Sequence[RegressionTarget],
    weights: LossWeights,
    steps: int = 2000,
    lr: float = 0.05,
    num_classes: int | None = None,
) -> FitDemoResult:
    """Drive free predictions to the targets by gradient descent.

    Per-location predictions are parameterized unconstrained (logits for
    the scores, log-space for the offsets, so probabilities stay inside
    (0, 1) and offsets stay positive) and initialized at zero. Each step
    moves along the negative gradient with an adaptive step size seeded
    by lr: the step doubles after an accepted move and halves until the
    loss does not increase (backtracking), which keeps the trajectory
    non-increasing even across the kinks of the L1-style terms and
    independent of how many positives share the normalizer. Returns the
    loss trajectory (steps + 1 entries) and, for every positive
    location, the quad decoded from the final offsets around that
    location's image point.

    Raises Diverged if the loss ever becomes non-finite.
    """
    if num_classes is None:
        num_classes = max((t.class_id for t in targets), default=0)
    if num_classes < 1:
        raise ValueError("at least one class required")
    pos_indices = [i for i, t in enumerate(targets) if t.is_positive]
    if not pos_indices:
        raise ValueError("fit_demo needs at least one positive target")

    n = len(targets)
    raw = np.zeros((n, num_classes + 7))

    def evaluate(params: np.ndarray) -> TotalLossResult:
        return total_loss(_fit_params_to_batch(params, num_classes), targets, weights)

    result = evaluate(raw)
    if not math.isfinite(result.breakdown.total):
        raise Diverged("loss non-finite at initialization")
    trajectory: list[LossBreakdown] = [result.breakdown]
    frozen = lr == 0.0
    step_size = lr
    for _ in range(steps):
        if not frozen:
            batch = _fit_params_to_batch(raw, num_classes)
            # chain rule through the sigmoid / exp parameterizations
            grad = np.concatenate(
                [
                    result.class_score_grad * batch.class_scores * (1.0 - batch.class_scores),
                    (result.centerness_grad * batch.centerness * (1.0 - batch.centerness))[:, None],
                    result.ltrb_grad * batch.ltrb,
                    result.wh_grad * batch.wh,
                ],
                axis=1,
            )
            trial = min(step_size * 2.0, 1e4)
            accepted = False
            for _try in range(60):
                candidate = np.clip(raw - trial * grad, -_RAW_BOUND, _RAW_BOUND)
                cand_result = evaluate(candidate)
                if (
                    math.isfinite(cand_result.breakdown.total)
                    and cand_result.breakdown.total <= result.breakdown.total
                ):
                    accepted = not np.array_equal(candidate, raw)
                    raw = candidate
                    result = cand_result
                    step_size = trial
                    break
                trial *= 0.5
            # no step along the subgradient improves: the iteration is a
            # fixed point, so later steps would reproduce it exactly
            frozen = not accepted
        trajectory.append(result.breakdown)

    final_batch = _fit_params_to_batch(raw, num_classes)
    decoded: list[Quad] = []
    fused: list[float] = []
    for i in pos_indices:
        t = targets[i]
        decoded.append(quad_from_offsets(t.point, final_batch.ltrb[i], final_batch.wh[i]))
        fused.append(
            float(
                final_batch.class_scores[i, t.class_id - 1] * final_batch.centerness[i]
            )
        )
    return FitDemoResult(trajectory, pos_indices, decoded, fused, final_batch)
