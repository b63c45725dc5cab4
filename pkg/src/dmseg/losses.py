"""Segmentation and regression losses with analytic gradients.

Predictions are stacks with the class axis at position ``-4``, i.e.
``(C, z, y, x)`` or ``(B, C, z, y, x)``. Region losses reduce each class over
every other axis (batch included) before averaging over classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from dmseg.errors import InvalidArgumentError, ShapeError

BASELINES = ("wce", "gds", "tversky", "focal_tversky", "explog")
SEG_MODES = ("none", "dice", "mapdice") + BASELINES
# weight of the regression term; balances the two parameter-gradient norms at init
DEFAULT_ALPHA = 0.1


@dataclass
class LossConfig:
    epsilon: float = 1e-5
    alpha: float = DEFAULT_ALPHA
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    focal_gamma: float = 4.0 / 3.0
    explog_gamma_dice: float = 0.3
    explog_gamma_cross: float = 0.3
    explog_w_dice: float = 0.8
    explog_w_cross: float = 0.2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError("epsilon must be positive")
        if not self.alpha >= 0:
            raise InvalidArgumentError("alpha must be non-negative")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    # second gradient, only for the combined objective (w.r.t. the regressed map)
    grad_dm: np.ndarray | None = None
    terms: dict | None = None


def _class_sum(a: np.ndarray) -> np.ndarray:
    """Sum over everything but the class axis; returns shape ``(C,)``."""
    axes = tuple(i for i in range(a.ndim) if i != a.ndim - 4)
    return a.sum(axis=axes)


def _per_class(v: np.ndarray) -> np.ndarray:
    """Reshape a ``(C,)`` vector to broadcast against a class stack."""
    return v.reshape((-1,) + (1,) * 3)


def _check_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim < 4:
        raise ShapeError(f"expected a (..., C, z, y, x) stack, got shape {pred.shape}")
    return pred, target


def _soft_dice(pred: np.ndarray, target: np.ndarray, eps: float) -> LossResult:
    n_cls = pred.shape[-4]
    inter = _class_sum(pred * target)
    total = _class_sum(pred) + _class_sum(target)
    score = (2.0 * inter + eps) / (total + eps)
    value = 1.0 - score.mean()
    # d score_c / d p = (2 t (S + eps) - (2 I + eps)) / (S + eps)^2
    denom = _per_class(total + eps)
    grad = -(2.0 * target * denom - _per_class(2.0 * inter + eps)) / denom**2 / n_cls
    return LossResult(float(value), grad)


def dice_loss(pred, target, cfg: LossConfig | None = None) -> LossResult:
    """Soft Dice against a one-hot target, averaged over classes."""
    cfg = cfg or LossConfig()
    pred, target = _check_pair(pred, target)
    return _soft_dice(pred, target, cfg.epsilon)


def map_dice_loss(pred, target_dm, cfg: LossConfig | None = None) -> LossResult:
    """Dice with the ground-truth NI-DM acting as a per-voxel penalty map.

    ``target_dm`` replaces the binary target, so voxels near object
    boundaries (larger map values) weigh more in both the overlap and the
    normalizer.
    """
    cfg = cfg or LossConfig()
    pred, target_dm = _check_pair(pred, target_dm)
    if (target_dm < 0).any():
        raise InvalidArgumentError("map_dice_loss needs a non-negative penalty map (NIDM, not SNIDM)")
    return _soft_dice(pred, target_dm, cfg.epsilon)


def smooth_l1(pred_dm, target_dm) -> LossResult:
    pred_dm, target_dm = np.asarray(pred_dm, np.float64), np.asarray(target_dm, np.float64)
    if pred_dm.shape != target_dm.shape:
        raise ShapeError(f"prediction shape {pred_dm.shape} != target shape {target_dm.shape}")
    d = pred_dm - target_dm
    small = np.abs(d) < 1.0
    h = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    grad = np.where(small, d, np.sign(d)) / d.size
    return LossResult(float(h.mean()), grad)


def _tversky_index(pred, target, a, b, eps):
    inter = _class_sum(pred * target)
    fp = _class_sum(pred * (1.0 - target))
    fn = _class_sum((1.0 - pred) * target)
    num = inter + eps
    den = inter + a * fp + b * fn + eps
    ti = num / den
    # d TI / d p, per voxel: (t den - num (t + a (1 - t) - b t)) / den^2
    dden = target + a * (1.0 - target) - b * target
    dti = (target * _per_class(den) - _per_class(num) * dden) / _per_class(den) ** 2
    return ti, dti


def _wce(pred, target, cfg):
    n_cls = pred.shape[-4]
    counts = _class_sum(target)
    n_vox = target.size / n_cls
    freq = counts / n_vox
    weights = np.where(counts > 0, 1.0 / (n_cls * np.maximum(freq, 1e-300)), 0.0)
    w = _per_class(weights)
    # shifted so that p = 1 contributes exactly zero
    logp = np.log((pred + cfg.epsilon) / (1.0 + cfg.epsilon))
    value = -(w * target * logp).sum() / n_vox
    grad = -(w * target / (pred + cfg.epsilon)) / n_vox
    return LossResult(float(value), grad)


def _gds(pred, target, cfg):
    weights = 1.0 / np.maximum(_class_sum(target), 1.0) ** 2
    inter = _class_sum(pred * target)
    total = _class_sum(pred) + _class_sum(target)
    num = 2.0 * (weights * inter).sum() + cfg.epsilon
    den = (weights * total).sum() + cfg.epsilon
    w = _per_class(weights)
    grad = -(2.0 * w * target * den - num * w) / den**2
    return LossResult(float(1.0 - num / den), grad)


def _tversky(pred, target, cfg):
    n_cls = pred.shape[-4]
    ti, dti = _tversky_index(pred, target, cfg.tversky_alpha, cfg.tversky_beta, cfg.epsilon)
    return LossResult(float(1.0 - ti.mean()), -dti / n_cls)


def _focal_tversky(pred, target, cfg):
    n_cls = pred.shape[-4]
    ti, dti = _tversky_index(pred, target, cfg.tversky_alpha, cfg.tversky_beta, cfg.epsilon)
    expo = 1.0 / cfg.focal_gamma
    base = np.maximum(1.0 - ti, 0.0)
    value = (base**expo).mean()
    # derivative of base**expo blows up at base = 0 when expo < 1
    slope = expo * np.maximum(base, 1e-12) ** (expo - 1.0)
    grad = -_per_class(slope) * dti / n_cls
    return LossResult(float(value), grad)


def _explog(pred, target, cfg):
    n_cls = pred.shape[-4]
    eps = cfg.epsilon
    # Dice term: mean_c (-ln dice_c)^g
    inter = _class_sum(pred * target)
    total = _class_sum(pred) + _class_sum(target)
    dice = (2.0 * inter + eps) / (total + eps)
    neglog = np.maximum(-np.log(dice), 0.0)
    gd = cfg.explog_gamma_dice
    dice_term = (neglog**gd).mean()
    ddice = (2.0 * target * _per_class(total + eps) - _per_class(2.0 * inter + eps)) \
        / _per_class(total + eps) ** 2
    outer = gd * np.maximum(neglog, 1e-12) ** (gd - 1.0) * (-1.0 / dice)
    grad_dice = _per_class(outer) * ddice / n_cls

    # Cross term: mean_x w_l (-ln p_l)^g over the true class l of each voxel
    counts = _class_sum(target)
    weights = np.where(counts > 0, np.sqrt(counts.sum() / np.maximum(counts, 1e-300)), 0.0)
    w = _per_class(weights)
    n_vox = target.size / n_cls
    p = np.clip(pred, eps, 1.0)
    nlp = -np.log(p)
    gc = cfg.explog_gamma_cross
    cross_term = (w * target * nlp**gc).sum() / n_vox
    inside = (pred > eps) & (pred < 1.0)
    dnlp = np.where(inside, -1.0 / p, 0.0)
    grad_cross = w * target * gc * np.maximum(nlp, 1e-12) ** (gc - 1.0) * dnlp / n_vox

    value = cfg.explog_w_dice * dice_term + cfg.explog_w_cross * cross_term
    grad = cfg.explog_w_dice * grad_dice + cfg.explog_w_cross * grad_cross
    return LossResult(float(value), grad)


_BASELINE_IMPLS = {
    "wce": _wce,
    "gds": _gds,
    "tversky": _tversky,
    "focal_tversky": _focal_tversky,
    "explog": _explog,
}


def baseline_loss(kind: str, pred, target, cfg: LossConfig | None = None) -> LossResult:
    """One of the imbalance-aware comparison losses.

    ``wce``: cross-entropy with inverse-frequency class weights.
    ``gds``: generalized Dice with ``1/(sum target)^2`` class weights.
    ``tversky`` / ``focal_tversky``: Tversky index loss and ``(1 - TI)^(1/gamma)``.
    ``explog``: weighted sum of ``(-ln Dice)^g`` and ``(-ln p)^g`` terms.
    """
    cfg = cfg or LossConfig()
    kind = kind.lower().replace("-", "_")
    if kind not in _BASELINE_IMPLS:
        raise InvalidArgumentError(f"unknown baseline loss {kind!r}")
    if cfg.focal_gamma <= 0 or cfg.explog_gamma_dice <= 0 or cfg.explog_gamma_cross <= 0:
        raise InvalidArgumentError("gamma parameters must be positive")
    if cfg.tversky_alpha + cfg.tversky_beta <= 0:
        raise InvalidArgumentError("tversky alpha + beta must be positive")
    pred, target = _check_pair(pred, target)
    return _BASELINE_IMPLS[kind](pred, target, cfg)


def segmentation_loss(mode: str, pred, target, cfg: LossConfig | None = None) -> LossResult:
    if mode == "dice":
        return dice_loss(pred, target, cfg)
    if mode == "mapdice":
        return map_dice_loss(pred, target, cfg)
    return baseline_loss(mode, pred, target, cfg)


def combined_loss(seg: str, pred_prob=None, target=None, pred_dm=None, target_dm=None,
                  cfg: LossConfig | None = None) -> LossResult:
    """``L_seg + alpha * smooth_l1``; ``seg='none'`` leaves only the regression term.

    ``target`` is the one-hot stack for Dice and baselines, or the per-class
    NIDM for MapDice. ``grad`` is w.r.t. ``pred_prob`` and ``grad_dm`` w.r.t.
    ``pred_dm``.
    """
    cfg = cfg or LossConfig()
    seg = seg.lower()
    if seg not in SEG_MODES:
        raise InvalidArgumentError(f"unknown segmentation loss {seg!r}")
    terms = {}
    value = 0.0
    grad = None
    grad_dm = None
    if seg != "none":
        if pred_prob is None or target is None:
            raise InvalidArgumentError(f"{seg} loss needs pred_prob and target")
        seg_res = segmentation_loss(seg, pred_prob, target, cfg)
        value += seg_res.value
        grad = seg_res.grad
        terms[seg] = seg_res.value
    if pred_dm is not None or target_dm is not None or seg == "none":
        if pred_dm is None or target_dm is None:
            raise InvalidArgumentError("regression term needs pred_dm and target_dm")
        reg = smooth_l1(pred_dm, target_dm)
        value += cfg.alpha * reg.value
        grad_dm = cfg.alpha * reg.grad
        terms["smooth_l1"] = reg.value
    if grad is None and pred_prob is not None:
        grad = np.zeros(np.shape(pred_prob))
    return LossResult(float(value), grad, grad_dm, terms)


def write_loss_csv(path, rows) -> None:
    """Write ``(step, loss_name, value)`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_name", "value"])
        for step, name, value in rows:
            writer.writerow([step, name, repr(float(value))])
