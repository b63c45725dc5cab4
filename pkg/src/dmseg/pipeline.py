"""Two-stage training: LR-Net pretraining on ground truth, then M-Net training through it.

Stage one fits the LR-Net to map one-hot ground-truth masks onto per-class
distance maps. Stage two trains the M-Net with a segmentation loss plus
``alpha * smooth_l1`` between the LR-Net's reading of the M-Net probabilities
and the ground-truth maps. At inference the LR-Net is dropped.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from dmseg import distance, losses, metrics
from dmseg.autograd import tensor as T
from dmseg.autograd.checkpoint import Checkpoint
from dmseg.autograd.nn import LRNET_HEADS, Network, lrnet_spec, mnet_spec
from dmseg.autograd.optim import Adam, PlateauDecay
from dmseg.datagen import dataset_hash, window_transform
from dmseg.errors import InvalidArgumentError, TrainingDivergedError
from dmseg.volume import Volume, one_hot

log = logging.getLogger(__name__)

NUM_CLASSES = 2
# overlap losses are scored on foreground channels unless include_background is set
OVERLAP_LOSSES = ("dice", "mapdice", "tversky", "focal_tversky")


def target_variant(lrnet_variant: str) -> str:
    """Distance-map variant regressed by an LR-Net head (``nidms`` regresses NIDM)."""
    if lrnet_variant not in LRNET_HEADS:
        raise InvalidArgumentError(f"unknown distance-map variant {lrnet_variant!r}")
    return "nidm" if lrnet_variant == "nidms" else lrnet_variant


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise InvalidArgumentError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class PretrainConfig:
    epochs: int = 150
    batch_size: int = 4
    lr: float = 3e-3
    lr_decay: float = 0.8
    lr_patience: int = 5
    width: int = 8
    seed: int = 0
    holdout_fraction: float = 0.2
    threshold: float = 0.1
    label_smoothing: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> PretrainConfig:
        return _from_dict(cls, d)


@dataclass
class TrainConfig:
    name: str = ""
    dm_variant: str = "nidm"
    seg_loss: str = "mapdice"
    use_lrnet: bool = True
    alpha: float = losses.DEFAULT_ALPHA
    freeze_lrnet: bool = True
    epochs: int = 40
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_patience: int = 4
    early_stop_patience: int = 12
    mnet_width: int = 8
    epsilon: float = 1e-5
    include_background: bool = False
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    window: tuple[float, float] = (-160.0, 240.0)

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        self.window = tuple(float(w) for w in self.window)
        self.seg_loss = self.seg_loss.lower().replace("-", "_")
        target_variant(self.dm_variant)
        if self.seg_loss not in losses.SEG_MODES:
            raise InvalidArgumentError(f"unknown seg_loss {self.seg_loss!r}")
        if not self.use_lrnet and self.seg_loss == "none":
            raise InvalidArgumentError("a run without the LR-Net needs a segmentation loss")
        if self.use_lrnet and not self.alpha > 0:
            raise InvalidArgumentError("alpha must be positive when the regression term is active")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise InvalidArgumentError(f"split fractions must be non-negative and sum to 1, got {self.split}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return _from_dict(cls, d)

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(epsilon=self.epsilon, alpha=self.alpha if self.use_lrnet else 0.0)

    def label(self) -> str:
        if self.name:
            return self.name
        parts = ["MNet"]
        if self.seg_loss != "none":
            parts.append(self.seg_loss)
        if self.use_lrnet:
            parts.append(("LR-Net" if self.freeze_lrnet else "uLR-Net") + f"[{self.dm_variant}]")
            parts.append(f"{self.alpha:g}*smoothL1")
        return "+".join(parts)


@dataclass
class RunRecord:
    config: dict
    history: list[dict] = field(default_factory=list)
    checkpoint_ids: dict = field(default_factory=dict)
    dataset_sha256: str = ""
    best_epoch: int = -1
    best_val_dice: float = math.nan
    report: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def params_sha256(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def dm_targets(masks, variant: str) -> np.ndarray:
    """Per-class distance-map stacks ``(N, C, Z, Y, X)`` for a list of masks."""
    kind = target_variant(variant)
    return np.stack([distance.stack(distance.per_class_dm(_as_array(m), NUM_CLASSES, kind)) for m in masks])


def lrnet_inputs(masks, label_smoothing: float = 0.0) -> np.ndarray:
    x = np.stack([one_hot(_as_array(m), NUM_CLASSES) for m in masks])
    if label_smoothing:
        x = (1.0 - label_smoothing) * x + label_smoothing / NUM_CLASSES
    return x.astype(np.float32)


@dataclass
class PreparedData:
    images: np.ndarray   # (N, 1, Z, Y, X) windowed, centred to [-1, 1]
    masks: np.ndarray    # (N, Z, Y, X) uint8
    onehot: np.ndarray   # (N, C, Z, Y, X)
    nidm: np.ndarray     # (N, C, Z, Y, X), MapDice penalty maps
    dms: dict            # regression targets per variant, filled lazily
    spacing: tuple
    sha256: str

    def dm(self, variant: str) -> np.ndarray:
        kind = target_variant(variant)
        if kind not in self.dms:
            self.dms[kind] = self.nidm if kind == "nidm" else dm_targets(list(self.masks), kind)
        return self.dms[kind]

    def subset(self, idx) -> PreparedData:
        idx = np.asarray(idx, dtype=int)
        return PreparedData(self.images[idx], self.masks[idx], self.onehot[idx], self.nidm[idx],
                            {k: v[idx] for k, v in self.dms.items()}, self.spacing, self.sha256)

    def __len__(self):
        return len(self.masks)


def network_input(image, window) -> np.ndarray:
    """Windowed intensities mapped from [0, 1] to [-1, 1] for the M-Net.

    Without normalization layers, an all-positive input lets Adam shift every
    first-layer weight the same way at once; centring removes that DC path.
    """
    return (2.0 * window_transform(_as_array(image), *window) - 1.0).astype(np.float32)


def prepare(pairs, window=(-160.0, 240.0)) -> PreparedData:
    """Window and centre the images and precompute one-hot and NIDM targets once."""
    pairs = list(pairs)
    images = np.stack([network_input(img, window) for img, _ in pairs])[:, None]
    masks = np.stack([_as_array(m).astype(np.uint8) for _, m in pairs])
    spacing = pairs[0][0].spacing if isinstance(pairs[0][0], Volume) else (1.0, 1.0, 1.0)
    return PreparedData(
        images=images.astype(np.float32),
        masks=masks,
        onehot=np.stack([one_hot(m, NUM_CLASSES) for m in masks]),
        nidm=dm_targets(list(masks), "nidm"),
        dms={},
        spacing=tuple(spacing),
        sha256=dataset_hash(pairs),
    )


def split_indices(n: int, fractions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous train/val/test split; every non-zero fraction gets at least one case."""
    n_val = max(1, int(round(fractions[1] * n))) if fractions[1] > 0 else 0
    n_test = max(1, int(round(fractions[2] * n))) if fractions[2] > 0 else 0
    n_train = n - n_val - n_test
    if n_train < 1:
        raise InvalidArgumentError(f"{n} cases are too few for split {fractions}")
    idx = np.arange(n)
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(value: float, where: str, cfg) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss during {where}", {"config": asdict(cfg)})


# ---------------------------------------------------------------------------
# stage one: LR-Net
# ---------------------------------------------------------------------------

def reconstruction_masks(pred_dm: np.ndarray, variant: str, threshold: float) -> np.ndarray | None:
    """Binarize the foreground channel of regressed maps; ``None`` for O-DM / I-DM."""
    kind = target_variant(variant)
    if kind not in ("nidm", "snidm"):
        return None
    return np.stack([distance.dm_to_mask(distance.DistanceMap(p[1], kind, 1), threshold) for p in pred_dm])


def pretrain_lrnet(masks, variant: str = "nidm", cfg: PretrainConfig | None = None,
                   targets: np.ndarray | None = None) -> tuple[Checkpoint, RunRecord]:
    """Fit the LR-Net on ``one_hot(mask) -> per-class DM`` pairs.

    The last ``holdout_fraction`` of the masks is held out; the returned
    checkpoint is the epoch with the best held-out reconstruction Dice (or
    held-out loss for variants that cannot be binarized).
    """
    cfg = cfg or PretrainConfig()
    masks = [_as_array(m).astype(np.uint8) for m in masks]
    x_all = lrnet_inputs(masks, cfg.label_smoothing)
    y_all = dm_targets(masks, variant) if targets is None else targets
    n_hold = max(1, int(round(cfg.holdout_fraction * len(masks)))) if len(masks) > 1 else 0
    n_train = len(masks) - n_hold
    x_tr, y_tr = x_all[:n_train], y_all[:n_train]
    # held-out inputs are exact one-hot masks
    x_ho, y_ho = lrnet_inputs(masks[n_train:]), y_all[n_train:]
    m_ho = np.stack(masks[n_train:]) if n_hold else None

    net = Network(lrnet_spec(variant, cfg.width), seed=cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    sched = PlateauDecay(opt, factor=cfg.lr_decay, patience=cfg.lr_patience)
    rng = np.random.default_rng(cfg.seed)
    record = RunRecord(config={"stage": "pretrain-lrnet", "variant": variant, **asdict(cfg)})
    best_state, best_score, best_epoch = net.state(), -math.inf, 0

    for epoch in range(cfg.epochs):
        train_loss = 0.0
        for idx in _batches(n_train, cfg.batch_size, rng):
            net.zero_grad()
            out = net(x_tr[idx])
            res = losses.smooth_l1(out.data, y_tr[idx])
            _check_finite(res.value, "LR-Net pretraining", cfg)
            net.backward(res.grad.astype(np.float32))
            opt.step()
            train_loss += res.value * len(idx) / n_train
        entry = {"epoch": epoch, "train_loss": train_loss, "lr": opt.lr}
        if n_hold:
            pred = net(x_ho).data
            val_loss = losses.smooth_l1(pred, y_ho).value
            rec = reconstruction_masks(pred, variant, cfg.threshold)
            dice = float(np.mean([metrics.dice_per_case(p, m) for p, m in zip(rec, m_ho)])) if rec is not None else None
            entry.update(val_loss=val_loss, val_dice=dice)
            score = dice if dice is not None else -val_loss
            sched.step(val_loss)
        else:
            score = -train_loss
            sched.step(train_loss)
        record.history.append(entry)
        if score > best_score:
            best_state, best_score, best_epoch = net.state(), score, epoch

    record.best_epoch = best_epoch if cfg.epochs else -1
    if cfg.epochs and n_hold:
        record.best_val_dice = record.history[best_epoch].get("val_dice") or math.nan
    ckpt = Checkpoint(net.spec, best_state, seed=cfg.seed, step=opt.step_count, lr=opt.lr,
                      extra={"role": "lrnet", "variant": variant, "threshold": cfg.threshold})
    record.checkpoint_ids["lrnet"] = params_sha256(best_state)
    return ckpt, record


# ---------------------------------------------------------------------------
# stage two: M-Net (optionally through the LR-Net)
# ---------------------------------------------------------------------------

def infer(mnet, image) -> tuple[np.ndarray, np.ndarray]:
    """Segment one image with the M-Net alone; returns ``(mask, probabilities)``.

    ``mnet`` is a checkpoint or :class:`Network`. A checkpoint carrying a
    ``window`` maps the raw image through :func:`network_input` first; a bare
    network takes the image as already prepared.
    """
    window = None
    if isinstance(mnet, Checkpoint):
        window = mnet.extra.get("window")
        mnet = mnet.network()
    img = _as_array(image).astype(np.float32)
    if img.ndim == 3:
        if window is not None:
            img = network_input(img, window)
        img = img[None, None]
    probs = mnet(img).data
    return probs.argmax(axis=1).astype(np.uint8)[0], probs[0]


def _predict_masks(net: Network, images: np.ndarray, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    probs = np.concatenate([net(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)])
    return probs.argmax(axis=1).astype(np.uint8), probs


def seg_channels(cfg: TrainConfig) -> slice:
    """Channels of the probability stack the segmentation loss sees."""
    if cfg.seg_loss in OVERLAP_LOSSES and not cfg.include_background:
        return slice(1, None)
    return slice(None)


def _joint_loss(cfg: TrainConfig, lcfg, probs: T.Tensor, lrnet: Network | None, onehot, nidm, dm_target):
    seg_target = nidm if cfg.seg_loss == "mapdice" else onehot
    sel = (slice(None), seg_channels(cfg))
    dm_pred = None if lrnet is None else lrnet(probs)
    res = losses.combined_loss(cfg.seg_loss, probs.data[sel], seg_target[sel],
                               None if dm_pred is None else dm_pred.data, dm_target, lcfg)
    grad_p = None
    if cfg.seg_loss != "none":
        # background channel gets no direct gradient; the softmax still couples it
        grad_p = np.zeros(probs.shape, dtype=res.grad.dtype)
        grad_p[sel] = res.grad
    if dm_pred is None:
        return res, T.external((probs,), res.value, (grad_p,))
    return res, T.external((probs, dm_pred), res.value, (grad_p, res.grad_dm))


def train_joint(data: PreparedData, lrnet_ckpt: Checkpoint | None, cfg: TrainConfig,
                test: PreparedData | None = None) -> tuple[Checkpoint, RunRecord, Checkpoint | None]:
    """Train the M-Net; returns ``(best M-Net checkpoint, record, final LR-Net checkpoint)``.

    ``data`` is split by ``cfg.split``; ``test`` overrides the test part. The
    best epoch is chosen by validation Dice.
    """
    if cfg.use_lrnet:
        if lrnet_ckpt is None:
            raise InvalidArgumentError("this configuration needs a pretrained LR-Net checkpoint")
        ck_variant = lrnet_ckpt.extra.get("variant")
        if ck_variant is not None and ck_variant != cfg.dm_variant:
            raise InvalidArgumentError(f"LR-Net was trained for {ck_variant!r}, config asks for {cfg.dm_variant!r}")
    tr_idx, va_idx, te_idx = split_indices(len(data), cfg.split)
    train, val = data.subset(tr_idx), data.subset(va_idx)
    if test is None:
        test = data.subset(te_idx) if len(te_idx) else None
    lcfg = cfg.loss_config()

    mnet = Network(mnet_spec(cfg.mnet_width), seed=cfg.seed)
    params = {f"mnet/{k}": v for k, v in mnet.params.items()}
    frozen = set()
    lrnet = None
    if cfg.use_lrnet:
        lrnet = lrnet_ckpt.network()
        for k, v in lrnet.params.items():
            params[f"lrnet/{k}"] = v
            if cfg.freeze_lrnet:
                frozen.add(f"lrnet/{k}")
                # frozen weights still pass gradients to their input
                v.requires_grad = False
    opt = Adam(params, lr=cfg.lr, frozen=frozen)
    sched = PlateauDecay(opt, factor=cfg.lr_decay, patience=cfg.lr_patience)
    rng = np.random.default_rng(cfg.seed)
    dm_train = train.dm(cfg.dm_variant) if cfg.use_lrnet else None
    dm_val = val.dm(cfg.dm_variant) if cfg.use_lrnet and len(val) else None

    record = RunRecord(config={"stage": "train", **asdict(cfg)}, dataset_sha256=data.sha256)
    best_state, best_dice, best_epoch = mnet.state(), -math.inf, -1
    best_loss, stale = math.inf, 0

    for epoch in range(cfg.epochs):
        train_loss = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            opt.zero_grad()
            probs = mnet(train.images[idx])
            res, total = _joint_loss(cfg, lcfg, probs, lrnet, train.onehot[idx], train.nidm[idx],
                                     None if dm_train is None else dm_train[idx])
            _check_finite(res.value, "joint training", cfg)
            total.backward()
            opt.step()
            train_loss += res.value * len(idx) / len(train)
        entry = {"epoch": epoch, "train_loss": train_loss, "lr": opt.lr}
        if len(val):
            pred_masks, probs = _predict_masks(mnet, val.images, cfg.batch_size)
            val_dice = float(np.mean([metrics.dice_per_case(p, m) for p, m in zip(pred_masks, val.masks)]))
            res, _ = _joint_loss(cfg, lcfg, T.Tensor(probs), lrnet, val.onehot, val.nidm, dm_val)
            val_loss = res.value
        else:
            val_dice, val_loss = math.nan, train_loss
        entry.update(val_loss=val_loss, val_dice=val_dice)
        record.history.append(entry)
        sched.step(val_loss)
        if val_dice > best_dice or best_epoch < 0:
            best_state, best_dice, best_epoch = mnet.state(), val_dice, epoch
        if val_loss < best_loss - 1e-4:
            best_loss, stale = val_loss, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("%s: early stop at epoch %d", cfg.label(), epoch)
                break

    record.best_epoch = best_epoch
    record.best_val_dice = best_dice if best_epoch >= 0 else math.nan
    ckpt = Checkpoint(mnet.spec, best_state, seed=cfg.seed, step=opt.step_count, lr=opt.lr,
                      extra={"role": "mnet", "window": list(cfg.window), "config": cfg.label()})
    record.checkpoint_ids["mnet"] = params_sha256(best_state)
    lr_ckpt = None
    if lrnet is not None:
        lr_state = lrnet.state()
        lr_ckpt = Checkpoint(lrnet.spec, lr_state, seed=lrnet_ckpt.seed, step=opt.step_count, lr=opt.lr,
                             extra=dict(lrnet_ckpt.extra))
        record.checkpoint_ids["lrnet"] = params_sha256(lr_state)
    if test is not None and len(test):
        record.report = evaluate_checkpoint(ckpt, test, cfg.batch_size).to_dict()
    return ckpt, record, lr_ckpt


def evaluate_checkpoint(ckpt: Checkpoint, data: PreparedData, batch_size: int = 4) -> metrics.MetricsReport:
    pred_masks, _ = _predict_masks(ckpt.network(), data.images, batch_size)
    cases = [(f"{i:04d}", p, m) for i, (p, m) in enumerate(zip(pred_masks, data.masks))]
    return metrics.evaluate(cases, data.spacing)


# ---------------------------------------------------------------------------
# comparison harness
# ---------------------------------------------------------------------------

def table1_suite(variants=("nidm",), alpha: float = losses.DEFAULT_ALPHA, **common) -> list[TrainConfig]:
    """The five loss modes of the distance-map comparison, per variant."""
    suite = []
    for v in variants:
        suite += [
            TrainConfig(dm_variant=v, seg_loss="none", alpha=1.0, **common),
            TrainConfig(dm_variant=v, seg_loss="dice", alpha=1.0, **common),
            TrainConfig(dm_variant=v, seg_loss="dice", alpha=alpha, **common),
            TrainConfig(dm_variant=v, seg_loss="mapdice", alpha=1.0, **common),
            TrainConfig(dm_variant=v, seg_loss="mapdice", alpha=alpha, **common),
        ]
    return suite


def table2_suite(alpha: float = losses.DEFAULT_ALPHA, **common) -> list[TrainConfig]:
    """Component ablations, the unfrozen LR-Net, and the imbalance baselines."""
    rows = [
        TrainConfig(seg_loss="dice", use_lrnet=False, **common),
        TrainConfig(seg_loss="mapdice", use_lrnet=False, **common),
        TrainConfig(seg_loss="none", alpha=1.0, freeze_lrnet=False, **common),
        TrainConfig(seg_loss="none", alpha=1.0, **common),
        TrainConfig(seg_loss="dice", alpha=alpha, **common),
        TrainConfig(seg_loss="mapdice", alpha=alpha, **common),
    ]
    rows += [TrainConfig(seg_loss=k, use_lrnet=False, **common) for k in losses.BASELINES]
    return rows


@dataclass
class ComparisonRow:
    label: str
    config: dict
    status: str
    val_dice: float = math.nan
    aggregate: dict = field(default_factory=dict)
    checkpoint_id: str = ""
    error: str = ""


def run_comparison(suite, data: PreparedData, pretrain_cfg: PretrainConfig | None = None,
                   lrnets: dict | None = None, test: PreparedData | None = None) -> list[ComparisonRow]:
    """Train and evaluate every config on the same split; failures are recorded per row.

    LR-Nets are pretrained once per variant on the training part of the split
    and shared by every row that uses that variant.
    """
    pretrain_cfg = pretrain_cfg or PretrainConfig()
    lrnets = {} if lrnets is None else lrnets
    rows = []
    for cfg in suite:
        try:
            lr_ckpt = None
            if cfg.use_lrnet:
                if cfg.dm_variant not in lrnets:
                    tr_idx, _, _ = split_indices(len(data), cfg.split)
                    lrnets[cfg.dm_variant], _ = pretrain_lrnet(list(data.masks[tr_idx]), cfg.dm_variant, pretrain_cfg)
                lr_ckpt = lrnets[cfg.dm_variant]
            ckpt, record, _ = train_joint(data, lr_ckpt, cfg, test=test)
            rows.append(ComparisonRow(cfg.label(), asdict(cfg), "ok", record.best_val_dice,
                                      (record.report or {}).get("aggregate", {}), record.checkpoint_ids["mnet"]))
        except Exception as exc:  # a failing row must not stop the table
            log.exception("row %s failed", cfg.label())
            rows.append(ComparisonRow(cfg.label(), asdict(cfg), "failed", error=f"{type(exc).__name__}: {exc}"))
    return rows


COMPARISON_COLUMNS = ["label", "status", "val_dice", "dc", "dg", "voe", "rvd", "assd", "msd", "rmsd",
                      "checkpoint_id", "error"]


def comparison_table(rows: list[ComparisonRow]) -> list[dict]:
    table = []
    for r in rows:
        a = r.aggregate
        table.append({
            "label": r.label, "status": r.status, "val_dice": r.val_dice,
            "dc": a.get("dc_mean", math.nan), "dg": a.get("dg", math.nan), "voe": a.get("voe_mean", math.nan),
            "rvd": a.get("rvd_mean", math.nan), "assd": a.get("assd_mean", math.nan),
            "msd": a.get("msd_mean", math.nan), "rmsd": a.get("rmsd_mean", math.nan),
            "checkpoint_id": r.checkpoint_id, "error": r.error,
        })
    return table
