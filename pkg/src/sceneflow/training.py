"""Masked L1 supervision, the step learning-rate schedule and the training loop."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateBatchError, NonFiniteError, ShapeError
from .metrics import aggregate_metrics, compute_metrics
from .model import ModelParams, forward, prepare_inputs
from .numerics import AdamState, absolute, adam_step, as_tensor, backward, no_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 4
    lr: float = 1e-3
    lr_drop_epoch: int = 340
    lr_after_drop: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not 0 <= self.lr_drop_epoch < self.epochs:
            raise ContractError(f"lr_drop_epoch {self.lr_drop_epoch} must lie in [0, epochs={self.epochs})")
        if not (self.lr > 0 and self.lr_after_drop > 0):
            raise ContractError("learning rates must be positive")

    def lr_at(self, epoch):
        """Rate for a 0-based epoch: ``lr`` before the drop epoch, ``lr_after_drop`` from it on."""
        return self.lr if epoch < self.lr_drop_epoch else self.lr_after_drop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    epe3d: float
    eps: float
    lam: float
    rho: float
    lr: float

    def line(self):
        return (f"epoch={self.epoch} loss={self.loss:.17g} epe3d={self.epe3d:.17g} eps={self.eps:.17g} "
                f"lambda={self.lam:.17g} rho={self.rho:.17g} lr={self.lr:.17g}")


def parse_log_line(line):
    out = dict(tok.split("=", 1) for tok in line.split())
    return {k: (int(v) if k == "epoch" else float(v)) for k, v in out.items()}


def masked_l1_loss(est, gt, mask):
    """``(1/3) * sum |M * (est - gt)|`` over all coordinates (one prediction level)."""
    est = as_tensor(getattr(est, "flow", est))
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if est.shape != gt.shape or mask.shape != (gt.shape[0],):
        raise ShapeError(f"masked_l1_loss: est {est.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise DegenerateBatchError("masked_l1_loss: mask selects no points")
    m = mask[:, None].astype(np.float64)
    return (absolute(est - gt) * m).sum() / 3.0


def evaluate(scenes, params: ModelParams, inputs=None, semantics="or", masked=True):
    """Point-weighted metrics of the model over ``scenes`` (mask-true points when ``masked``)."""
    per_scene = []
    with no_grad():
        for i, scene in enumerate(scenes):
            x = inputs[i] if inputs is not None else None
            flow, _ = forward(scene, params, x)
            per_scene.append(compute_metrics(flow.flow.data, scene.gt_flow, scene.pc_t, scene.cam,
                                             scene.mask if masked else None, semantics))
    return aggregate_metrics(per_scene)


def mean_flow_magnitude(scenes, masked=True):
    norms = [np.linalg.norm(s.gt_flow[s.mask] if masked else s.gt_flow, axis=1) for s in scenes]
    return float(np.concatenate(norms).mean())


def train(dataset, config: TrainConfig, params: ModelParams, val=None, names=None, log=None):
    """Adam over every trainable tensor; returns ``(params, records)``.

    The epoch order is a permutation drawn from ``(seed, epoch)``. Each batch
    loss is the mean of its scene losses, and one optimiser step is taken per
    batch. ``val`` (default: the training set) is evaluated after every epoch;
    ``log`` receives each formatted record line.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    names = list(names) if names is not None else [str(i) for i in range(len(dataset))]
    val = dataset if val is None else val
    train_inputs = [prepare_inputs(s, params.config) for s in dataset]
    val_inputs = train_inputs if val is dataset else [prepare_inputs(s, params.config) for s in val]
    trainable = params.trainable()
    state = AdamState()
    records = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            params.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                scene = dataset[idx]
                try:
                    flow, _ = forward(scene, params, train_inputs[idx])
                    loss = masked_l1_loss(flow, scene.gt_flow, scene.mask)
                except FloatingPointError as exc:
                    raise NonFiniteError(f"scene {names[idx]}: {exc}") from None
                if not math.isfinite(loss.item()):
                    raise NonFiniteError(f"scene {names[idx]}: loss is not finite ({loss.item()})")
                backward(loss / float(len(batch)))
                batch_loss += loss.item() / len(batch)
            for name, t in trainable.items():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
            adam_step(trainable, state, lr)
            losses.append(batch_loss)
        eps, lam, rho = params.ot().values()
        epe = evaluate(val, params, val_inputs).epe3d
        rec = EpochRecord(epoch, float(np.mean(losses)), epe, eps, lam, rho, lr)
        records.append(rec)
        if log is not None:
            log(rec.line())
    return params, records
