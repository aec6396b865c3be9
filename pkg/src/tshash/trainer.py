"""Mini-batch training loop: labeled/unlabeled batch composition, dual
perturbation, per-iteration student update, teacher EMA, and ramp-up.

Each iteration follows a fixed line order: sample batch, draw two noisy
views, student forward on view one, teacher forward on view two, build
the pair state from teacher similarities, total loss, backward, one
momentum step, one EMA update.  The loop is a pure function of (data,
config): same seed, same trajectory, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TrainingView, similar_fraction
from .encoder import (
    EncoderParams,
    OptimizerState,
    backward,
    encode,
    ema_update,
    forward,
    init_params,
    sgd_momentum_step,
)
from .losses import Hyperparams, PairSupervision, build_pair_state, total_loss
from .retrieval import CodeSet, evaluate, pack_codes


@dataclass
class TrainConfig:
    epochs: int = 60
    batch: int = 64
    m_l: int = 16  # labeled samples per batch
    ramp_epochs: int | None = None  # None -> 25% of epochs
    learning_rate: float = 0.01
    last_layer_lr_boost: float = 10.0  # set 1.0 for a uniform rate
    momentum: float = 0.9
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    sigma: float | None = None  # None -> 0.3 x mean per-feature std
    hidden: tuple[int, ...] = (64, 64)
    iters_per_epoch: int | None = None  # None -> train pool size // batch
    val_fraction: float = 0.1  # labeled slice withheld for validation

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 1 <= self.m_l <= self.batch:
            raise ValueError("need 1 <= m_l <= batch, got m_l=%d batch=%d" % (self.m_l, self.batch))
        if self.ramp_epochs is not None and not 0 <= self.ramp_epochs <= self.epochs:
            raise ValueError("ramp_epochs must lie in [0, epochs]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def ramp(self) -> int:
        if self.ramp_epochs is None:
            return max(1, round(0.25 * self.epochs))
        return self.ramp_epochs


@dataclass
class EpochRecord:
    epoch: int
    omega: float
    lr: float
    total: float
    supervised: float
    consistency: float
    quantized: float
    penalty: float
    thr_mean: float
    pseudo_fraction: float
    val_map: float | None
    thr_batch: list[float] = field(default_factory=list)
    pseudo_batch: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "omega": self.omega,
            "lr": self.lr,
            "total": self.total,
            "supervised": self.supervised,
            "consistency": self.consistency,
            "quantized": self.quantized,
            "penalty": self.penalty,
            "thr_mean": self.thr_mean,
            "pseudo_fraction": self.pseudo_fraction,
            "val_map": self.val_map,
            "thr_batch": self.thr_batch,
            "pseudo_batch": self.pseudo_batch,
        }


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    rho: float = 0.0
    sigma: float = 0.0
    iters_per_epoch: int = 0


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the last state."""

    def __init__(self, epoch: int, batch_index: int, omega: float, lr: float, breakdown: dict):
        self.epoch = epoch
        self.batch_index = batch_index
        self.omega = omega
        self.lr = lr
        self.breakdown = breakdown
        super().__init__(
            "non-finite loss at epoch %d batch %d (omega=%.6g, lr=%.6g): %r"
            % (epoch, batch_index, omega, lr, breakdown)
        )


def rampup_weight(t: float, ramp_epochs: int, peak: float) -> float:
    """exp(-5(1 - t/T_r)^2) ramp toward peak, flat at peak from t = T_r on;
    T_r = 0 means no ramp at all."""
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    if ramp_epochs <= 0:
        return peak
    tau = min(float(t), float(ramp_epochs)) / float(ramp_epochs)
    return peak * math.exp(-5.0 * (1.0 - tau) ** 2)


def perturb(batch: np.ndarray, sigma: float, rng: np.random.Generator):
    """Two independent Gaussian-noise views of the batch; sigma=0 gives
    two plain copies."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    batch = np.asarray(batch, dtype=np.float64)
    v1 = batch + sigma * rng.standard_normal(batch.shape)
    v2 = batch + sigma * rng.standard_normal(batch.shape)
    return v1, v2


def sample_minibatch(view: TrainingView, cfg: TrainConfig, rng: np.random.Generator):
    """Draw m_l labeled + (batch - m_l) unlabeled rows without
    replacement.

    Returns (indices, PairSupervision).  Indices address the stacked
    [labeled; unlabeled] feature matrix; labeled rows come first, so the
    supervision pairs cover batch positions 0..m_l-1 (all ordered pairs,
    self-pairs included).
    """
    m_u = cfg.batch - cfg.m_l
    if view.n_labeled < cfg.m_l:
        raise ValueError(
            "need %d labeled samples per batch, pool has %d" % (cfg.m_l, view.n_labeled)
        )
    if m_u > view.n_unlabeled:
        raise ValueError(
            "need %d unlabeled samples per batch, pool has %d (set m_l=batch "
            "for fully-labeled data)" % (m_u, view.n_unlabeled)
        )
    li = rng.choice(view.n_labeled, size=cfg.m_l, replace=False)
    if m_u:
        ui = view.n_labeled + rng.choice(view.n_unlabeled, size=m_u, replace=False)
        idx = np.concatenate([li, ui])
    else:
        idx = li
    sup = PairSupervision.from_labels(
        np.arange(cfg.m_l, dtype=np.int64), view.labeled_labels[li]
    )
    return idx.astype(np.int64), sup


def _teacher_val_map(teacher, q_feats, q_labels, db_feats, db_labels, bits) -> float:
    q = CodeSet(words=pack_codes(encode(teacher, q_feats)), bits=bits, labels=q_labels)
    db = CodeSet(words=pack_codes(encode(teacher, db_feats)), bits=bits, labels=db_labels)
    return evaluate(q, db).map_at_k


def train(view: TrainingView, cfg: TrainConfig):
    """Run the full loop; returns (student, teacher, TrainLog).

    A validation slice of the labeled pool is withheld up front and the
    teacher's retrieval MAP against the remaining labeled items is logged
    per epoch.  Per-batch thresholds and realized pseudo fractions are
    kept in the epoch records.
    """
    hp = cfg.hyper
    rng = np.random.default_rng([cfg.seed, 1])

    n_lab = view.n_labeled
    n_val = int(round(cfg.val_fraction * n_lab))
    val_idx = np.sort(rng.choice(n_lab, size=n_val, replace=False)) if n_val else np.empty(0, np.int64)
    train_mask = np.ones(n_lab, dtype=bool)
    train_mask[val_idx] = False
    inner = TrainingView(
        labeled_features=view.labeled_features[train_mask],
        labeled_labels=view.labeled_labels[train_mask],
        unlabeled_features=view.unlabeled_features,
    )
    if inner.n_labeled < cfg.m_l:
        raise ValueError(
            "validation holdout leaves %d labeled samples, need >= m_l=%d"
            % (inner.n_labeled, cfg.m_l)
        )

    all_feats = (
        np.vstack([inner.labeled_features, inner.unlabeled_features])
        if inner.n_unlabeled
        else np.asarray(inner.labeled_features, dtype=np.float64)
    )
    sigma = cfg.sigma
    if sigma is None:
        sigma = 0.3 * float(np.std(all_feats, axis=0).mean())
    rho = hp.rho
    if rho is None:
        rho = similar_fraction(inner.labeled_labels)

    iters = cfg.iters_per_epoch
    if iters is None:
        iters = max(1, all_feats.shape[0] // cfg.batch)

    dims = (view.dim,) + tuple(cfg.hidden) + (hp.bits,)
    student = init_params(cfg.seed, dims)
    teacher = student.copy()
    opt = OptimizerState.for_params(
        student, lr=0.0, momentum=cfg.momentum, last_layer_lr_boost=cfg.last_layer_lr_boost
    )

    log = TrainLog(rho=float(rho), sigma=float(sigma), iters_per_epoch=iters)
    keys = ("total", "supervised", "consistency", "quantized", "penalty")
    for epoch in range(cfg.epochs):
        ramp = rampup_weight(epoch, cfg.ramp, 1.0)
        omega_t = hp.omega * ramp
        opt.lr = cfg.learning_rate * ramp
        sums = dict.fromkeys(keys, 0.0)
        thr_batch: list[float] = []
        pseudo_batch: list[float] = []
        for it in range(iters):
            idx, sup = sample_minibatch(inner, cfg, rng)
            x = all_feats[idx]
            v1, v2 = perturb(x, sigma, rng)
            trace = forward(student, v1)
            teacher_emb = forward(teacher, v2).embeddings
            state = build_pair_state(trace.embeddings, teacher_emb, rho)
            loss, grad_emb, bd = total_loss(state, trace.embeddings, sup, hp, omega_t)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, it, omega_t, opt.lr, bd)
            grads = backward(trace, student, grad_emb)
            sgd_momentum_step(student, grads, opt)
            ema_update(teacher, student, hp.alpha)
            sums["total"] += loss
            sums["supervised"] += bd["supervised"]
            sums["consistency"] += bd["consistency"]
            sums["quantized"] += bd["quantized"]
            sums["penalty"] += bd["penalty"]
            thr_batch.append(float(state.thr))
            pseudo_batch.append(float(state.pseudo_fraction))
        val_map = None
        if n_val:
            val_map = _teacher_val_map(
                teacher,
                view.labeled_features[val_idx],
                view.labeled_labels[val_idx],
                inner.labeled_features,
                inner.labeled_labels,
                hp.bits,
            )
        finite_thr = [t for t in thr_batch if math.isfinite(t)]
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                omega=omega_t,
                lr=opt.lr,
                total=sums["total"] / iters,
                supervised=sums["supervised"] / iters,
                consistency=sums["consistency"] / iters,
                quantized=sums["quantized"] / iters,
                penalty=sums["penalty"] / iters,
                thr_mean=float(np.mean(finite_thr)) if finite_thr else float("inf"),
                pseudo_fraction=float(np.mean(pseudo_batch)),
                val_map=val_map,
                thr_batch=thr_batch,
                pseudo_batch=pseudo_batch,
            )
        )
    return student, teacher, log
