"""Training step, AdamW optimiser, evaluation and beta logging."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import hyperconnections as hc
from . import tensor as T
from .metrics import REGIONS, combined_loss, mean_dice, one_hot, region_dice
from .model import Model, forward, predict
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to convolution kernels only (4-D tensors); biases and
    connection weights are left undecayed.
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict):
        """Apply one update; nothing is modified if any result is non-finite."""
        t = self.t + 1
        c1 = 1 - self.b1 ** t
        c2 = 1 - self.b2 ** t
        staged = {}
        with np.errstate(over="ignore", invalid="ignore"):
            for k, p in self.params.items():
                g = grads.get(k)
                if g is None:
                    continue
                dt = p.dtype.type
                m = dt(self.b1) * self.m[k] + dt(1 - self.b1) * g
                v = dt(self.b2) * self.v[k] + dt(1 - self.b2) * g * g
                update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
                if p.ndim == 4 and self.weight_decay:
                    update = update + dt(self.weight_decay) * p.data
                new = p.data - dt(self.lr) * update
                if not (np.isfinite(new).all() and np.isfinite(v).all()):
                    raise NonFiniteError(f"optimizer update for {k} is not finite")
                staged[k] = (m, v, new)
        for k, (m, v, new) in staged.items():
            self.m[k], self.v[k] = m, v
            self.params[k].data = new
        self.t = t


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    epoch: int = 0
    seed: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def create(cls, model: Model, lr=1e-3, weight_decay=1e-4, seed=None):
        opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
        return cls(model=model, optimizer=opt, seed=model.cfg.seed if seed is None else seed)


def compute_loss(model: Model, images, labels) -> Tensor:
    logits = forward(model, images)
    probs = T.softmax(logits, axis=1)
    target = one_hot(labels, model.cfg.n_classes, dtype=probs.dtype)
    return combined_loss(probs, target, class_axis=1)


def train_step(state: TrainState, batch) -> TrainState:
    """One optimiser step on ``batch = (images, labels)``; updates state in place."""
    images, labels = batch
    model = state.model
    if images.shape[1] != model.cfg.in_modalities or images.shape[2:] != labels.shape[1:]:
        raise T.ShapeError(f"batch shapes {images.shape} / {labels.shape} do not match the model")
    try:
        loss = compute_loss(model, images, labels)
        grads = T.backward(loss)
        names = {id(p): k for k, p in state.optimizer.params.items()}
        state.optimizer.step({names[id(p)]: g.data for p, g in grads.items() if id(p) in names})
    except NonFiniteError as exc:
        raise NonFiniteError(
            f"non-finite value at step {len(state.loss_history)} (epoch {state.epoch}): {exc}") from exc
    state.loss_history.append(float(loss.item()))
    return state


def drop_modalities(images, rng, p):
    """Copy of ``images`` where each sample, with probability ``p``, has one random channel zeroed."""
    out = np.array(images, copy=True)
    hit = rng.random(len(out)) < p
    chans = rng.integers(0, out.shape[1], len(out))
    for i in np.flatnonzero(hit):
        out[i, chans[i]] = 0
    return out


def run_epoch(state: TrainState, images, labels, batch_size=8, modality_dropout=0.0) -> float:
    """Shuffle deterministically by (seed, epoch), step through batches, return mean loss.

    With ``modality_dropout > 0`` each training sample has one random input
    channel zeroed with that probability, drawn from the same seeded stream.
    """
    if not 0.0 <= modality_dropout <= 1.0:
        raise ValueError("modality_dropout must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([state.seed, state.epoch, 7])))
    order = rng.permutation(len(images))
    losses = []
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        x = images[idx]
        if modality_dropout > 0:
            x = drop_modalities(x, rng, modality_dropout)
        train_step(state, (x, labels[idx]))
        losses.append(state.loss_history[-1])
    state.epoch += 1
    return float(np.mean(losses)) if losses else float("nan")


def evaluate(model: Model, images, labels, batch_size=16):
    """Per-sample region Dice rows and their aggregate (dataset means)."""
    rows = []
    if len(images):
        pred = predict(model, images, batch_size)
        for p, g in zip(pred, labels):
            d = region_dice(p, g)
            d["mean_dice"] = mean_dice(d["tc"], d["wt"], d["et"])
            rows.append(d)
    keys = list(REGIONS) + ["mean_dice"]
    agg = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}
    return rows, agg


def beta_records(model: Model, probe, epoch: int):
    """Beta (depth gate) per site; dynamic sites use a batch mean over ``probe``."""
    if not model.sites:
        return []
    trace = None
    if model.cfg.mode == "dynamic":
        trace = {}
        with T.no_grad():
            forward(model, probe, trace=trace)
    return [hc.extract_beta(p, trace[i] if trace is not None else None, epoch=epoch)
            for i, p in enumerate(model.sites)]
