"""Training loop: balanced sampling, BCE / multi-head loss, clipping, Adam, early stopping."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DivergenceError, NumericOverflowError, ParameterError, SamplingError
from .netgraph import TopologyKind


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 25
    clip_value: float = 0.5
    clip_mode: str = "value"
    batch_size: int = 64
    patience: int = 5
    lambda_fusion: float = 0.5
    lambda_shortcut: float = 0.5
    seed: int = 0
    # None = every positive window each epoch; otherwise cap the balanced draw
    max_samples_per_epoch: int | None = None
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be positive")
        if self.clip_value <= 0:
            raise ParameterError("clip value must be positive")
        if self.clip_mode not in ("value", "norm"):
            raise ParameterError(f"clip_mode must be 'value' or 'norm', got {self.clip_mode!r}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ParameterError("max_epochs, batch_size and patience must be >= 1")
        if self.max_samples_per_epoch is not None and self.max_samples_per_epoch < 2:
            raise ParameterError("max_samples_per_epoch must allow one window per class")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


@dataclass
class RunRecord:
    config_id: str = ""
    kind: str = ""
    seed: int = 0
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_aupr: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    diverged: bool = False
    failure: str | None = None
    config: dict = field(default_factory=dict)
    final_params: dict | None = field(default=None, repr=False)

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else float("nan")

    def to_dict(self):
        d = asdict(self)
        d.pop("final_params")
        for key in ("train_loss", "val_loss", "val_aupr"):
            d[key] = [None if not np.isfinite(v) else float(v) for v in d[key]]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        for key in ("train_loss", "val_loss", "val_aupr"):
            d[key] = [float("nan") if v is None else v for v in d[key]]
        return cls(**d)


def named_rng(seed, name):
    """Independent generator per purpose so streams never perturb each other."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def bfm_sc_loss(fusion_pred, shortcut_preds, target, lambda_fusion=0.5, lambda_shortcut=0.5, n_branches=None):
    """Weighted fusion BCE plus the summed BCE of every shortcut head.

    With the default half/half weights the error reaching branch i's last
    layer is half the fusion-path error plus half its own shortcut error.
    """
    if not shortcut_preds:
        raise ConfigurationError("bfm_sc_loss needs at least one shortcut head")
    if n_branches is not None and len(shortcut_preds) != n_branches:
        raise ConfigurationError(f"{len(shortcut_preds)} shortcut heads for {n_branches} branches")
    loss = ad.bce_loss(fusion_pred, target) * lambda_fusion
    for pred in shortcut_preds:
        loss = loss + ad.bce_loss(pred, target) * lambda_shortcut
    return loss


def model_loss(model, out, target, config=None):
    cfg = config or TrainConfig()
    if model.topology.kind is TopologyKind.BFM_SC:
        return bfm_sc_loss(out.fusion, out.shortcuts, target, cfg.lambda_fusion,
                           cfg.lambda_shortcut, n_branches=len(model.branches))
    return ad.bce_loss(out.fusion, target)


def clip_gradients(grads, c=0.5, mode="value"):
    """Element-wise clamp to [-c, c], or rescale to global L2 norm c with ``mode='norm'``."""
    if c <= 0:
        raise ParameterError("clip threshold must be positive")
    single = not isinstance(grads, dict)
    g = {"_": grads} if single else grads
    if mode == "value":
        out = {k: np.clip(v, -c, c) for k, v in g.items()}
    elif mode == "norm":
        total = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        scale = c / total if total > c else 1.0
        out = {k: v * scale for k, v in g.items()}
    else:
        raise ParameterError(f"unknown clip mode {mode!r}")
    return out["_"] if single else out


def adam_step(params, grads, state, lr=0.001):
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        t = params[name]
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def balanced_sampler(labels, rng, max_samples=None):
    """Indices for one training epoch: the minority class in full plus an
    equal-sized uniform draw from the majority class, shuffled.

    ``max_samples`` caps the total, drawing the same count from each class.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SamplingError(f"balanced sampling needs both classes ({len(pos)} pos, {len(neg)} neg)")
    k = min(len(pos), len(neg))
    if max_samples is not None:
        k = min(k, max_samples // 2)
    pick_pos = pos if k == len(pos) else rng.choice(pos, k, replace=False)
    pick_neg = neg if k == len(neg) else rng.choice(neg, k, replace=False)
    return rng.permutation(np.concatenate([pick_pos, pick_neg]))


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, loss):
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, self.epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def validation_metrics(model, data, batch_size=512):
    """Fusion-head BCE and AUPR on an unaltered set, in eval mode."""
    from .metrics import aupr

    x = data.select(model.channels)
    scores = model.predict(x, batch_size=batch_size)
    with ad.no_grad():
        loss = ad.bce_loss(ad.Tensor(scores), data.labels).item()
    auc = aupr(scores, data.labels) if np.any(data.labels == 1) else float("nan")
    return loss, auc


def train(model, train_set, val_set, config=None):
    """Fit ``model`` on ``train_set`` with early stopping on ``val_set``.

    Returns a :class:`RunRecord`; the model is left holding the parameters of
    the best validation epoch.  A non-finite loss ends the run early with
    ``diverged`` set instead of raising.
    """
    cfg = config or TrainConfig()
    for name, data in (("train", train_set), ("validation", val_set)):
        missing = [c for c in model.channels if c not in data.channels]
        if missing:
            raise ConfigurationError(f"{name} set lacks channels {missing}")
    record = RunRecord(config_id=model.topology.config_id, kind=model.kind.value,
                       seed=cfg.seed, config=cfg.to_dict())
    sampler_rng = named_rng(cfg.seed, "sampler")
    dropout_rng = named_rng(cfg.seed, "dropout")
    x_all = train_set.select(model.channels)
    y_all = train_set.labels.astype(np.float64)
    state = AdamState.for_params(model.params)
    stopper = EarlyStopping(cfg.patience)
    best_params = model.params.snapshot()

    for epoch in range(1, cfg.max_epochs + 1):
        idx = balanced_sampler(y_all, sampler_rng, cfg.max_samples_per_epoch)
        total, count = 0.0, 0
        try:
            for start in range(0, len(idx), cfg.batch_size):
                b = idx[start:start + cfg.batch_size]
                out = model.forward(x_all[b], train=True, rng=dropout_rng)
                loss = model_loss(model, out, y_all[b], cfg)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite training loss in epoch {epoch}")
                model.params.zero_grad()
                loss.backward()
                grads = clip_gradients(model.params.grads(), cfg.clip_value, cfg.clip_mode)
                adam_step(model.params, grads, state, cfg.learning_rate)
                total += loss.item() * len(b)
                count += len(b)
        except (DivergenceError, NumericOverflowError, FloatingPointError) as exc:
            record.diverged = True
            record.failure = str(exc)
            record.epochs_run = epoch
            break
        record.train_loss.append(total / count)
        vloss, vaupr = validation_metrics(model, val_set, cfg.eval_batch_size)
        record.val_loss.append(vloss)
        record.val_aupr.append(vaupr)
        record.epochs_run = epoch
        stop = stopper.update(vloss)
        if stopper.best_epoch == epoch:
            best_params = model.params.snapshot()
        if stop:
            record.stopped_early = epoch < cfg.max_epochs
            break

    record.best_epoch = stopper.best_epoch
    model.params.load(best_params)
    record.final_params = model.params.snapshot()
    return record
