"""Pixel losses, Adam, and the epoch/batch training loop."""

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import data
import tensor_core as tc
from autograd import backward, forward_traced
from errors import ConfigurationError, DimensionError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
LOSSES = ("l1", "l2")


def l1_loss(prediction, gt):
    """Mean |prediction - gt| over each image's pixels, averaged over the batch."""
    return tc.mean_abs_error(prediction, gt)


def l2_loss(prediction, gt):
    return tc.mean_squared_error(prediction, gt)


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # training batches consumed by fit, counting batches skipped for having no decodable sample
    position: int = None

    def __post_init__(self):
        if self.position is None:
            self.position = self.t

    def to_dict(self):
        return {
            "hparams": {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon},
            "t": self.t,
            "position": self.position,
            "m": self.m,
            "v": self.v,
        }

    @classmethod
    def from_dict(cls, state):
        h = state["hparams"]
        return cls(h["lr"], h["beta1"], h["beta2"], h["epsilon"], int(state["t"]),
                   dict(state["m"]), dict(state["v"]), state.get("position"))


def adam_step(params, state):
    """One Adam update of every trainable, non-frozen parameter.

    Moments are kept in float64 and parameters in float32; checkpoints store
    the moments as float32. Frozen parameters and their moments are untouched.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if p.frozen or not p.trainable:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.value.shape)
            v = np.zeros(p.value.shape)
        if m.shape != p.value.shape or v.shape != p.value.shape:
            raise DimensionError(f"{name}: optimizer state shape {m.shape} != {p.value.shape}", axis="shape")
        m = state.beta1 * m.astype(np.float64) + (1.0 - state.beta1) * g
        v = state.beta2 * v.astype(np.float64) + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.value = (p.value.astype(np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(np.float32)
        state.m[name] = m
        state.v[name] = v


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 20
    lr: float = DEFAULT_LR
    seed: int = 0
    loss: str = "l1"
    # optimizer steps between checkpoints; 0 writes only the final one
    checkpoint_every: int = 0
    checkpoint_path: str = None
    prefetch: int = 0
    progress: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("must be >= 1", field="epochs")
        if self.batch_size < 1:
            raise ConfigurationError("must be >= 1", field="batch_size")
        if self.lr < 0:
            raise ConfigurationError("must be >= 0", field="lr")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"must be one of {LOSSES}", field="loss")
        if self.checkpoint_every < 0:
            raise ConfigurationError("must be >= 0", field="checkpoint_every")


@dataclass
class TrainRecord:
    epoch: int
    step: int
    loss: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def losses(self, include_validation=False):
        return [r.loss for r in self.records if include_validation or r.step >= 0]

    def to_frame(self):
        return pd.DataFrame([(r.epoch, r.step, r.loss) for r in self.records], columns=["epoch", "step", "loss"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.6f")


def train_step(model, params, state, images, masks, loss="l1"):
    """Forward, backward and one Adam update on a single batch; returns the loss."""
    stats = {}

    def builder(ops, leaves):
        prediction = model.forward(leaves, images, "train", ops, stats)
        return ops.l1_loss(prediction, masks) if loss == "l1" else ops.l2_loss(prediction, masks)

    value, tape = forward_traced(builder, params.values())
    params.set_grads(backward(tape, 1.0))
    adam_step(params, state)
    for name, running in stats.items():
        params.set_value(name, running)
    return float(value)


def evaluate_loss(model, params, dataset, batch_size, loss="l1"):
    """Mean loss over a dataset in infer mode, no updates."""
    loss_fn = l1_loss if loss == "l1" else l2_loss
    total, count = 0.0, 0
    for images, masks in data.batches(dataset, batch_size, seed=0, shuffle=False):
        prediction = model.forward(params, images, "infer")
        total += loss_fn(prediction, masks) * images.shape[0]
        count += images.shape[0]
    return total / count if count else float("nan")


def fit(model, params, dataset, config, callbacks=(), state=None, validation=None):
    """Train for ``config.epochs`` epochs; resumes after ``state.position`` batches if given.

    Each epoch visits the dataset in a Fisher-Yates order seeded by
    ``(config.seed, epoch)``; the last batch may be partial. Every step appends
    ``(epoch, step, loss)`` to the log; validation results use ``step = -1``.
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    from storage import save_checkpoint

    if state is None:
        state = AdamState(lr=config.lr)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    start_step = state.position
    if start_step:
        logger.info("Resuming training at step %d of %d", start_step, total_steps)
    log = TrainingLog()

    def schedule():
        for epoch in range(config.epochs):
            for step, indices in enumerate(data.batch_indices(len(dataset), config.batch_size, config.seed, epoch)):
                if epoch * steps_per_epoch + step < start_step:
                    continue
                yield epoch, step, data.load_batch(dataset, indices)

    work = schedule()
    if config.prefetch > 0:
        work = data.prefetch(work, depth=config.prefetch)

    progress = tqdm(total=total_steps, initial=start_step, disable=not config.progress, desc="train")
    last_epoch = None
    with contextlib.closing(work):
        for epoch, step, batch in work:
            if last_epoch is not None and epoch != last_epoch:
                _end_of_epoch(model, params, last_epoch, validation, config, log)
            last_epoch = epoch
            state.position += 1
            progress.update(1)
            if batch is None:
                logger.warning("Epoch %d step %d: no sample in the batch could be decoded", epoch + 1, step)
                continue
            images, masks = batch
            loss = train_step(model, params, state, images, masks, config.loss)
            record = TrainRecord(epoch, step, loss)
            log.records.append(record)
            progress.set_postfix(loss=f"{loss:.4f}")
            for callback in callbacks:
                callback(record, params, state)
            if config.checkpoint_path and config.checkpoint_every and state.t % config.checkpoint_every == 0:
                save_checkpoint(config.checkpoint_path, params, model.config, state)
    progress.close()
    if last_epoch is not None:
        _end_of_epoch(model, params, last_epoch, validation, config, log)
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, params, model.config, state)
    logger.info("Training finished after %d steps", state.t)
    return log


def _end_of_epoch(model, params, epoch, validation, config, log):
    losses = [r.loss for r in log.records if r.epoch == epoch and r.step >= 0]
    if losses:
        logger.info("Epoch %d: mean training loss %.6f over %d steps", epoch + 1, np.mean(losses), len(losses))
    if validation is not None:
        val_loss = evaluate_loss(model, params, validation, config.batch_size, config.loss)
        val_mae = val_loss if config.loss == "l1" else evaluate_loss(model, params, validation, config.batch_size, "l1")
        log.records.append(TrainRecord(epoch, -1, val_loss))
        logger.info("Epoch %d: validation loss %.6f, MAE %.6f", epoch + 1, val_loss, val_mae)
