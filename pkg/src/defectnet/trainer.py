"""Optimization loop: seeded batching, Adam updates, loss selection,
per-epoch checkpoints, and JSON-lines loss history.

Shuffling is seeded per (seed, epoch), so resuming from an epoch checkpoint
reproduces the uninterrupted run bit for bit. Batch sampling stays naive --
no class balancing -- which is exactly the regime the hybrid loss targets.
A global-norm gradient clip guards against rare early blow-ups from the
dice denominator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .losses import (
    generalized_dice_from_logits,
    hybrid_terms_from_logits,
    normalized_weights,
    one_hot,
    presence_ratio,
    weighted_cross_entropy_from_logits,
)
from .model import read_weight_records, write_weight_records
from .tensor import NonFiniteError, Tensor, concat

LOSS_KINDS = ("ce", "wce", "gdice", "hybrid")
OPTIMIZER_MAGIC = b"DNETO1"


class TrainingDiverged(RuntimeError):
    """The loss went non-finite; diagnostics were dumped."""


@dataclass
class TrainConfig:
    loss: str = "hybrid"
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ce_clamp: str = "max"
    grad_clip: float = 10.0
    steps_per_epoch: int | None = None
    weight_norm: str = "expected_pixel"
    # Multiplies the normalized weights. Sets where early weighted CE sits
    # relative to the hybrid clamp floor of 1: at full scale the batch CE
    # starts far above the floor, so small-scale runs mirror that by
    # scaling up (the dice term is invariant to uniform weight scaling).
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1 when set")
        if self.weight_scale <= 0:
            raise ValueError("weight_scale must be positive")


class Adam:
    """Standard Adam with bias correction; lr = 0 is a valid null update."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)  # (name, Tensor), stable order
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, config_or_adam):
    """One update on tensors whose .grad is populated."""
    adam = config_or_adam
    if not isinstance(adam, Adam):
        cfg = config_or_adam
        adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam.step()
    return adam


def clip_global_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Trainer:
    """Runs epochs over extracted training patches."""

    def __init__(self, model, patches, stats, config: TrainConfig, config_hash=""):
        if not patches:
            raise ValueError("no training patches")
        self.model = model
        self.patches = patches
        self.stats = stats
        self.config = config
        self.config_hash = config_hash
        self.adam = Adam(
            model.parameters(),
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.adam_eps,
        )
        self.epochs_done = 0
        self.global_step = 0
        K = model.config.num_classes
        if stats.num_classes != K:
            raise ValueError("class stats do not match the model's class count")
        if config.loss == "ce":
            self.weights = np.ones(K)
        else:
            self.weights = config.weight_scale * normalized_weights(stats, config.weight_norm)

    # ------------------------------------------------------------------

    def batch_loss(self, batch):
        """Forward a batch of patches and build the selected loss.

        Returns (loss Tensor, row dict for the history log).
        """
        cfg = self.config
        K = self.model.config.num_classes
        flat_logits = []
        flat_labels = []
        for patch in batch:
            x = Tensor(np.asarray(patch.image, dtype=np.float64) / 255.0)
            logits = self.model.forward(x)
            flat_logits.append(logits.reshape((K, -1)))
            flat_labels.append(np.asarray(patch.labels).reshape(-1))
        z = concat(flat_logits, axis=1) if len(flat_logits) > 1 else flat_logits[0]
        t = one_hot(np.concatenate(flat_labels), K)
        gamma = presence_ratio(t)
        wce_val = gdice_val = None
        if cfg.loss == "hybrid":
            terms = hybrid_terms_from_logits(z, t, self.weights, cfg.ce_clamp)
            loss = terms.loss
            wce_val = float(terms.wce)
            gdice_val = float(terms.gdice)
        elif cfg.loss == "gdice":
            loss = generalized_dice_from_logits(z, t, self.weights)
            gdice_val = float(loss)
        else:  # ce / wce
            loss = weighted_cross_entropy_from_logits(z, t, self.weights)
            wce_val = float(loss)
        row = {
            "step": self.global_step,
            "loss": float(loss),
            "gamma": gamma,
            "wce": wce_val,
            "gdice": gdice_val,
        }
        return loss, row

    def train_step(self, batch):
        loss, row = self.batch_loss(batch)
        if not np.isfinite(row["loss"]):
            raise TrainingDiverged(
                "non-finite loss at step "
                f"{self.global_step}; batch origins {[p.origin for p in batch]}"
            )
        loss.backward()
        clip_global_norm(self.adam.params, self.config.grad_clip)
        self.adam.step()
        self.model.zero_grads()
        self.global_step += 1
        return row

    def epoch_batches(self, epoch):
        """Seeded shuffle of the patch pool, chunked into batches."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(self.patches))
        n_batches = len(self.patches) // cfg.batch_size
        if n_batches == 0:
            raise ValueError(
                f"{len(self.patches)} patches cannot fill a batch of {cfg.batch_size}"
            )
        if cfg.steps_per_epoch is not None:
            n_batches = min(n_batches, cfg.steps_per_epoch)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            yield [self.patches[i] for i in idx]

    def run(self, history_sink=None, checkpoint_path=None, diagnostics_path=None):
        """Train from the current epoch to config.epochs.

        history_sink: callable receiving one dict per step.
        """
        cfg = self.config
        history = []
        for epoch in range(self.epochs_done, cfg.epochs):
            for batch in self.epoch_batches(epoch):
                try:
                    row = self.train_step(batch)
                except (TrainingDiverged, NonFiniteError) as exc:
                    if diagnostics_path is not None:
                        _dump_divergence(diagnostics_path, self, batch, exc)
                    raise
                row["epoch"] = epoch
                history.append(row)
                if history_sink is not None:
                    history_sink(row)
            self.epochs_done = epoch + 1
            if checkpoint_path is not None:
                self.save_checkpoint(checkpoint_path)
        return history

    # ------------------------------------------------------------------
    # checkpointing: the weight format plus an optimizer-state section

    def save_checkpoint(self, path):
        with open(path, "wb") as fh:
            write_weight_records(fh, self.model.parameters())
            fh.write(OPTIMIZER_MAGIC)
            fh.write(struct.pack("<Q", self.adam.t))
            for name, _ in self.model.parameters():
                fh.write(np.ascontiguousarray(self.adam.m[name], dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(self.adam.v[name], dtype="<f8").tobytes())
            fh.write(struct.pack("<I", self.epochs_done))
            fh.write(struct.pack("<Q", self.global_step))
            encoded = self.config_hash.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)

    def load_checkpoint(self, path):
        with open(path, "rb") as fh:
            params = self.model.parameters()
            self.model.load_records(read_weight_records(fh, count=len(params)))
            magic = fh.read(len(OPTIMIZER_MAGIC))
            if magic != OPTIMIZER_MAGIC:
                raise ValueError(f"bad optimizer section magic {magic!r}")
            (self.adam.t,) = struct.unpack("<Q", fh.read(8))
            for name, p in params:
                count = p.data.size
                self.adam.m[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(p.shape).copy()
                self.adam.v[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(p.shape).copy()
            (self.epochs_done,) = struct.unpack("<I", fh.read(4))
            (self.global_step,) = struct.unpack("<Q", fh.read(8))
            (hash_len,) = struct.unpack("<I", fh.read(4))
            stored_hash = fh.read(hash_len).decode("utf-8")
        if self.config_hash and stored_hash and stored_hash != self.config_hash:
            raise ValueError("checkpoint was written by a different configuration")


def train(model, patches, stats, config: TrainConfig):
    """Convenience wrapper: returns (model, loss history)."""
    trainer = Trainer(model, patches, stats, config)
    history = trainer.run()
    return model, history


def history_line(row):
    return json.dumps(row, sort_keys=True)


def _dump_divergence(path, trainer, batch, exc):
    payload = {
        "error": str(exc),
        "step": trainer.global_step,
        "loss_kind": trainer.config.loss,
        "batch_origins": [list(p.origin) for p in batch],
        "batch_label_values": [sorted(int(v) for v in np.unique(p.labels)) for p in batch],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
