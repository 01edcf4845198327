"""Batch assembly, the training loop, and checkpoint round-trips.

Teacher forcing throughout: decoder inputs are target[:-1], labels are
target[1:], and the loss is the mean cross entropy per non-pad token.
The learning rate is fixed for the whole run; divergence aborts with a
diagnostic instead of being clipped away. Dev loss is computed in
evaluation mode after every epoch and the best-dev checkpoint is kept.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .model import save_checkpoint
from .vocab import PAD_ID


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 30
    learning_rate: float = 2.5e-4
    batch_size: int = 128
    dropout_keep: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")


@dataclass
class Batch:
    sample_ids: list
    src: np.ndarray
    visual: np.ndarray
    tgt: np.ndarray

    @property
    def n_target_tokens(self):
        # labels are tgt[1:]; count the non-pad ones
        return int((self.tgt[:, 1:] != PAD_ID).sum())


def _pad_matrix(rows, fill=PAD_ID):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def make_batches(dataset, batch_size, seed_or_rng):
    """Shuffle with a seeded rng and group into padded fixed-size batches.

    The last partial batch is kept. Accepts either an integer seed or a
    live Generator so the training loop can reshuffle every epoch from
    one deterministic stream.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    order = rng.permutation(len(dataset))
    batches = []
    for start in range(0, len(dataset), batch_size):
        chunk = [dataset[i] for i in order[start:start + batch_size]]
        visual = None
        if chunk[0].visual is not None:
            visual = np.stack([s.visual for s in chunk]).astype(np.float32)
        batches.append(Batch(
            sample_ids=[s.sample_id for s in chunk],
            src=_pad_matrix([s.src_ids for s in chunk]),
            visual=visual,
            tgt=_pad_matrix([s.tgt_ids for s in chunk]),
        ))
    return batches


def _corpus_loss(model, batches, training, rng):
    total, tokens = 0.0, 0
    for batch in batches:
        enc = model.encode(batch.src, batch.visual, training=training, rng=rng)
        loss = model.loss(enc, batch.tgt, training=training, rng=rng)
        total += loss.item() * batch.n_target_tokens
        tokens += batch.n_target_tokens
    return total / tokens


def train(model, train_set, dev_set, config, out_dir=None):
    """Run the fixed-schedule training loop.

    Returns the log: one record per epoch and split with the token-mean
    loss, wall time, and (for dev records that improved) the checkpoint
    path. Raises DivergenceError naming epoch and batch if the loss goes
    non-finite.
    """
    seq = np.random.SeedSequence(config.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    model.config.dropout_keep = config.dropout_keep
    optimizer = ag.Adam(model.params, lr=config.learning_rate)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log = []
    best_dev = None
    best_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        total, tokens = 0.0, 0
        for i, batch in enumerate(make_batches(train_set, config.batch_size, shuffle_rng)):
            enc = model.encode(batch.src, batch.visual, training=True, rng=dropout_rng)
            loss = model.loss(enc, batch.tgt, training=True, rng=dropout_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, batch {i}"
                )
            ag.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            total += value * batch.n_target_tokens
            tokens += batch.n_target_tokens
        log.append({
            "epoch": epoch,
            "split": "train",
            "loss": total / tokens,
            "wall_time": time.monotonic() - started,
        })
        started = time.monotonic()
        dev_batches = make_batches(dev_set, config.batch_size, 0)
        dev_loss = _corpus_loss(model, dev_batches, training=False, rng=None)
        record = {
            "epoch": epoch,
            "split": "dev",
            "loss": dev_loss,
            "wall_time": time.monotonic() - started,
        }
        if best_path and (best_dev is None or dev_loss < best_dev):
            best_dev = dev_loss
            save_checkpoint(model, best_path)
            record["checkpoint"] = best_path
        if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            path = os.path.join(out_dir, f"epoch-{epoch:03d}.ckpt")
            save_checkpoint(model, path)
            record["checkpoint"] = path
        log.append(record)
    return log


def predict(model, dataset, vocab, batch_size=64):
    """Greedy-decode a dataset in deterministic order.

    Returns [(sample_id, token list), ...] sorted by sample_id.
    """
    dataset = sorted(dataset, key=lambda s: s.sample_id)
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        visual = None
        if chunk[0].visual is not None:
            visual = np.stack([s.visual for s in chunk]).astype(np.float32)
        enc = model.encode(_pad_matrix([s.src_ids for s in chunk]), visual)
        for sample, answer in zip(chunk, model.greedy_decode(enc)):
            out.append((sample.sample_id, vocab.decode(answer.token_ids)))
    return out
