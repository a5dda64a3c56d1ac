"""Optimization loop: LR schedule, Adam, checkpoint store, n-best averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Tape
from .checkpoint import Checkpoint, ParamRecord, load_checkpoint, save_checkpoint
from .errors import CheckpointError, NumericsError
from .model import Example, Model
from .specaugment import AugmentPolicy

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    """Linear warmup to the peak rate, then inverse-square decay in the step.

    lr(s) = lr_start + (lr_peak - lr_start) * s / warmup for s <= warmup,
    then lr_peak * (warmup / s)^decay_exponent, continuous at the boundary.
    """

    lr_start: float = 3.2e-8
    lr_peak: float = 8e-4
    warmup_steps: int = 500
    decay_exponent: float = 2.0

    def lr(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be nonnegative")
        w = self.warmup_steps
        if w < 1:
            raise ValueError("warmup_steps must be >= 1")
        if step < w:
            return self.lr_start + (self.lr_peak - self.lr_start) * (step / w)
        # the decay branch hits lr_peak exactly at the boundary
        return self.lr_peak * (w / step) ** self.decay_exponent


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Parameters absent from ``grads`` (loss did not reach them) see a zero
    gradient: their moments decay but a fresh state leaves them unchanged.
    Frozen parameters are never touched.
    """
    state.t += 1
    b1, b2, eps, t = state.beta1, state.beta2, state.eps, state.t
    for name in sorted(params):
        p = params[name]
        if not p.trainable:
            continue
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


@dataclass
class StoreEntry:
    step: int
    epoch: int
    val_loss: float
    filename: str


class CheckpointStore:
    """Directory of per-epoch checkpoints with an n-best index by val loss."""

    INDEX = "index.tsv"

    def __init__(self, directory, retention: int | None = None):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.retention = retention
        self.entries: list[StoreEntry] = []
        index = self.directory / self.INDEX
        if index.exists():
            for line in index.read_text().splitlines():
                step, epoch, val_loss, filename = line.split("\t")
                self.entries.append(StoreEntry(int(step), int(epoch), float(val_loss), filename))

    def _write_index(self) -> None:
        lines = [
            f"{e.step}\t{e.epoch}\t{e.val_loss:.17g}\t{e.filename}" for e in self.entries
        ]
        (self.directory / self.INDEX).write_text("\n".join(lines) + ("\n" if lines else ""))

    def save(self, model: Model, step: int, epoch: int, val_loss: float,
             feature_stats=None, metadata: dict[str, str] | None = None) -> Path:
        meta = {"step": str(step), "epoch": str(epoch), "val_loss": f"{val_loss:.17g}"}
        if metadata:
            meta.update(metadata)
        filename = f"epoch{epoch:04d}.ckpt"
        save_checkpoint(
            self.directory / filename,
            Checkpoint(params=model.snapshot(), feature_stats=feature_stats, metadata=meta),
        )
        self.entries.append(StoreEntry(step, epoch, val_loss, filename))
        if self.retention is not None and len(self.entries) > self.retention:
            keep = set(
                id(e) for e in sorted(self.entries, key=lambda e: (e.val_loss, e.epoch))[: self.retention]
            )
            for entry in self.entries:
                if id(entry) not in keep:
                    (self.directory / entry.filename).unlink(missing_ok=True)
            self.entries = [e for e in self.entries if id(e) in keep]
        self._write_index()
        return self.directory / filename

    def n_best(self, n: int) -> list[StoreEntry]:
        """Checkpoints sorted by validation loss ascending, capped at n."""
        ordered = sorted(self.entries, key=lambda e: (e.val_loss, e.epoch))
        return ordered[: min(n, len(ordered))]

    def path_of(self, entry: StoreEntry) -> Path:
        return self.directory / entry.filename

    def best_path(self) -> Path:
        if not self.entries:
            raise CheckpointError(f"no checkpoints in {self.directory}")
        return self.path_of(self.n_best(1)[0])


def average_checkpoints(store: CheckpointStore, n: int = 10) -> Checkpoint:
    """Parameter-wise arithmetic mean of the n best-by-val-loss checkpoints.

    Accumulates in float64 and casts back to the stored dtype. Optimizer
    state never lives in checkpoints, so only parameters are averaged;
    feature statistics and metadata come from the single best checkpoint.
    """
    entries = store.n_best(n)
    if not entries:
        raise CheckpointError(f"no checkpoints to average in {store.directory}")
    if len(entries) < n:
        log.warning("asked for %d checkpoints but store holds %d; averaging those",
                    n, len(entries))
    checkpoints = [load_checkpoint(store.path_of(e)) for e in entries]
    first = checkpoints[0]
    names = list(first.params)
    sums = {name: first.params[name].data.astype(np.float64) for name in names}
    for other in checkpoints[1:]:
        if set(other.params) != set(names):
            raise CheckpointError("checkpoints hold different parameter sets")
        for name in names:
            a, b = first.params[name], other.params[name]
            if a.data.shape != b.data.shape or a.data.dtype != b.data.dtype:
                raise CheckpointError(f"{name}: inconsistent shape/dtype across checkpoints")
            sums[name] = sums[name] + b.data.astype(np.float64)
    k = len(checkpoints)
    params = {
        name: ParamRecord(
            name,
            first.params[name].component,
            first.params[name].trainable,
            (sums[name] / k).astype(first.params[name].data.dtype),
        )
        for name in names
    }
    metadata = dict(first.metadata)
    metadata["averaged_over"] = str(k)
    return Checkpoint(params=params, feature_stats=first.feature_stats, metadata=metadata)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    augment: AugmentPolicy | None = None
    flip_images: bool = False
    keep_checkpoints: int | None = None  # None keeps every epoch


def _batches(examples: list[Example], batch_size: int, rng: np.random.Generator):
    """Length-bucketed batches in shuffled order (bounds padding waste)."""
    order = sorted(range(len(examples)), key=lambda i: examples[i].features.shape[0])
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(groups)
    return [[examples[i] for i in group] for group in groups]


def _flip_visuals(batch: list[Example], rng: np.random.Generator) -> list[Example]:
    out = []
    for ex in batch:
        visual = ex.visual
        if visual is not None and visual.ndim == 3 and rng.random() < 0.5:
            visual = visual[:, :, ::-1].copy()
        out.append(Example(ex.features, visual, ex.tokens))
    return out


def evaluate_loss(model: Model, examples: list[Example], batch_size: int = 16) -> float:
    total, count = 0.0, 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        total += model.forward_loss(chunk).item() * len(chunk)
        count += len(chunk)
    return total / count


def train(
    model: Model,
    train_examples: list[Example],
    val_examples: list[Example],
    cfg: TrainConfig,
    out_dir,
    feature_stats=None,
    log_file: str = "train.log",
) -> CheckpointStore:
    """Seeded epoch loop: augment, backprop, Adam with the warmup schedule.

    Saves one checkpoint per epoch tagged with its validation loss and
    appends ``step<TAB>lr<TAB>train_loss<TAB>val_loss`` per epoch to the
    training log. Bit-identical outputs for identical seeds and inputs.
    """
    if not train_examples or not val_examples:
        raise ValueError("train and validation sets must be nonempty")
    out_dir = Path(out_dir)
    store = CheckpointStore(out_dir, retention=cfg.keep_checkpoints)
    log_path = out_dir / log_file

    rng = np.random.default_rng(cfg.seed)
    shuffle_rng, flip_rng, model_rng = rng.spawn(3)
    state = AdamState()
    trainable = model.trainable_parameters()
    step = 0
    with open(log_path, "a") as logf:
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for batch in _batches(train_examples, cfg.batch_size, shuffle_rng):
                if cfg.flip_images:
                    batch = _flip_visuals(batch, flip_rng)
                lr = cfg.schedule.lr(step)
                step_rng = model_rng.spawn(1)[0]
                with Tape() as tape:
                    loss = model.forward_loss(batch, augment=cfg.augment,
                                              rng=step_rng, train=True)
                grads = tape.backward(loss)
                adam_step(trainable, {k: g.data for k, g in grads.items()}, state, lr)
                epoch_losses.append(loss.item())
                step += 1
            val_loss = evaluate_loss(model, val_examples, cfg.batch_size)
            train_loss = float(np.mean(epoch_losses))
            store.save(model, step=step, epoch=epoch, val_loss=val_loss,
                       feature_stats=feature_stats)
            logf.write(f"{step}\t{cfg.schedule.lr(step):.8g}\t{train_loss:.6f}\t{val_loss:.6f}\n")
            logf.flush()
    return store
