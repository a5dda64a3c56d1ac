"""Desk-scale stand-in for ImageNet pretraining of the visual encoder.

Trains the residual CNN on the synthetic pattern-classification manifest
(one class per grounded word); the resulting checkpoint's
``visual_encoder`` component transfers into multimodal ASR models.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .dataio import load_visual
from .errors import DataError
from .tokenizer import normalize
from .training import AdamState, CheckpointStore, adam_step
from .visual import VisualEncoder


def train_classifier(cfg, entries, root, out_dir) -> CheckpointStore:
    """Train pattern classification; saves per-epoch checkpoints."""
    classes = sorted({normalize(e.text) for e in entries})
    if len(classes) < 2:
        raise DataError("visual pretraining needs at least two classes")
    class_id = {c: i for i, c in enumerate(classes)}
    visual_cfg = cfg.visual_config()
    data = []
    for entry in entries:
        image = load_visual(entry, root, visual_cfg)
        if image is None or image.ndim != 3:
            raise DataError(f"{entry.utt_id}: visual pretraining needs images")
        data.append((image, class_id[normalize(entry.text)]))

    # hold out every fifth example for checkpoint ranking
    val = [x for i, x in enumerate(data) if i % 5 == 0]
    train = [x for i, x in enumerate(data) if i % 5 != 0]

    rng = np.random.default_rng(cfg.seed)
    shuffle_rng, flip_rng = rng.spawn(2)
    encoder = VisualEncoder(visual_cfg, np.random.default_rng(cfg.init_seed),
                            n_classes=len(classes))
    state = AdamState()
    store = CheckpointStore(Path(out_dir), retention=cfg.keep_checkpoints)
    schedule = cfg.schedule()

    def batch_loss(batch, flip):
        losses = []
        for image, label in batch:
            if flip and flip_rng.random() < 0.5:
                image = image[:, :, ::-1].copy()
            logits = encoder.classify(image)
            losses.append(ad.cross_entropy(logits, np.array([label])))
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        return ad.scale(total, 1.0 / len(batch))

    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            with Tape() as tape:
                loss = batch_loss(batch, flip=cfg.flip_images)
            grads = tape.backward(loss)
            adam_step(encoder.params, {k: g.data for k, g in grads.items()},
                      state, schedule.lr(step))
            step += 1
        val_loss = sum(batch_loss([x], flip=False).item() for x in val) / len(val)
        store.save(encoder, step=step, epoch=epoch, val_loss=val_loss,
                   metadata={"classes": ",".join(classes)})
    return store
