"""Probe benchmark difficulty settings for the wide/narrow accuracy spread.

Standalone-trains three reference structures per candidate setting:
  - full width at 32 (sanity: the dataset must stay learnable, > 95%)
  - uniform rho=0.3 prefix mask at 32 (teacher-scale capacity)
  - uniform rho=0.8 prefix mask at 20 (student-scale capacity)
A useful distillation benchmark needs the student-scale structure well
below the teacher-scale one while the sanity bound holds.
"""
import sys
import time

import numpy as np

from prunepool.data import (augment_batch, iterate_batches, resize_batch,
                            synthetic_dataset)
from prunepool.graph import ChannelMask, build_network, subnetwork_view
from prunepool.ops import cross_entropy_loss
from prunepool.optim import SGD, cosine_lr, decay_weights_and_affine
from prunepool.presets import desk_arch
from prunepool.train import calibrate_bn, evaluate


def train_standalone(spec, mask, resolution, data, n_epochs=20, lr=0.1,
                     seed=0):
    store = build_network(spec, seed=seed, precision="f32")
    view = subnetwork_view(store, mask)
    opt = SGD(lr=lr, momentum=0.5, weight_decay=5e-3,
              decay_filter=decay_weights_and_affine)
    for epoch in range(1, n_epochs + 1):
        opt.lr = cosine_lr(lr, epoch, n_epochs)
        rng = np.random.default_rng([seed, 0x9A0B, epoch])
        for x, y in iterate_batches(data, 64, seed=seed, epoch=epoch):
            x = augment_batch(x, rng, flip=False, crop_pad=3)
            x = resize_batch(x, resolution)
            logits, steps = view.forward(x, mode="train", need_cache=True)
            loss, dlogits = cross_entropy_loss(logits, y)
            grads = {}
            view.backward(dlogits, steps, grads)
            opt.step(store.params, grads)
    return store


def probe(name, ds_kwargs):
    spec = desk_arch()
    train, test = synthetic_dataset(seed=0, **ds_kwargs)
    rows = {}
    for tag, rho, res in (("full@32", 0.0, 32), ("rho0.3@32", 0.3, 32),
                          ("rho0.8@20", 0.8, 20)):
        mask = ChannelMask.uniform(spec, rho, structure_id=f"probe{rho:.1f}")
        t0 = time.time()
        store = train_standalone(spec, mask, res, train)
        calibrate_bn(store, spec, mask, res, train, n_batches=8, seed=0)
        r = evaluate(store, spec, mask, res, test)
        rows[tag] = (round(r.accuracy, 4), round(time.time() - t0, 1))
    print(f"{name}: " + "  ".join(f"{k}={v[0]} ({v[1]}s)"
                                  for k, v in rows.items()), flush=True)
    return rows


CANDIDATES = {
    "current": dict(n_per_class=500, sigma=0.6, max_shift=10, contrast=0.30,
                    coarse=8),
    "fine14": dict(n_per_class=500, sigma=0.6, max_shift=10, contrast=0.30,
                   coarse=14),
    "fine14_lowc": dict(n_per_class=500, sigma=0.8, max_shift=10,
                        contrast=0.22, coarse=14),
    "fine16_lowc": dict(n_per_class=500, sigma=0.8, max_shift=12,
                        contrast=0.20, coarse=16),
}


if __name__ == "__main__":
    names = sys.argv[1:] or list(CANDIDATES)
    for name in names:
        probe(name, CANDIDATES[name])
