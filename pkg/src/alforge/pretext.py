"""Generic backbone pretraining, the desk-scale stand-in for ImageNet weights.

The real pipeline fine-tunes the last layer of an externally pretrained
network. At desk scale that external corpus is replaced by a free,
procedurally generated "blob world": noisy bright backgrounds with dark
elliptic regions, half the images carrying small bright dots inside those
regions. A backbone trained to detect the dots (at any contrast) acquires
graded center-surround responses that transfer to the toy task, while the
task-specific contrast threshold still has to be learned downstream from
labels.

The trained backbone depends only on its own seed and hyperparameters, so
like ImageNet weights it is shared across experiment seeds; a small
in-process cache avoids recomputing it within one process.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import binary_erosion, gaussian_filter

from .nets import BackboneNet, ClassifierHead, with_torch_seed
from .rng import RngStream

_CACHE: dict[tuple, BackboneNet] = {}


def pretext_corpus(n: int, image_size: tuple[int, int], rng: RngStream):
    """Blob-world images labeled by the presence of in-region bright dots."""
    h, w = image_size
    gen = rng.generator()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    X = np.empty((n, h, w), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        img = gen.uniform(0.45, 0.85) + gen.normal(0.0, gen.uniform(0.02, 0.06), (h, w))
        img += gen.uniform(-0.1, 0.1) * (yy / h - 0.5)
        img += gen.uniform(-0.1, 0.1) * (xx / w - 0.5)
        regions = []
        for _ in range(int(gen.integers(1, 4))):
            cy, cx = gen.uniform(0.2, 0.8) * h, gen.uniform(0.2, 0.8) * w
            ay, ax = gen.uniform(0.12, 0.3) * h, gen.uniform(0.1, 0.28) * w
            theta = gen.uniform(0.0, np.pi)
            u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
            v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
            m = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
            img[m] = gen.uniform(0.15, 0.4) + gen.normal(0.0, 0.05, int(m.sum()))
            regions.append(m)
        label = int(gen.random() < 0.5)
        if label:
            for _ in range(int(gen.integers(1, 3))):
                m = regions[int(gen.integers(len(regions)))]
                inner = binary_erosion(m, iterations=3)
                if not inner.any():
                    inner = m
                ys, xs = np.nonzero(inner)
                k = int(gen.integers(len(ys)))
                radius = gen.uniform(1.4, 4.0)
                contrast = gen.uniform(0.03, 0.6)
                img += contrast * np.exp(
                    -((yy - ys[k]) ** 2 + (xx - xs[k]) ** 2) / (2.0 * radius**2)
                )
        img = gaussian_filter(img, gen.uniform(0.4, 0.9))
        X[i] = np.clip(img, 0.0, 1.0)
        y[i] = label
    return X, y


def train_generic_backbone(
    channels: int,
    image_size: tuple[int, int],
    corpus_size: int = 3072,
    steps: int = 1000,
    learning_rate: float = 2e-3,
    batch_size: int = 32,
    seed: int = 1234,
) -> BackboneNet:
    """Train and freeze a backbone on the pretext corpus; deterministic."""
    key = (channels, tuple(image_size), corpus_size, steps, learning_rate, batch_size, seed)
    if key in _CACHE:
        return _CACHE[key]

    X, y = pretext_corpus(corpus_size, image_size, RngStream(seed, "pretext/corpus"))
    with with_torch_seed(RngStream(seed, "pretext/init").torch_seed()):
        backbone = BackboneNet(channels)
        head = ClassifierHead(backbone.feature_dim, dropout_rate=0.0)
    opt = torch.optim.Adam(
        list(backbone.parameters()) + list(head.parameters()), lr=learning_rate
    )
    images = torch.from_numpy(X).unsqueeze(1)
    targets = torch.from_numpy(y.astype(np.float32))
    order = RngStream(seed, "pretext/batches").generator()
    n = len(images)
    for _ in range(steps):
        idx = order.choice(n, size=min(batch_size, n), replace=False)
        logits, _ = head(backbone.features(images[idx]))
        loss = F.binary_cross_entropy_with_logits(logits, targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    _CACHE[key] = backbone
    return backbone


def generic_backbone_from_config(config) -> BackboneNet:
    return train_generic_backbone(
        channels=config.feature_channels,
        image_size=config.image_size,
        corpus_size=config.pretext_corpus,
        steps=config.pretext_steps,
        seed=config.pretext_seed,
    )
