"""Similarity and evaluation measures.

Two families live here. The evaluation family (``nmi``, ``mse``, ``dice``,
``hausdorff``, ``sens_spec_auc``, ``annotation_savings``) is numpy-exact and
is what reports are built from. The differentiable family (``soft_nmi``,
``batch_mse``, ``batch_feature_distance``) mirrors the first on torch
tensors with Parzen-window soft binning so the generator objective has
usable gradients; the two families are tested against each other and
against brute-force oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import directed_hausdorff
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import checkpoint as ckpt
from .errors import DataError
from .nets import BackboneNet, with_torch_seed
from .validation import check_image, check_mask, check_nonempty_mask, check_same_shape


# ---------------------------------------------------------------------------
# intensity similarity


def nmi(x, y, bins: int = 64) -> float:
    """Normalized mutual information 2*I(X;Y) / (H(X)+H(Y)) on [0, 1] grids.

    Joint intensity histogram with ``bins`` equal-width bins on [0, 1],
    natural log. When both images are constant (both entropies zero) the
    value is 1.0 by convention.
    """
    x = check_image(x, "x")
    y = check_image(y, "y")
    check_same_shape(x, y, ("x", "y"))
    if bins < 2:
        raise DataError(f"bins must be >= 2, got {bins}")

    joint, _, _ = np.histogram2d(
        x.ravel(), y.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]]
    )
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)

    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px[:, None] * py[None, :])[nz])))
    hx = float(-np.sum(px[px > 0] * np.log(px[px > 0])))
    hy = float(-np.sum(py[py > 0] * np.log(py[py > 0])))
    if hx + hy == 0.0:
        return 1.0
    return 2.0 * mi / (hx + hy)


def mse(x, y) -> float:
    x = check_image(x, "x")
    y = check_image(y, "y")
    check_same_shape(x, y, ("x", "y"))
    return float(np.mean((x - y) ** 2))


def feature_distance(x, y, feat: "FeatureExtractor") -> float:
    """Mean squared difference over all designated-layer feature maps."""
    fx = feat.transform(np.asarray(x, dtype=np.float64)[None])[0]
    fy = feat.transform(np.asarray(y, dtype=np.float64)[None])[0]
    return float(np.mean((fx - fy) ** 2))


# ---------------------------------------------------------------------------
# differentiable counterparts (operate on (N, P) flattened torch tensors)


def _soft_assign(values: torch.Tensor, bins: int, bandwidth: float) -> torch.Tensor:
    centers = (torch.arange(bins, dtype=values.dtype, device=values.device) + 0.5) / bins
    w = torch.exp(-((values.unsqueeze(-1) - centers) ** 2) / (2.0 * bandwidth**2))
    return w / w.sum(dim=-1, keepdim=True).clamp_min(1e-30)


def soft_nmi(
    x: torch.Tensor, y: torch.Tensor, bins: int = 32, bandwidth: float | None = None
) -> torch.Tensor:
    """Differentiable NMI per image; inputs are (N, P) pixel tensors in [0, 1]."""
    if bandwidth is None:
        bandwidth = 1.0 / bins
    eps = 1e-12
    wx = _soft_assign(x, bins, bandwidth)
    wy = _soft_assign(y, bins, bandwidth)
    joint = torch.einsum("npb,npc->nbc", wx, wy) / x.shape[1]
    px = joint.sum(dim=2)
    py = joint.sum(dim=1)
    outer = px.unsqueeze(2) * py.unsqueeze(1)
    mi = (joint * (torch.log(joint + eps) - torch.log(outer + eps))).sum(dim=(1, 2))
    hx = -(px * torch.log(px + eps)).sum(dim=1)
    hy = -(py * torch.log(py + eps)).sum(dim=1)
    return 2.0 * mi / (hx + hy + eps)


def batch_mse(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((x - y) ** 2).mean(dim=1)


def batch_feature_distance(fx: torch.Tensor, fy: torch.Tensor) -> torch.Tensor:
    return ((fx - fy) ** 2).flatten(1).mean(dim=1)


# ---------------------------------------------------------------------------
# feature extractor


class FeatureExtractor(BaseEstimator):
    """Frozen convolutional embedding used by the content loss.

    At desk scale it is a small classifier trained from scratch on the toy
    data; features are the maps of its last convolution. Externally trained
    backbone weights can be loaded from a checkpoint instead, in which case
    the map count is whatever the checkpoint declares.
    """

    def __init__(self, channels=16, steps=200, learning_rate=1e-3, batch_size=16,
                 random_state=0):
        self.channels = channels
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        """Train on (N, H, W) images with binary integer labels, then freeze."""
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.float32)
        if X.ndim != 3 or len(X) != len(y):
            raise DataError("expected (N, H, W) images with one label per image")
        with with_torch_seed(self.random_state):
            net = BackboneNet(self.channels)
            head = torch.nn.Linear(net.feature_dim, 1)
        opt = torch.optim.Adam(
            list(net.parameters()) + list(head.parameters()), lr=self.learning_rate
        )
        images = torch.from_numpy(X).unsqueeze(1)
        targets = torch.from_numpy(y)
        order_rng = np.random.default_rng(self.random_state)
        n = len(images)
        for _ in range(self.steps):
            idx = order_rng.choice(n, size=min(self.batch_size, n), replace=False)
            logits = head(net.features(images[idx])).squeeze(1)
            loss = torch.nn.functional.binary_cross_entropy_with_logits(
                logits, targets[idx]
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net_ = net
        self.n_maps_ = net.conv3.out_channels
        return self

    @classmethod
    def from_net(cls, net: BackboneNet) -> "FeatureExtractor":
        """Wrap an already-trained (external/pretext) backbone; frozen."""
        fx = cls(channels=net.conv1.out_channels)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        fx.net_ = net
        fx.n_maps_ = net.conv3.out_channels
        return fx

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("FeatureExtractor is not fitted")

    def transform(self, X) -> np.ndarray:
        """Feature maps (N, C, h, w) for (N, H, W) images; deterministic."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float32)
        with torch.no_grad():
            maps = self.torch_maps(torch.from_numpy(X).unsqueeze(1))
        return maps.numpy().astype(np.float64)

    def torch_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable map extraction on an (N, 1, H, W) tensor."""
        self._check_fitted()
        net = self.net_.double() if x.dtype == torch.float64 else self.net_
        return net.feature_maps(x)

    def save(self, path):
        self._check_fitted()
        return ckpt.save_checkpoint(
            path,
            kind="feature_extractor",
            architecture={"channels": self.channels, "n_maps": self.n_maps_},
            tensors=ckpt.module_tensors(self.net_),
        )

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        data = ckpt.load_checkpoint(path)
        if data.kind != "feature_extractor":
            raise DataError(f"{path} is a {data.kind!r} checkpoint")
        fx = cls(channels=data.architecture["channels"])
        net = BackboneNet(fx.channels)
        ckpt.load_module_tensors(net, data.tensors)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        fx.net_ = net
        fx.n_maps_ = data.architecture["n_maps"]
        return fx


# ---------------------------------------------------------------------------
# classification metrics


def sens_spec_auc(scores, labels) -> tuple[float, float, float]:
    """Sensitivity/specificity at threshold 0.5 and rank-statistic AUC.

    ``labels`` are 0/1 with 1 the positive class; tied scores contribute
    one half to the AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be matching 1-d arrays")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores contain non-finite values")
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: labels contain a single class")

    pred_pos = scores >= 0.5
    sens = float(np.sum(pred_pos & pos) / n_pos)
    spec = float(np.sum(~pred_pos & neg) / n_neg)

    ranks = rankdata(scores, method="average")
    auc = float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return sens, spec, auc


# ---------------------------------------------------------------------------
# segmentation metrics


def dice(a, b) -> float:
    """Overlap 2|A∩B| / (|A|+|B|); two empty masks count as perfectly equal."""
    a = check_mask(a, "a")
    b = check_mask(b, "b")
    check_same_shape(a, b, ("a", "b"))
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / total


def boundary_points(mask) -> np.ndarray:
    """Boundary pixel coordinates via 4-neighborhood erosion difference."""
    mask = check_nonempty_mask(mask)
    interior = binary_erosion(mask, border_value=0)
    border = mask.astype(bool) & ~interior
    return np.argwhere(border)


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance (exact maximum, Euclidean, pixels)."""
    pa = boundary_points(a).astype(np.float64)
    pb = boundary_points(b).astype(np.float64)
    d_ab = directed_hausdorff(pa, pb)[0]
    d_ba = directed_hausdorff(pb, pa)[0]
    return float(max(d_ab, d_ba))


# ---------------------------------------------------------------------------
# annotation accounting


def annotation_savings(labeled_ids, full_pool) -> tuple[float, float]:
    """Fraction of annotated pixels and the complementary savings.

    ``full_pool`` items are samples (or ``(id, n_pixels, provenance)``
    tuples). Synthetic samples never require annotation: they are excluded
    from the effort base and contribute nothing even when labeled.
    """
    entries = {}
    for item in full_pool:
        if isinstance(item, tuple):
            sid, n_pixels, provenance = item
        else:
            sid, n_pixels, provenance = item.id, item.pixels.size, item.provenance
        entries[sid] = (int(n_pixels), provenance)
    if not entries:
        raise DataError("empty pool")
    labeled = set(labeled_ids)
    unknown = labeled - entries.keys()
    if unknown:
        raise DataError(f"labeled ids not in pool: {sorted(unknown)[:5]}")

    total = sum(n for n, prov in entries.values() if prov == "real")
    if total == 0:
        raise DataError("pool contains no real images")
    annotated = sum(
        n for sid, (n, prov) in entries.items() if prov == "real" and sid in labeled
    )
    pixel_fraction = annotated / total
    return pixel_fraction, 1.0 - pixel_fraction


# ---------------------------------------------------------------------------
# report record


@dataclass
class EvalReport:
    """One evaluation row; classification and segmentation metrics plus cost."""

    sens: float
    spec: float
    auc: float
    dice: float | None
    hd: float | None
    labeled_fraction: float
    pixel_fraction: float

    def __post_init__(self):
        for name in ("sens", "spec", "auc", "labeled_fraction", "pixel_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DataError(f"{name}={value} outside [0, 1]")
        if self.dice is not None and not 0.0 <= self.dice <= 1.0:
            raise DataError(f"dice={self.dice} outside [0, 1]")
        if self.hd is not None and self.hd < 0.0:
            raise DataError(f"hd={self.hd} negative")

    CSV_HEADER = "round,labeled_count,labeled_fraction,pixel_fraction,sens,spec,auc,dice,hd"

    def csv_row(self, round_index: int, labeled_count: int) -> str:
        def fmt(v):
            return "nan" if v is None else f"{v:.6f}"

        return ",".join(
            [
                str(round_index),
                str(labeled_count),
                f"{self.labeled_fraction:.6f}",
                f"{self.pixel_fraction:.6f}",
                fmt(self.sens),
                fmt(self.spec),
                fmt(self.auc),
                fmt(self.dice),
                fmt(self.hd),
            ]
        )

    def human(self) -> str:
        """Percent-scaled summary (one decimal), pixel distances as-is."""
        parts = [
            f"Sens {100 * self.sens:.1f}",
            f"Spec {100 * self.spec:.1f}",
            f"AUC {100 * self.auc:.1f}",
        ]
        if self.dice is not None:
            parts.append(f"DM {100 * self.dice:.1f}")
        if self.hd is not None:
            parts.append(f"HD {self.hd:.1f}")
        parts.append(f"labeled {100 * self.labeled_fraction:.1f}%")
        return "  ".join(parts)

    def to_dict(self) -> dict:
        return {
            "sens": self.sens,
            "spec": self.spec,
            "auc": self.auc,
            "dice": self.dice,
            "hd": self.hd,
            "labeled_fraction": self.labeled_fraction,
            "pixel_fraction": self.pixel_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in (
            "sens", "spec", "auc", "dice", "hd", "labeled_fraction", "pixel_fraction"
        )})
