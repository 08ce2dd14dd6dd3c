"""Classifier and segmenter with Monte-Carlo Bayesian uncertainty.

Both models expose two stochastic outputs per forward pass: the prediction
and a predicted variance (the network emits log-variance and exponentiates,
keeping positivity unconstrained). Predictive uncertainty over T dropout
samples decomposes as

    Var(y) ~ E[y_t^2] - E[y_t]^2  (epistemic)  +  E[var_t]  (aleatoric).

The classifier follows the fine-tuning protocol: a frozen feature backbone
(externally pretrained weights or the desk-scale substitute trained by
``pretrain``) with only the final classification layer and the variance
head updated afterwards.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import checkpoint as ckpt
from .core import POSITIVE_LABEL
from .errors import DataError, TrainError
from .nets import BackboneNet, ClassifierHead, UNetNet, seeded_dropout, with_torch_seed
from .rng import RngStream

_LOGVAR_CLAMP = (-10.0, 4.0)


# ---------------------------------------------------------------------------
# uncertainty containers


@dataclass(frozen=True)
class MCSampleSet:
    """T paired stochastic outputs: predictions y and predicted variances."""

    y: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if y.shape != var.shape or y.ndim < 1 or y.shape[0] < 1:
            raise DataError("y and var must be (T, ...) arrays with T >= 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(var))):
            raise DataError("MC samples contain non-finite values")
        if var.min() < 0:
            raise DataError("predicted variances must be non-negative")
        y.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "var", var)

    @property
    def t(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class UncertaintyScore:
    """Total predictive uncertainty and its epistemic/aleatoric split."""

    total: float
    epistemic: float
    aleatoric: float

    def __post_init__(self):
        eps = 1e-9
        if self.epistemic < -eps or self.aleatoric < -eps or self.total < -eps:
            raise DataError("uncertainty components must be non-negative")
        if abs(self.total - (self.epistemic + self.aleatoric)) > eps:
            raise DataError("total must equal epistemic + aleatoric")


def predictive_uncertainty(samples: MCSampleSet) -> UncertaintyScore:
    """Decomposed predictive uncertainty of a unary-output sample set."""
    if samples.y.ndim != 1:
        raise DataError(
            "predictive_uncertainty expects scalar outputs; use "
            "pixel_uncertainty for grids"
        )
    y, var = samples.y, samples.var
    epistemic = float(np.mean(y**2) - np.mean(y) ** 2)
    aleatoric = float(np.mean(var))
    epistemic = max(epistemic, 0.0)
    return UncertaintyScore(epistemic + aleatoric, epistemic, aleatoric)


def pixel_uncertainty(samples: MCSampleSet) -> np.ndarray:
    """Per-pixel total predictive uncertainty map for grid-valued samples."""
    if samples.y.ndim != 3:
        raise DataError("pixel_uncertainty expects (T, H, W) sample sets")
    y, var = samples.y, samples.var
    epistemic = np.clip(np.mean(y**2, axis=0) - np.mean(y, axis=0) ** 2, 0.0, None)
    return epistemic + np.mean(var, axis=0)


def _labels_to_int(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "iub":
        return arr.astype(np.int64)
    return np.asarray([1 if v == POSITIVE_LABEL else 0 for v in arr], dtype=np.int64)


def _het_binary_nll(logits, logvars, targets, n_samples, generator):
    """Attenuated cross-entropy: logits corrupted by predicted-variance noise."""
    sigma = torch.exp(0.5 * logvars.clamp(*_LOGVAR_CLAMP))
    eps = torch.randn((n_samples,) + logits.shape, generator=generator)
    z = logits.unsqueeze(0) + sigma.unsqueeze(0) * eps
    # log p(y=1) = -softplus(-z); log p(y=0) = -softplus(z)
    logp = torch.where(targets.unsqueeze(0) > 0.5, -F.softplus(-z), -F.softplus(z))
    return -(torch.logsumexp(logp, dim=0) - np.log(n_samples)).mean()


# ---------------------------------------------------------------------------
# classifier


class DropoutClassifier(BaseEstimator):
    """Binary image classifier: frozen conv backbone + trainable final layer.

    ``fit`` trains the whole net on the initial data (the desk-scale
    stand-in for an externally pretrained backbone) and freezes everything
    but the head; ``finetune`` then updates only the final classification
    layer and the variance head. Dropout before the final layer provides
    the MC sampling path.
    """

    def __init__(
        self,
        feature_channels=16,
        dropout_rate=0.5,
        backbone_steps=300,
        head_steps=150,
        learning_rate=1e-3,
        batch_size=32,
        het_samples=8,
        random_state=0,
    ):
        self.feature_channels = feature_channels
        self.dropout_rate = dropout_rate
        self.backbone_steps = backbone_steps
        self.head_steps = head_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.het_samples = het_samples
        self.random_state = random_state

    kind = "classifier"

    # -- lifecycle -----------------------------------------------------------

    def _init_nets(self):
        with with_torch_seed(self.random_state):
            self.backbone_ = BackboneNet(self.feature_channels)
            rate = self.dropout_rate if self.dropout_rate is not None else 0.0
            self.head_ = ClassifierHead(self.backbone_.feature_dim, rate)
        self.ce_history_ = []

    @classmethod
    def with_backbone(cls, backbone: BackboneNet, **params) -> "DropoutClassifier":
        """Build around an externally pretrained (frozen) backbone.

        Only the head is freshly initialized; this mirrors taking published
        pretrained weights and attaching a new classification layer.
        """
        channels = backbone.conv1.out_channels
        model = cls(feature_channels=channels, **params)
        model.backbone_ = backbone
        with with_torch_seed(model.random_state):
            rate = model.dropout_rate if model.dropout_rate is not None else 0.0
            model.head_ = ClassifierHead(backbone.feature_dim, rate)
        model.ce_history_ = []
        model.freeze_backbone()
        return model

    def fit(self, X, y):
        """Pretrain backbone + head on (N, H, W) images, then freeze the backbone."""
        X, y = self._check_xy(X, y)
        self._init_nets()
        images = torch.from_numpy(X).unsqueeze(1)
        targets = torch.from_numpy(y.astype(np.float32))
        params = list(self.backbone_.parameters()) + list(self.head_.parameters())
        opt = torch.optim.Adam(params, lr=self.learning_rate)
        order = np.random.default_rng(self.random_state)
        noise = torch.Generator().manual_seed(self.random_state)
        n = len(images)
        for _ in range(self.backbone_steps):
            idx = order.choice(n, size=min(self.batch_size, n), replace=False)
            feats = self.backbone_.features(images[idx])
            logits, logvars = self.head_(feats)
            loss = _het_binary_nll(logits, logvars, targets[idx], self.het_samples, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.freeze_backbone()
        return self

    def freeze_backbone(self):
        self.backbone_.eval()
        for p in self.backbone_.parameters():
            p.requires_grad_(False)

    def backbone_checksum(self) -> str:
        """Digest of backbone parameters; stable iff the backbone is untouched."""
        h = hashlib.sha256()
        for _, tensor in sorted(self.backbone_.state_dict().items()):
            h.update(tensor.detach().numpy().tobytes())
        return h.hexdigest()

    def _check_xy(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = _labels_to_int(y)
        if X.ndim != 3 or len(X) != len(y):
            raise DataError("expected (N, H, W) images with one label per image")
        if len(X) == 0:
            raise DataError("empty training set")
        if len(np.unique(y)) < 2:
            raise TrainError("training labels contain a single class")
        return X, y

    def _check_fitted(self):
        if not hasattr(self, "head_"):
            raise NotFittedError("DropoutClassifier is not fitted")

    # -- features ------------------------------------------------------------

    def features(self, X) -> np.ndarray:
        """Frozen-backbone feature vectors for (N, H, W) images."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float32)
        with torch.no_grad():
            feats = self.backbone_.features(torch.from_numpy(X).unsqueeze(1))
        return feats.numpy()

    # -- head fine-tuning ------------------------------------------------------

    def finetune(self, X, y, steps=None, seed=None, features=None):
        """Update only the final layer and variance head on the labeled pool.

        ``features`` may carry precomputed backbone features for X. The
        plain cross-entropy over the full set is recorded per step in
        ``ce_history_``.
        """
        self._check_fitted()
        y = _labels_to_int(y)
        if len(np.unique(y)) < 2:
            raise TrainError("fine-tuning labels contain a single class")
        feats_np = self.features(X) if features is None else np.asarray(features, dtype=np.float32)
        if len(feats_np) != len(y):
            raise DataError("feature/label count mismatch")
        feats = torch.from_numpy(feats_np)
        targets = torch.from_numpy(y.astype(np.float32))
        steps = self.head_steps if steps is None else steps
        seed = self.random_state if seed is None else seed

        opt = torch.optim.Adam(self.head_.parameters(), lr=self.learning_rate)
        order = np.random.default_rng(seed)
        noise = torch.Generator().manual_seed(seed)
        drop = torch.Generator().manual_seed(seed + 1)
        n = len(feats)
        before = self.backbone_checksum()
        self.ce_history_ = [self._full_ce(feats, targets)]
        for _ in range(steps):
            idx = order.choice(n, size=min(self.batch_size, n), replace=False)
            logits, logvars = self.head_(feats[idx], sample_dropout=True, generator=drop)
            loss = _het_binary_nll(logits, logvars, targets[idx], self.het_samples, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.ce_history_.append(self._full_ce(feats, targets))
        assert self.backbone_checksum() == before  # freeze contract
        return self

    def _full_ce(self, feats, targets) -> float:
        with torch.no_grad():
            logits, _ = self.head_(feats)
            return float(F.binary_cross_entropy_with_logits(logits, targets))

    # -- inference -----------------------------------------------------------

    def predict_proba(self, X) -> np.ndarray:
        """Deterministic class probabilities [P(normal), P(nodule)] per image."""
        return self.predict_proba_from_features(self.features(X))

    def predict_proba_from_features(self, feats) -> np.ndarray:
        self._check_fitted()
        with torch.no_grad():
            logits, _ = self.head_(torch.from_numpy(np.asarray(feats, dtype=np.float32)))
            pos = torch.sigmoid(logits).numpy().astype(np.float64)
        return np.stack([1.0 - pos, pos], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    @property
    def has_dropout(self) -> bool:
        return self.dropout_rate is not None

    def mc_forward_features(self, feats: np.ndarray, t: int, rng: RngStream):
        """Vectorized MC sampling over precomputed features.

        Returns (y, var) arrays of shape (T, N): positive-class probability
        and predicted variance per stochastic pass.
        """
        self._check_fitted()
        if not self.has_dropout:
            raise DataError("MC sampling unavailable: model has no dropout layers")
        if t < 1:
            raise DataError("t must be >= 1")
        feats_t = torch.from_numpy(np.asarray(feats, dtype=np.float32))
        gen = torch.Generator().manual_seed(rng.torch_seed())
        ys, vars_ = [], []
        with torch.no_grad():
            for _ in range(t):
                logits, logvars = self.head_(feats_t, sample_dropout=True, generator=gen)
                ys.append(torch.sigmoid(logits).numpy())
                vars_.append(torch.exp(logvars.clamp(*_LOGVAR_CLAMP)).numpy())
        return np.stack(ys).astype(np.float64), np.stack(vars_).astype(np.float64)


def finetune_classifier(model: DropoutClassifier, labeled, config, rng: RngStream):
    """Fine-tune the final layer on labeled samples; backbone untouched."""
    if not labeled:
        raise DataError("empty labeled set")
    X = np.stack([s.pixels for s in labeled]).astype(np.float32)
    y = [s.label for s in labeled]
    return model.finetune(
        X, y, steps=config.head_steps, seed=rng.torch_seed() % (2**31)
    )


def mc_forward(model, image, t: int, rng: RngStream) -> MCSampleSet:
    """T stochastic forward passes with independently sampled dropout."""
    image = np.asarray(image, dtype=np.float32)
    if isinstance(model, DropoutClassifier):
        feats = model.features(image[None])
        y, var = model.mc_forward_features(feats, t, rng)
        return MCSampleSet(y[:, 0], var[:, 0])
    if isinstance(model, UNetSegmenter):
        return model.mc_forward(image, t, rng)
    raise DataError(f"model {type(model).__name__} does not support MC sampling")


def image_uncertainty(model, image, config, rng: RngStream) -> float:
    """Scalar acquisition score for one image.

    Classification: decomposed uncertainty of the positive-class
    probability. Segmentation: unweighted mean of the per-pixel totals.
    """
    samples = mc_forward(model, image, config.t_mc, rng)
    if samples.y.ndim == 1:
        return predictive_uncertainty(samples).total
    return float(np.mean(pixel_uncertainty(samples)))


# ---------------------------------------------------------------------------
# segmenter


class UNetSegmenter(BaseEstimator):
    """U-Net lung segmenter with decoder dropout and a per-pixel variance head."""

    def __init__(
        self,
        channels=8,
        dropout_rate=0.5,
        steps=200,
        learning_rate=1e-3,
        batch_size=8,
        het_samples=4,
        random_state=0,
    ):
        self.channels = channels
        self.dropout_rate = dropout_rate
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.het_samples = het_samples
        self.random_state = random_state

    kind = "segmenter"

    def fit(self, X, masks):
        """Train from scratch on (N, H, W) images and binary masks."""
        X = np.asarray(X, dtype=np.float32)
        masks = np.asarray(masks, dtype=np.float32)
        if X.shape != masks.shape or X.ndim != 3 or len(X) == 0:
            raise DataError("expected matching nonempty (N, H, W) images and masks")
        rate = self.dropout_rate if self.dropout_rate is not None else 0.0
        with with_torch_seed(self.random_state):
            net = UNetNet(self.channels, rate)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        order = np.random.default_rng(self.random_state)
        noise = torch.Generator().manual_seed(self.random_state)
        images = torch.from_numpy(X).unsqueeze(1)
        targets = torch.from_numpy(masks)
        n = len(images)
        self.loss_history_ = []
        for _ in range(self.steps):
            idx = order.choice(n, size=min(self.batch_size, n), replace=False)
            logits, logvars = net(images[idx])
            loss = _het_binary_nll(logits, logvars, targets[idx], self.het_samples, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.loss_history_.append(float(loss.detach()))
        net.eval()
        self.net_ = net
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("UNetSegmenter is not fitted")

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel foreground probabilities, deterministic (dropout off)."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float32)
        with torch.no_grad():
            logits, _ = self.net_(torch.from_numpy(X).unsqueeze(1))
        return torch.sigmoid(logits).numpy().astype(np.float64)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    @property
    def has_dropout(self) -> bool:
        return self.dropout_rate is not None

    def mc_forward(self, image, t: int, rng: RngStream) -> MCSampleSet:
        self._check_fitted()
        if not self.has_dropout:
            raise DataError("MC sampling unavailable: model has no dropout layers")
        if t < 1:
            raise DataError("t must be >= 1")
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
        gen = torch.Generator().manual_seed(rng.torch_seed())
        ys, vars_ = [], []
        with torch.no_grad():
            for _ in range(t):
                logits, logvars = self.net_(x, sample_dropout=True, generator=gen)
                ys.append(torch.sigmoid(logits)[0].numpy())
                vars_.append(torch.exp(logvars.clamp(*_LOGVAR_CLAMP))[0].numpy())
        return MCSampleSet(np.stack(ys), np.stack(vars_))


def train_segmenter(labeled, config, rng: RngStream) -> UNetSegmenter:
    """Train a fresh segmenter on labeled samples per the ExperimentConfig."""
    labeled = list(labeled)
    if not labeled:
        raise DataError("empty labeled set")
    X = np.stack([s.pixels for s in labeled])
    masks = np.stack([s.mask for s in labeled])
    seg = UNetSegmenter(
        channels=config.segmenter_channels,
        dropout_rate=config.dropout_rate,
        steps=config.segmenter_steps,
        learning_rate=config.learning_rate,
        batch_size=min(config.effective_batch_size, len(labeled)),
        random_state=rng.torch_seed() % (2**31),
    )
    return seg.fit(X, masks)


# ---------------------------------------------------------------------------
# classifier persistence (format shared with the cgan module)


def save_classifier(model: DropoutClassifier, path):
    model._check_fitted()
    tensors = {}
    tensors.update(ckpt.module_tensors(model.backbone_, "backbone/"))
    tensors.update(ckpt.module_tensors(model.head_, "head/"))
    return ckpt.save_checkpoint(
        path,
        kind="classifier",
        architecture={
            "feature_channels": model.feature_channels,
            "dropout_rate": model.dropout_rate,
        },
        tensors=tensors,
    )


def load_classifier(path) -> DropoutClassifier:
    data = ckpt.load_checkpoint(path)
    if data.kind != "classifier":
        raise DataError(f"{path} is a {data.kind!r} checkpoint")
    model = DropoutClassifier(
        feature_channels=data.architecture["feature_channels"],
        dropout_rate=data.architecture["dropout_rate"],
    )
    model._init_nets()
    ckpt.load_module_tensors(model.backbone_, data.tensors, "backbone/")
    ckpt.load_module_tensors(model.head_, data.tensors, "head/")
    model.freeze_backbone()
    return model
