"""Conditional GAN mapping (source image, mask code) to a synthetic image.

The generator is a residual trunk conditioned on the latent encoding of a
(possibly perturbed) segmentation mask; the discriminator scores
(condition, candidate) pairs. Training balances three terms: the
adversarial objective, an L1 term toward a procedurally perturbed target
(weight ``lambda_l1``), and a content term NMI - FeatDist - MSE that is
*maximal* for identical images, so minimizing it pushes the output away
from the conditioning image.

The generator-side adversarial term uses the non-saturating form
(maximize log D(x, G(x, z))) for stability; the discriminator trains on
the written two-term objective.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import checkpoint as ckpt
from . import maskops
from .core import ImageSample
from .errors import ConfigError, DataError, DivergenceError, TrainError
from .metrics import FeatureExtractor, batch_feature_distance, batch_mse, soft_nmi
from .nets import DiscriminatorNet, GeneratorNet, MaskAENet, with_torch_seed
from .rng import RngStream

_EPS = 1e-7  # probability clamp inside all log terms


@dataclass(frozen=True)
class GanLossConfig:
    """Loss weights and optimizer hyperparameters for GAN training."""

    lambda_l1: float = 10.0
    content_weight: float = 1.0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    steps: int = 400
    batch_size: int = 16

    def __post_init__(self):
        if self.lambda_l1 <= 0:
            raise ConfigError("lambda_l1 must be > 0")


# ---------------------------------------------------------------------------
# mask autoencoder


class MaskAutoencoder(BaseEstimator):
    """Compact latent codes for binary masks via a small convolutional AE.

    fit() holds out a fraction of the masks and requires at least
    ``accuracy_threshold`` per-pixel reconstruction accuracy on them,
    otherwise training is reported as failed (with the final accuracy).
    """

    def __init__(
        self,
        code_dim=32,
        channels=8,
        steps=300,
        learning_rate=1e-3,
        batch_size=16,
        holdout_fraction=0.25,
        accuracy_threshold=0.95,
        random_state=0,
    ):
        self.code_dim = code_dim
        self.channels = channels
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.holdout_fraction = holdout_fraction
        self.accuracy_threshold = accuracy_threshold
        self.random_state = random_state

    def fit(self, masks):
        masks = _stack_masks(masks)
        n, h, w = masks.shape
        if n < 2:
            raise DataError("need at least 2 masks to train the autoencoder")
        if self.code_dim >= h * w:
            raise ConfigError(
                f"code_dim={self.code_dim} is not compressive for {h}x{w} masks"
            )

        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(n)
        n_holdout = max(1, int(round(n * self.holdout_fraction)))
        if n_holdout >= n:
            n_holdout = n - 1
        holdout_idx, train_idx = order[:n_holdout], order[n_holdout:]

        with with_torch_seed(self.random_state):
            net = MaskAENet((h, w), self.code_dim, self.channels)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        data = torch.from_numpy(masks.astype(np.float32)).unsqueeze(1)
        for _ in range(self.steps):
            idx = rng.choice(train_idx, size=min(self.batch_size, len(train_idx)), replace=False)
            logits = net.decode_logits(net.encode(data[idx]))
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, data[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()

        with torch.no_grad():
            recon = net(data[holdout_idx]).squeeze(1).numpy()
        accuracy = float(np.mean((recon > 0.5) == masks[holdout_idx].astype(bool)))
        self.net_ = net
        self.image_size_ = (h, w)
        self.holdout_accuracy_ = accuracy
        if accuracy < self.accuracy_threshold:
            raise TrainError(
                f"mask autoencoder failed to converge: holdout accuracy "
                f"{accuracy:.4f} < {self.accuracy_threshold}"
            )
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("MaskAutoencoder is not fitted")

    def transform(self, masks) -> np.ndarray:
        """Latent codes, one row per mask; deterministic."""
        self._check_fitted()
        masks = _stack_masks(masks)
        if masks.shape[1:] != self.image_size_:
            raise DataError(
                f"mask shape {masks.shape[1:]} does not match the trained "
                f"shape {self.image_size_}"
            )
        with torch.no_grad():
            codes = self.net_.encode(
                torch.from_numpy(masks.astype(np.float32)).unsqueeze(1)
            )
        codes = codes.numpy().astype(np.float64)
        if not np.all(np.isfinite(codes)):
            raise DataError("autoencoder produced non-finite codes")
        return codes

    def inverse_transform(self, codes) -> np.ndarray:
        self._check_fitted()
        codes = np.asarray(codes, dtype=np.float32)
        with torch.no_grad():
            recon = self.net_.decode(torch.from_numpy(codes))
        return recon.squeeze(1).numpy().astype(np.float64)

    def save(self, path):
        self._check_fitted()
        return ckpt.save_checkpoint(
            path,
            kind="mask_autoencoder",
            architecture={
                "code_dim": self.code_dim,
                "channels": self.channels,
                "image_size": list(self.image_size_),
            },
            tensors=ckpt.module_tensors(self.net_),
            extra={"holdout_accuracy": self.holdout_accuracy_},
        )

    @classmethod
    def load(cls, path) -> "MaskAutoencoder":
        data = ckpt.load_checkpoint(path)
        if data.kind != "mask_autoencoder":
            raise DataError(f"{path} is a {data.kind!r} checkpoint")
        ae = cls(code_dim=data.architecture["code_dim"], channels=data.architecture["channels"])
        size = tuple(data.architecture["image_size"])
        net = MaskAENet(size, ae.code_dim, ae.channels)
        ckpt.load_module_tensors(net, data.tensors)
        net.eval()
        ae.net_ = net
        ae.image_size_ = size
        ae.holdout_accuracy_ = data.extra.get("holdout_accuracy", float("nan"))
        return ae


def _stack_masks(masks) -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"expected (N, H, W) masks, got shape {arr.shape}")
    return arr.astype(np.float32)


def train_autoencoder(masks, config, random_state=0) -> MaskAutoencoder:
    """Train a mask autoencoder from an ExperimentConfig."""
    return MaskAutoencoder(
        code_dim=config.code_dim,
        channels=config.ae_channels,
        steps=config.ae_steps,
        learning_rate=config.ae_lr,
        holdout_fraction=config.ae_holdout_fraction,
        accuracy_threshold=config.ae_accuracy_threshold,
        random_state=random_state,
    ).fit(masks)


def encode_mask(ae: MaskAutoencoder, mask) -> np.ndarray:
    """Latent code of a single mask; deterministic, finite, length code_dim."""
    return ae.transform(np.asarray(mask)[None])[0]


# ---------------------------------------------------------------------------
# loss components


def adversarial_loss(D, x: torch.Tensor, y_real: torch.Tensor, y_fake: torch.Tensor):
    """Two-term adversarial objective, batch mean; D maximizes, G minimizes.

    Probabilities are clamped away from {0, 1} so the logs stay finite.
    """
    d_real = D(x, y_real).clamp(_EPS, 1.0 - _EPS)
    d_fake = D(x, y_fake).clamp(_EPS, 1.0 - _EPS)
    return (torch.log(d_real) + torch.log(1.0 - d_fake)).mean()


def l1_loss(y_target: torch.Tensor, y_gen: torch.Tensor):
    if y_target.shape != y_gen.shape:
        raise DataError(
            f"shape mismatch: target {tuple(y_target.shape)} vs "
            f"generated {tuple(y_gen.shape)}"
        )
    return (y_target - y_gen).abs().mean()


def content_loss(x: torch.Tensor, y: torch.Tensor, feat: FeatureExtractor, bins: int = 32):
    """NMI(x, y) - FeatDist(x, y) - MSE(x, y), batch mean.

    Identical images score highest; the term enters the generator objective
    positively, so minimizing the total drives the output away from the
    conditioning image.
    """
    if x.shape != y.shape:
        raise DataError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    flat_x, flat_y = x.flatten(1), y.flatten(1)
    nmi_term = soft_nmi(flat_x, flat_y, bins=bins)
    feat_term = batch_feature_distance(feat.torch_maps(x), feat.torch_maps(y))
    mse_term = batch_mse(flat_x, flat_y)
    return (nmi_term - feat_term - mse_term).mean()


def generator_objective(G, D, batch, config: GanLossConfig, feat: FeatureExtractor | None = None):
    """Non-saturating adversarial term + lambda*L1 + content_weight*content.

    ``batch`` is (x, codes, y_target) tensors. Raises DivergenceError with a
    component breakdown if the total is non-finite.
    """
    x, codes, y_target = batch
    if x.shape[0] == 0:
        raise DataError("empty batch")
    y_fake = G(x, codes)
    adv = -torch.log(D(x, y_fake).clamp(_EPS, 1.0 - _EPS)).mean()
    l1 = l1_loss(y_target, y_fake)
    if config.content_weight != 0.0:
        if feat is None:
            raise ConfigError("content_weight != 0 requires a feature extractor")
        content = content_loss(x, y_fake, feat)
    else:
        content = torch.zeros(())
    total = adv + config.lambda_l1 * l1 + config.content_weight * content
    if not torch.isfinite(total):
        raise DivergenceError(
            "generator objective is non-finite",
            breakdown={
                "adversarial": float(adv.detach()),
                "l1": float(l1.detach()),
                "content": float(content.detach()),
            },
        )
    return total


# ---------------------------------------------------------------------------
# the conditional GAN estimator


class ConditionalGan(BaseEstimator):
    """Paired-sample conditional GAN with a mask-code conditioned generator.

    Training pairs are built from the labeled samples: identity pairs
    (original mask, target = the image itself) plus procedurally perturbed
    pairs whose targets come from the mask-perturbation engine, so the
    generator learns to respond to code changes.
    """

    def __init__(
        self,
        channels=64,
        blocks=6,
        z_channels=1,
        steps=400,
        batch_size=16,
        lambda_l1=10.0,
        content_weight=1.0,
        learning_rate=2e-4,
        beta1=0.5,
        pairs_per_image=4,
        random_state=0,
    ):
        self.channels = channels
        self.blocks = blocks
        self.z_channels = z_channels
        self.steps = steps
        self.batch_size = batch_size
        self.lambda_l1 = lambda_l1
        self.content_weight = content_weight
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.pairs_per_image = pairs_per_image
        self.random_state = random_state

    # -- training ----------------------------------------------------------

    def _build_pairs(self, samples, ae, config, rng: RngStream):
        xs, targets, masks = [], [], []
        for sample in samples:
            xs.append(sample.pixels)
            targets.append(sample.pixels)
            masks.append(sample.mask)
            stream = rng.child(f"pairs/{sample.id}")
            pairs = maskops.generate_perturbations(
                sample, max(0, self.pairs_per_image - 1), config, stream
            )
            for _, spec in pairs:
                img, msk = maskops.apply_perturbation(
                    sample.pixels, sample.mask, spec,
                    RngStream(stream.seed, spec.stream_id),
                )
                xs.append(sample.pixels)
                targets.append(img)
                masks.append(msk)
        codes = ae.transform(np.stack(masks))
        to_t = lambda a: torch.from_numpy(np.stack(a).astype(np.float32))
        return (
            to_t(xs).unsqueeze(1),
            torch.from_numpy(codes.astype(np.float32)),
            to_t(targets).unsqueeze(1),
        )

    def fit(self, samples, ae: MaskAutoencoder, feat: FeatureExtractor, config, rng: RngStream):
        """Alternating D/G training; deterministic given ``rng``."""
        samples = list(samples)
        if not samples:
            raise DataError("cannot train the GAN on an empty dataset")
        h, w = samples[0].shape
        if (h, w) != ae.image_size_:
            raise DataError("autoencoder was trained on a different image size")

        loss_cfg = GanLossConfig(
            lambda_l1=self.lambda_l1,
            content_weight=self.content_weight,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            steps=self.steps,
            batch_size=self.batch_size,
        )
        with with_torch_seed(rng.child("init").torch_seed()):
            G = GeneratorNet((h, w), ae.code_dim, self.channels, self.blocks, self.z_channels)
            D = DiscriminatorNet(self.channels)
        x_all, codes_all, target_all = self._build_pairs(samples, ae, config, rng.child("pairs"))

        opt_g = torch.optim.Adam(G.parameters(), lr=self.learning_rate, betas=(self.beta1, 0.999))
        opt_d = torch.optim.Adam(D.parameters(), lr=self.learning_rate, betas=(self.beta1, 0.999))
        order = rng.child("batches").generator()
        n = x_all.shape[0]
        history = []
        torch.manual_seed(rng.child("train").torch_seed())
        for step in range(self.steps):
            idx = torch.from_numpy(
                order.choice(n, size=min(self.batch_size, n), replace=False)
            )
            x, codes, target = x_all[idx], codes_all[idx], target_all[idx]

            with torch.no_grad():
                fake = G(x, codes)
            d_loss = -adversarial_loss(D, x, target, fake)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            fake = G(x, codes)
            adv = -torch.log(D(x, fake).clamp(_EPS, 1.0 - _EPS)).mean()
            l1 = l1_loss(target, fake)
            content = (
                content_loss(x, fake, feat)
                if loss_cfg.content_weight != 0.0
                else torch.zeros(())
            )
            g_total = adv + loss_cfg.lambda_l1 * l1 + loss_cfg.content_weight * content
            if not torch.isfinite(g_total) or not torch.isfinite(d_loss):
                raise DivergenceError(
                    f"GAN training diverged at step {step}",
                    breakdown={
                        "d_loss": float(d_loss.detach()),
                        "adversarial": float(adv.detach()),
                        "l1": float(l1.detach()),
                        "content": float(content.detach()),
                        "history_rows": len(history),
                    },
                )
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()
            history.append(
                {
                    "step": step,
                    "d_loss": float(d_loss.detach()),
                    "g_adv": float(adv.detach()),
                    "g_l1": float(l1.detach()),
                    "g_content": float(content.detach()),
                    "g_total": float(g_total.detach()),
                }
            )

        G.eval()
        D.eval()
        self.generator_ = G
        self.discriminator_ = D
        self.loss_config_ = loss_cfg
        self.image_size_ = (h, w)
        self.code_dim_ = ae.code_dim
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "generator_"):
            raise NotFittedError("ConditionalGan is not fitted")

    # -- synthesis ----------------------------------------------------------

    def synthesize_batch(self, images: np.ndarray, codes: np.ndarray) -> np.ndarray:
        """Generator forward for (N, H, W) images and (N, code_dim) codes."""
        self._check_fitted()
        x = torch.from_numpy(np.asarray(images, dtype=np.float32)).unsqueeze(1)
        z = torch.from_numpy(np.asarray(codes, dtype=np.float32))
        with torch.no_grad():
            out = self.generator_(x, z)
        return out.squeeze(1).numpy().astype(np.float64)

    def save(self, path):
        self._check_fitted()
        tensors = {}
        tensors.update(ckpt.module_tensors(self.generator_, "G/"))
        tensors.update(ckpt.module_tensors(self.discriminator_, "D/"))
        return ckpt.save_checkpoint(
            path,
            kind="cgan",
            architecture={
                "channels": self.channels,
                "blocks": self.blocks,
                "z_channels": self.z_channels,
                "code_dim": self.code_dim_,
                "image_size": list(self.image_size_),
            },
            tensors=tensors,
            extra={"steps_trained": len(self.history_)},
        )

    @classmethod
    def load(cls, path) -> "ConditionalGan":
        data = ckpt.load_checkpoint(path)
        if data.kind != "cgan":
            raise DataError(f"{path} is a {data.kind!r} checkpoint")
        arch = data.architecture
        gan = cls(channels=arch["channels"], blocks=arch["blocks"], z_channels=arch["z_channels"])
        size = tuple(arch["image_size"])
        G = GeneratorNet(size, arch["code_dim"], arch["channels"], arch["blocks"], arch["z_channels"])
        D = DiscriminatorNet(arch["channels"])
        ckpt.load_module_tensors(G, data.tensors, "G/")
        ckpt.load_module_tensors(D, data.tensors, "D/")
        G.eval()
        D.eval()
        gan.generator_ = G
        gan.discriminator_ = D
        gan.image_size_ = size
        gan.code_dim_ = arch["code_dim"]
        gan.history_ = []
        gan.loss_config_ = GanLossConfig()
        return gan


def train_cgan(samples, ae, feat, config, rng: RngStream) -> ConditionalGan:
    """Train a ConditionalGan from an ExperimentConfig; returns the estimator."""
    samples = list(samples)
    batch = config.gan_batch or config.effective_batch_size
    gan = ConditionalGan(
        channels=config.gan_channels,
        blocks=config.gan_blocks,
        z_channels=config.z_channels,
        steps=config.gan_steps,
        batch_size=min(batch, config.gan_pairs_per_image * max(len(samples), 1)),
        lambda_l1=config.lambda_l1,
        content_weight=config.content_weight,
        learning_rate=config.gan_lr,
        beta1=config.gan_beta1,
        pairs_per_image=config.gan_pairs_per_image,
        random_state=rng.torch_seed() % (2**31),
    )
    return gan.fit(samples, ae, feat, config, rng)


def synthesize(
    gan: ConditionalGan,
    source: ImageSample,
    perturbed_mask,
    ae: MaskAutoencoder,
    spec=None,
    sample_id: str | None = None,
) -> ImageSample:
    """Generate one synthetic sample; label and lineage come from the source."""
    mask = np.asarray(perturbed_mask)
    if mask.shape != source.shape:
        raise DataError(
            f"perturbed mask shape {mask.shape} does not match source {source.shape}"
        )
    code = encode_mask(ae, mask)
    pixels = gan.synthesize_batch(source.pixels[None], code[None])[0]
    if sample_id is None:
        digest = hashlib.sha256(mask.tobytes() + source.id.encode()).hexdigest()[:12]
        sample_id = f"syn_{source.id}_{digest}"
    if spec is None:
        # empty composition: the perturbed mask was supplied externally
        spec = maskops.PerturbationSpec(steps=())
    return ImageSample(
        id=sample_id,
        pixels=np.clip(pixels, 0.0, 1.0),
        mask=mask.astype(np.uint8),
        label=source.label,
        provenance="synthetic",
        parent_id=source.id,
        perturbation=spec,
    )
