"""Torch network definitions shared by the GAN, classifier and segmenter.

Construction is wrapped in :func:`with_torch_seed` so identical seeds give
bit-identical initial parameters without disturbing the caller's global RNG
state. Dropout used for Monte-Carlo sampling is the explicit
:func:`seeded_dropout`, driven by a ``torch.Generator`` rather than the
global stream, so inference-time sampling is replayable.
"""

from __future__ import annotations

import contextlib

import torch
import torch.nn as nn
import torch.nn.functional as F


@contextlib.contextmanager
def with_torch_seed(seed: int):
    """Run a block under a forked, seeded global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def seeded_dropout(x: torch.Tensor, p: float, generator: torch.Generator | None):
    """Inverted dropout with an explicit generator; identity when p <= 0."""
    if p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, device=x.device) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions at constant width with batch norm and ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(x + h)


class GeneratorNet(nn.Module):
    """Residual-trunk image-to-image generator conditioned on a mask code.

    The latent code is linearly projected into the image plane and enters as
    extra input channels before the first residual block. Output is squashed
    to [0, 1].
    """

    def __init__(
        self,
        image_size: tuple[int, int],
        code_dim: int,
        channels: int = 64,
        blocks: int = 6,
        z_channels: int = 1,
    ):
        super().__init__()
        h, w = image_size
        self.image_size = (h, w)
        self.code_dim = code_dim
        self.z_channels = z_channels
        self.project = nn.Linear(code_dim, z_channels * h * w)
        self.head = nn.Conv2d(1 + z_channels, channels, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(channels) for _ in range(blocks))
        self.post = nn.Conv2d(channels, channels, 3, padding=1)
        self.post_bn = nn.BatchNorm2d(channels)
        self.tail = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, image: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        n, _, h, w = image.shape
        zmap = self.project(code).view(n, self.z_channels, h, w)
        feat = F.relu(self.head(torch.cat([image, zmap], dim=1)))
        trunk = feat
        for block in self.blocks:
            trunk = block(trunk)
        trunk = self.post_bn(self.post(trunk)) + feat  # global skip
        return torch.sigmoid(self.tail(trunk))


class DiscriminatorNet(nn.Module):
    """Eight-convolution discriminator on (condition, candidate) pairs.

    Widths double from ``channels`` to ``8 * channels`` and the spatial size
    halves at every doubling; two dense layers and a sigmoid produce a
    probability.
    """

    def __init__(self, channels: int = 64, dense_width: int | None = None):
        super().__init__()
        c = channels
        plan = [  # (out_channels, stride)
            (c, 1),
            (c, 2),
            (2 * c, 2),
            (2 * c, 1),
            (4 * c, 2),
            (4 * c, 1),
            (8 * c, 2),
            (8 * c, 1),
        ]
        layers = []
        in_ch = 2
        for out_ch, stride in plan:
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1))
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        dense_width = dense_width or 4 * c
        self.dense1 = nn.Linear(8 * c * 16, dense_width)
        self.dense2 = nn.Linear(dense_width, 1)

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        h = torch.cat([condition, candidate], dim=1)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        h = self.pool(h).flatten(1)
        h = F.leaky_relu(self.dense1(h), 0.2)
        return torch.sigmoid(self.dense2(h)).squeeze(1)


class MaskAENet(nn.Module):
    """Convolutional autoencoder producing a compact code for binary masks."""

    def __init__(self, image_size: tuple[int, int], code_dim: int, channels: int = 8):
        super().__init__()
        h, w = image_size
        if h % 8 or w % 8:
            raise ValueError(f"image size {image_size} must be divisible by 8")
        c = channels
        self.enc = nn.Sequential(
            nn.Conv2d(1, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.flat_dim = 4 * c * (h // 8) * (w // 8)
        self.bottom_shape = (4 * c, h // 8, w // 8)
        self.to_code = nn.Linear(self.flat_dim, code_dim)
        self.from_code = nn.Linear(code_dim, self.flat_dim)
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c, 1, 4, stride=2, padding=1),
        )

    def encode(self, masks: torch.Tensor) -> torch.Tensor:
        return self.to_code(self.enc(masks).flatten(1))

    def decode_logits(self, codes: torch.Tensor) -> torch.Tensor:
        h = self.from_code(codes).view(-1, *self.bottom_shape)
        return self.dec(h)

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(codes))

    def forward(self, masks):
        return self.decode(self.encode(masks))


class BackboneNet(nn.Module):
    """Small convolutional feature net; the desk-scale pretrained backbone.

    ``feature_maps`` exposes the final convolution's maps (the designated
    embedding layer); ``features`` pools them with both global mean and
    global max, since the discriminative findings are small and local and
    average pooling alone washes them out.
    """

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.conv1 = nn.Conv2d(1, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.feature_dim = 8 * c

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        # leaky activations: small nets die in zero-gradient basins otherwise
        h = F.leaky_relu(self.conv1(x), 0.1)
        h = F.leaky_relu(self.conv2(h), 0.1)
        return F.leaky_relu(self.conv3(h), 0.1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        maps = self.feature_maps(x)
        return torch.cat([maps.mean(dim=(2, 3)), maps.amax(dim=(2, 3))], dim=1)


class ClassifierHead(nn.Module):
    """Final classification layer plus log-variance head over a feature vector."""

    def __init__(self, feature_dim: int, dropout_rate: float = 0.5):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.logit = nn.Linear(feature_dim, 1)
        self.logvar = nn.Linear(feature_dim, 1)
        nn.init.constant_(self.logvar.bias, -3.0)  # start near-deterministic

    def forward(
        self,
        features: torch.Tensor,
        sample_dropout: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = features
        if sample_dropout:
            h = seeded_dropout(h, self.dropout_rate, generator)
        return self.logit(h).squeeze(1), self.logvar(h).squeeze(1)


class UNetNet(nn.Module):
    """Two-level U-Net with decoder dropout and per-pixel logit/logvar heads."""

    def __init__(self, channels: int = 8, dropout_rate: float = 0.5):
        super().__init__()
        c = channels
        self.dropout_rate = dropout_rate
        self.enc1 = self._block(1, c)
        self.enc2 = self._block(c, 2 * c)
        self.bottom = self._block(2 * c, 4 * c)
        self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2)
        self.dec2 = self._block(4 * c, 2 * c)
        self.up1 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.dec1 = self._block(2 * c, c)
        self.head_logit = nn.Conv2d(c, 1, 1)
        self.head_logvar = nn.Conv2d(c, 1, 1)
        nn.init.constant_(self.head_logvar.bias, -3.0)

    @staticmethod
    def _block(in_ch, out_ch):
        return nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.ReLU(),
        )

    def forward(
        self,
        x: torch.Tensor,
        sample_dropout: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottom(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        if sample_dropout:
            d2 = seeded_dropout(d2, self.dropout_rate, generator)
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        if sample_dropout:
            d1 = seeded_dropout(d1, self.dropout_rate, generator)
        return self.head_logit(d1).squeeze(1), self.head_logvar(d1).squeeze(1)
