"""Latent-substrate model: configuration and networks.

A convolutional variational autoencoder over the joint distribution of
lesions and deficit labels. The encoder maps (lesion, label plane,
coordinate channels) to a Gaussian posterior over a latent code; one
decoder reconstructs the lesion as per-voxel Bernoulli logits, the
other emits the substrate read-out map gamma whose inner product with
the lesion drives the label likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from ..grids import make_coordinate_field

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"

FULL = "full"
LABELS_ONLY = "labels_only"
VARIATIONAL = "variational"
DETERMINISTIC = "deterministic"


def _default_levels(dims) -> int:
    # deepest halving every axis supports
    levels = min(int(d & -d).bit_length() - 1 for d in dims)
    return max(levels, 1)


@dataclass
class DlmConfig:
    """Hyperparameters of the latent-substrate model.

    ``levels`` counts halvings in the encoder (None picks the deepest
    each axis allows). ``elbo_terms`` drops the lesion reconstruction
    term when "labels_only"; ``latent_mode`` "deterministic" uses z = mu
    and drops the KL term. ``sigma_floor`` bounds the label scale of the
    gaussian read-out from below. ``kl_warmup_epochs`` > 0 ramps the KL
    weight linearly from 0 to 1 over that many epochs, which keeps the
    posterior informative early so reconstruction structure can form
    before validation-based stopping freezes a snapshot.
    """

    dims: tuple
    label_kind: str = BERNOULLI
    latent_dim: int = 32
    base_channels: int = 8
    levels: int = None
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    l2_weight: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    early_stop_patience: int = 20
    kl_warmup_epochs: int = 0
    elbo_terms: str = FULL
    latent_mode: str = VARIATIONAL
    n_substrate_samples: int = 64
    sigma_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.dims) not in (2, 3):
            raise ValueError("dims must have 2 or 3 axes")
        if self.levels is None:
            self.levels = _default_levels(self.dims)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        for d in self.dims:
            if d % (1 << self.levels) != 0:
                raise ValueError(
                    f"axis {d} not divisible by 2^{self.levels}; lower `levels`")
        if self.label_kind not in (BERNOULLI, GAUSSIAN):
            raise ValueError(f"unknown label_kind {self.label_kind!r}")
        if self.elbo_terms not in (FULL, LABELS_ONLY):
            raise ValueError(f"unknown elbo_terms {self.elbo_terms!r}")
        if self.latent_mode not in (VARIATIONAL, DETERMINISTIC):
            raise ValueError(f"unknown latent_mode {self.latent_mode!r}")
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ValueError("latent_dim and base_channels must be positive")
        if self.batch_size < 8:
            raise ValueError("batch_size must be >= 8 for stable batch norm")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")
        if self.lr <= 0 or self.l2_weight < 0:
            raise ValueError("bad optimizer settings")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")
        if self.n_substrate_samples < 1:
            raise ValueError("n_substrate_samples must be >= 1")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def bottom_dims(self) -> tuple:
        return tuple(d >> self.levels for d in self.dims)

    def channels(self) -> list:
        return [self.base_channels << l for l in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DlmConfig":
        return cls(**d)


_CONV = {2: nn.Conv2d, 3: nn.Conv3d}
_BN = {2: nn.BatchNorm2d, 3: nn.BatchNorm3d}
_POOL = {2: nn.AvgPool2d, 3: nn.AvgPool3d}


def _conv_block(ndim: int, c_in: int, c_out: int) -> nn.Sequential:
    # no conv bias: batch norm's mean subtraction would cancel it anyway
    return nn.Sequential(
        _CONV[ndim](c_in, c_out, kernel_size=3, stride=1, padding=1, bias=False),
        _BN[ndim](c_out),
        nn.GELU(),
    )


class Encoder(nn.Module):
    """Conv-BN-GELU-AvgPool stack, then FC heads for mu and log sigma."""

    def __init__(self, cfg: DlmConfig, in_channels: int):
        super().__init__()
        chans = cfg.channels()
        layers = []
        c_prev = in_channels
        for c in chans:
            layers.append(_conv_block(cfg.ndim, c_prev, c))
            layers.append(_POOL[cfg.ndim](2))
            c_prev = c
        self.trunk = nn.Sequential(*layers)
        flat = c_prev * int(np.prod(cfg.bottom_dims))
        self.mu_head = nn.Linear(flat, cfg.latent_dim)
        self.log_sigma_head = nn.Linear(flat, cfg.latent_dim)

    def forward(self, h):
        h = self.trunk(h).flatten(1)
        return self.mu_head(h), self.log_sigma_head(h)


class Decoder(nn.Module):
    """FC from the latent, then nearest-upsample + Conv-BN-GELU mirror."""

    def __init__(self, cfg: DlmConfig, out_channels: int):
        super().__init__()
        chans = cfg.channels()
        c_top = chans[-1]
        self.bottom_dims = cfg.bottom_dims
        self.c_top = c_top
        self.fc = nn.Linear(cfg.latent_dim, c_top * int(np.prod(cfg.bottom_dims)))
        blocks = []
        c_prev = c_top
        for c in reversed(chans):
            blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                _conv_block(cfg.ndim, c_prev, c),
            ))
            c_prev = c
        self.blocks = nn.Sequential(*blocks)
        self.head = _CONV[cfg.ndim](c_prev, out_channels, kernel_size=3, padding=1)

    def forward(self, z):
        h = self.fc(z).reshape(z.shape[0], self.c_top, *self.bottom_dims)
        h = self.blocks(h)
        return self.head(h)


class DlmModel(nn.Module):
    """Encoder plus lesion and substrate decoders on a fixed grid.

    Inputs are assembled as channels: the lesion, a constant plane
    holding the label value, and one normalized coordinate channel per
    axis, so every convolution sees where it is on the grid.
    """

    def __init__(self, cfg: DlmConfig):
        super().__init__()
        self.cfg = cfg
        coords = make_coordinate_field(cfg.dims).channels
        self.register_buffer("coords", torch.from_numpy(coords.copy()))
        in_channels = 2 + cfg.ndim
        self.encoder = Encoder(cfg, in_channels)
        self.lesion_decoder = Decoder(cfg, 1)
        out = 2 if cfg.label_kind == GAUSSIAN else 1
        self.substrate_decoder = Decoder(cfg, out)
        if cfg.label_kind == BERNOULLI:
            self.label_bias = nn.Parameter(torch.zeros(()))

    def assemble_input(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        lesion = x.unsqueeze(1)
        label_plane = y.reshape(b, *([1] * (x.ndim))).expand(b, 1, *self.cfg.dims)
        coords = self.coords.unsqueeze(0).expand(b, *self.coords.shape)
        return torch.cat([lesion, label_plane.to(x.dtype), coords.to(x.dtype)], dim=1)

    def encode(self, x: torch.Tensor, y: torch.Tensor):
        """Posterior moments (mu, sigma) for a batch of (lesion, label)."""
        mu, log_sigma = self.encoder(self.assemble_input(x, y))
        return mu, torch.exp(log_sigma.clamp(-8.0, 8.0))

    def decode_lesion(self, z: torch.Tensor) -> torch.Tensor:
        """Per-voxel Bernoulli logits, shaped (batch, *dims)."""
        return self.lesion_decoder(z).squeeze(1)

    def decode_substrate(self, z: torch.Tensor) -> dict:
        """Read-out maps: {"gamma": ...} or {"gamma_mu": ..., "gamma_sigma": ...}.

        The gaussian scale map passes through softplus so inner products
        with a lesion stay positive.
        """
        out = self.substrate_decoder(z)
        if self.cfg.label_kind == GAUSSIAN:
            return {
                "gamma_mu": out[:, 0],
                "gamma_sigma": nn.functional.softplus(out[:, 1]),
            }
        return {"gamma": out[:, 0]}


def build_network(cfg: DlmConfig) -> DlmModel:
    """Freshly initialized model; weights depend only on cfg.seed."""
    torch.manual_seed(cfg.seed)
    return DlmModel(cfg)
