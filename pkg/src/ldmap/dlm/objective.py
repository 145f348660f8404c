"""Evidence lower bound for the latent-substrate model."""

from __future__ import annotations

import math

import torch
from torch.nn import functional as F

from .model import DlmModel, FULL, GAUSSIAN, VARIATIONAL

_LOG_2PI = math.log(2.0 * math.pi)


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + sigma * eps


def kl_to_standard_normal(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, diag sigma^2) || N(0, I)), summed over the latent."""
    return (0.5 * (mu ** 2 + sigma ** 2 - 1.0) - torch.log(sigma)).sum(dim=1)


def _inner(x: torch.Tensor, volume: torch.Tensor) -> torch.Tensor:
    return (x * volume).flatten(1).sum(dim=1)


def label_loglik(model: DlmModel, x: torch.Tensor, z: torch.Tensor,
                 y: torch.Tensor) -> torch.Tensor:
    """Per-sample log-likelihood of the label given lesion and latent.

    The read-out is the inner product of the lesion with the decoded
    substrate map: Bernoulli labels add a learned bias and go through a
    logistic; gaussian labels get a second inner product for the scale,
    floored at cfg.sigma_floor.
    """
    maps = model.decode_substrate(z)
    if model.cfg.label_kind == GAUSSIAN:
        mean = _inner(x, maps["gamma_mu"])
        scale = _inner(x, maps["gamma_sigma"]).clamp(min=model.cfg.sigma_floor)
        return -0.5 * _LOG_2PI - torch.log(scale) - 0.5 * ((y - mean) / scale) ** 2
    logit = _inner(x, maps["gamma"]) + model.label_bias
    return y * logit - F.softplus(logit)


def lesion_loglik(model: DlmModel, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Per-sample Bernoulli log-likelihood of the lesion, summed over voxels."""
    logits = model.decode_lesion(z)
    return (x * logits - F.softplus(logits)).flatten(1).sum(dim=1)


def elbo_parts(model: DlmModel, x: torch.Tensor, y: torch.Tensor,
               eps: torch.Tensor = None) -> dict:
    """Per-sample ELBO terms under the model's configuration.

    Single-sample latent estimate: z = mu + sigma * eps, or z = mu in
    deterministic mode (where the KL term is dropped). The lesion term
    is dropped under "labels_only". Dropped terms are absent from the
    result.
    """
    cfg = model.cfg
    mu, sigma = model.encode(x, y)
    parts = {}
    if cfg.latent_mode == VARIATIONAL:
        if eps is None:
            eps = torch.randn_like(mu)
        z = reparameterize(mu, sigma, eps)
        parts["kl"] = kl_to_standard_normal(mu, sigma)
    else:
        z = mu
    parts["label_loglik"] = label_loglik(model, x, z, y)
    if cfg.elbo_terms == FULL:
        parts["lesion_loglik"] = lesion_loglik(model, x, z)
    return parts


def negative_elbo(model: DlmModel, x: torch.Tensor, y: torch.Tensor,
                  eps: torch.Tensor = None, kl_scale: float = 1.0):
    """(loss, floats): batch-mean negative ELBO and its term means.

    ``kl_scale`` < 1 down-weights the KL term (warmup annealing); the
    returned term means are always unscaled.
    """
    parts = elbo_parts(model, x, y, eps)
    obj = parts["label_loglik"]
    if "lesion_loglik" in parts:
        obj = obj + parts["lesion_loglik"]
    if "kl" in parts:
        obj = obj - kl_scale * parts["kl"]
    loss = -obj.mean()
    means = {k: float(v.mean().detach()) for k, v in parts.items()}
    return loss, means
