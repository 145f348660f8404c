"""Substrate inference and threshold calibration for a trained model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..grids import VolumeGrid
from ..simulate import stack_lesions
from .model import DlmModel, GAUSSIAN
from .training import TrainedDlm

CALIBRATION_GRID = tuple(round(0.01 * k, 2) for k in range(1, 100))


def substrate_moments(trained: TrainedDlm, n_samples: int = None,
                      generator: torch.Generator = None):
    """Monte Carlo prior means of the substrate read-out maps.

    Draws z from the standard-normal prior and averages the decoded
    maps. Returns (mean raw gamma map, mean scale map or None); the
    gaussian label model has both, the bernoulli one only the first.
    """
    cfg = trained.config
    if n_samples is None:
        n_samples = cfg.n_substrate_samples
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed + 0x5EED)
    model = trained.model
    model.eval()
    raw_sum = None
    sigma_sum = None
    with torch.no_grad():
        done = 0
        while done < n_samples:
            b = min(64, n_samples - done)
            z = torch.randn(b, cfg.latent_dim, generator=generator)
            maps = model.decode_substrate(z)
            raw = maps["gamma_mu"] if cfg.label_kind == GAUSSIAN else maps["gamma"]
            raw_sum = raw.sum(0) if raw_sum is None else raw_sum + raw.sum(0)
            if cfg.label_kind == GAUSSIAN:
                s = maps["gamma_sigma"].sum(0)
                sigma_sum = s if sigma_sum is None else sigma_sum + s
            done += b
    raw_mean = (raw_sum / n_samples).numpy().astype(np.float64)
    sigma_mean = None
    if sigma_sum is not None:
        sigma_mean = (sigma_sum / n_samples).numpy().astype(np.float64)
    return raw_mean, sigma_mean


def infer_substrate(trained: TrainedDlm, n_samples: int = None,
                    generator: torch.Generator = None) -> VolumeGrid:
    """Population substrate map: logistic of the prior-mean read-out."""
    raw_mean, _ = substrate_moments(trained, n_samples, generator)
    m = 1.0 / (1.0 + np.exp(-raw_mean))
    return VolumeGrid.real(m.astype(np.float32))


def quantile_binarize(volume, t: float) -> VolumeGrid:
    """Keep values strictly above the t-quantile cutoff.

    The cutoff is the k-th smallest value with k = floor(t * V), so for
    distinct values ceil((1 - t) V) voxels survive.
    """
    data = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume)
    if not (0.0 < t < 1.0):
        raise ValueError("quantile must lie strictly between 0 and 1")
    flat = np.sort(data.reshape(-1))
    k = int(math.floor(t * flat.size))
    if k < 1:
        k = 1
    cutoff = flat[k - 1]
    return VolumeGrid.binary((data > cutoff).astype(np.uint8))


@dataclass
class InferredSubstrate:
    """Thresholded substrate with the quantile that won calibration."""

    mean_map: VolumeGrid
    threshold: float
    mask: VolumeGrid
    calibration_loglik: float


def _binary_calibration_ll(mask: np.ndarray, bias: float,
                           X: np.ndarray, y: np.ndarray) -> float:
    logit = X @ mask.reshape(-1) + bias
    # log Bernoulli(y | logistic(logit)) in a softplus form
    ll = y * logit - np.logaddexp(0.0, logit)
    return float(ll.sum())


def _gaussian_calibration_ll(mask: np.ndarray, sigma_mean: np.ndarray,
                             sigma_floor: float,
                             X: np.ndarray, y: np.ndarray) -> float:
    m = mask.reshape(-1).astype(np.float64)
    mean = (X @ m) / m.sum()  # overlap fraction of the binarized substrate
    scale = np.maximum(X @ sigma_mean.reshape(-1), sigma_floor)
    ll = -0.5 * math.log(2.0 * math.pi) - np.log(scale) - 0.5 * ((y - mean) / scale) ** 2
    return float(ll.sum())


def calibrate_threshold(trained: TrainedDlm, lesions, labels,
                        mean_map: VolumeGrid = None,
                        generator: torch.Generator = None) -> InferredSubstrate:
    """Pick the binarization quantile by held-out label likelihood.

    Scans t = 0.01 .. 0.99; each candidate mask replaces the read-out
    map in the label model (with the trained bias, or the trained scale
    map for gaussian labels, where the mask is normalized so the mean
    read-out is the overlap fraction) and the t with the best
    calibration log-likelihood wins. Ties go to the smaller t.
    """
    cfg = trained.config
    raw_mean, sigma_mean = substrate_moments(trained, generator=generator)
    if mean_map is None:
        m = 1.0 / (1.0 + np.exp(-raw_mean))
        mean_map = VolumeGrid.real(m.astype(np.float32))
    X = stack_lesions(lesions).reshape(len(lesions), -1).astype(np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if cfg.label_kind == GAUSSIAN:
        score = lambda mask: _gaussian_calibration_ll(
            mask, sigma_mean, cfg.sigma_floor, X, y)
    else:
        bias = float(trained.model.label_bias.detach())
        score = lambda mask: _binary_calibration_ll(mask, bias, X, y)
    best = None
    for t in CALIBRATION_GRID:
        mask = quantile_binarize(mean_map, t)
        md = mask.data.astype(np.float64)
        if not md.any():
            continue  # heavy ties can empty a mask; not a candidate
        ll = score(md)
        if best is None or ll > best[0]:
            best = (ll, t, mask)
    if best is None:
        raise ValueError("no quantile produced a non-empty mask")
    ll, t, mask = best
    return InferredSubstrate(mean_map=mean_map, threshold=t, mask=mask,
                             calibration_loglik=ll)


def reconstruct(trained: TrainedDlm, lesions, labels):
    """Per-voxel lesion probabilities decoded at z = mu.

    A single grid in gives a single probability grid back; a list gives
    a list.
    """
    single = isinstance(lesions, VolumeGrid)
    if single:
        lesions = [lesions]
        labels = [labels]
    x = torch.from_numpy(stack_lesions(lesions).astype(np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.float32))
    model = trained.model
    model.eval()
    with torch.no_grad():
        mu, _ = model.encode(x, y)
        probs = torch.sigmoid(model.decode_lesion(mu)).numpy()
    grids = [VolumeGrid.real(p.astype(np.float32)) for p in probs]
    return grids[0] if single else grids
