"""Training loop with validation-based early stopping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from ..simulate import Dataset
from .model import BERNOULLI, DlmConfig, DlmModel, build_network
from .objective import label_loglik, negative_elbo

MIN_BATCH = 8


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    label_loglik: float
    lesion_loglik: float = None
    kl: float = None
    val_label_loglik: float = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "label_loglik": self.label_loglik,
            "lesion_loglik": self.lesion_loglik,
            "kl": self.kl,
            "val_label_loglik": self.val_label_loglik,
        }


@dataclass
class TrainedDlm:
    """A trained model restored to its best validation snapshot."""

    model: DlmModel
    config: DlmConfig
    log: list
    best_epoch: int
    best_val_label_loglik: float


def _tensors(dataset: Dataset):
    x = torch.from_numpy(dataset.lesion_stack().astype(np.float32))
    y = torch.from_numpy(np.asarray(dataset.labels, dtype=np.float32))
    return x, y


def _val_label_loglik(model: DlmModel, x: torch.Tensor, y: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        mu, _ = model.encode(x, y)
        ll = label_loglik(model, x, mu, y)
    model.train()
    return float(ll.mean())


def train(dataset: Dataset, config: DlmConfig, model: DlmModel = None) -> TrainedDlm:
    """Fit the model with Adam; stop when validation stalls.

    Uses the dataset's train/val splits. The monitored quantity is the
    mean validation label log-likelihood at z = mu; training stops after
    ``early_stop_patience`` epochs without a new best and the best
    snapshot is restored. Trailing mini-batches below 8 samples are
    folded away to keep batch norm meaningful.
    """
    if dataset.dims != config.dims:
        raise ValueError(f"dataset dims {dataset.dims} != config dims {config.dims}")
    if config.label_kind == BERNOULLI and not np.isin(dataset.labels, (0.0, 1.0)).all():
        raise ValueError("bernoulli label model needs 0/1 labels")
    if model is None:
        model = build_network(config)
    model.train()

    x_all, y_all = _tensors(dataset)
    tr = np.asarray(dataset.splits["train"])
    va = np.asarray(dataset.splits["val"])
    if len(tr) < MIN_BATCH:
        raise ValueError(f"need at least {MIN_BATCH} training samples")
    x_tr, y_tr = x_all[tr], y_all[tr]
    x_va, y_va = x_all[va], y_all[va]

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr,
                           betas=config.adam_betas, weight_decay=config.l2_weight)

    log = []
    best_val = -np.inf
    best_epoch = -1
    best_state = None
    n = len(tr)
    bs = min(config.batch_size, n)
    warm = config.kl_warmup_epochs
    for epoch in range(config.max_epochs):
        kl_scale = min(1.0, (epoch + 1) / warm) if warm > 0 else 1.0
        perm = torch.randperm(n, generator=gen)
        sums = {}
        loss_sum = 0.0
        seen = 0
        start = 0
        while start < n:
            idx = perm[start:start + bs]
            start += bs
            if len(idx) < MIN_BATCH:
                break  # drop a stump batch; batch norm needs spread
            xb, yb = x_tr[idx], y_tr[idx]
            eps = torch.randn(len(idx), config.latent_dim, generator=gen)
            loss, means = negative_elbo(model, xb, yb, eps, kl_scale=kl_scale)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}: {means}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            seen += len(idx)
            for k, v in means.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        val_ll = _val_label_loglik(model, x_va, y_va)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            label_loglik=sums["label_loglik"] / seen,
            lesion_loglik=sums["lesion_loglik"] / seen if "lesion_loglik" in sums else None,
            kl=sums["kl"] / seen if "kl" in sums else None,
            val_label_loglik=val_ll,
        )
        log.append(rec)
        if val_ll > best_val:
            best_val = val_ll
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.early_stop_patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainedDlm(model=model, config=config, log=log,
                      best_epoch=best_epoch, best_val_label_loglik=best_val)
