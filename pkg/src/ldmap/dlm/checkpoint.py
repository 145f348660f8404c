"""Checkpointing for trained models (config + weights + training log)."""

from __future__ import annotations

import torch

from .model import DlmConfig, build_network
from .training import EpochRecord, TrainedDlm


def save_checkpoint(trained: TrainedDlm, path) -> None:
    torch.save({
        "format": "ldmap-dlm-1",
        "config": trained.config.to_dict(),
        "state_dict": trained.model.state_dict(),
        "log": [r.to_dict() for r in trained.log],
        "best_epoch": trained.best_epoch,
        "best_val_label_loglik": trained.best_val_label_loglik,
    }, path)


def load_checkpoint(path) -> TrainedDlm:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "ldmap-dlm-1":
        raise ValueError(f"not a model checkpoint: {path}")
    config = DlmConfig.from_dict(blob["config"])
    model = build_network(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    log = [EpochRecord(**r) for r in blob["log"]]
    return TrainedDlm(model=model, config=config, log=log,
                      best_epoch=blob["best_epoch"],
                      best_val_label_loglik=blob["best_val_label_loglik"])
