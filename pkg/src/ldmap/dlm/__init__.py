"""Deep latent-substrate lesion-deficit model."""

from .model import (BERNOULLI, DETERMINISTIC, FULL, GAUSSIAN, LABELS_ONLY,
                    VARIATIONAL, DlmConfig, DlmModel, build_network)
from .objective import (elbo_parts, kl_to_standard_normal, label_loglik,
                        lesion_loglik, negative_elbo, reparameterize)
from .training import EpochRecord, TrainedDlm, train
from .inference import (InferredSubstrate, calibrate_threshold,
                        infer_substrate, quantile_binarize, reconstruct,
                        substrate_moments)
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import directional_gradient_errors

__all__ = [
    "BERNOULLI", "GAUSSIAN", "FULL", "LABELS_ONLY", "VARIATIONAL",
    "DETERMINISTIC", "DlmConfig", "DlmModel", "build_network",
    "reparameterize", "kl_to_standard_normal", "label_loglik",
    "lesion_loglik", "elbo_parts", "negative_elbo",
    "EpochRecord", "TrainedDlm", "train",
    "InferredSubstrate", "substrate_moments", "infer_substrate",
    "quantile_binarize", "calibrate_threshold", "reconstruct",
    "save_checkpoint", "load_checkpoint",
    "directional_gradient_errors",
]
