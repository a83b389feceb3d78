"""Loss terms for the normality / anomaly objectives and the discriminator.

All functions take and return torch tensors so they stay differentiable; the
composite functions also accept plain floats.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

PROB_EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_con: float = 50.0
    lambda_adcon: float = 15.0
    lambda_lat: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Per-term scalars of one optimizer step.

    The unsuffixed terms come from the normal sub-batch, ``*_anom`` from the
    true-anomaly sub-batch. Absent sub-batches leave their terms at 0.
    """

    l_adv: float = 0.0
    l_con: float = 0.0
    l_adcon: float = 0.0
    l_lat: float = 0.0
    l_adv_anom: float = 0.0
    l_adcon_anom: float = 0.0
    l_lat_anom: float = 0.0
    l_normality: float = 0.0
    l_anomaly: float = 0.0
    l_total: float = 0.0
    l_disc: float = 0.0
    n_normal: int = 0
    n_anomaly: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        out = {}
        for f in fields(cls):
            vals = [getattr(b, f.name) for b in items]
            out[f.name] = sum(vals) if f.name.startswith("n_") else sum(vals) / len(vals)
        return cls(**out)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        raise LossError("empty batch")


def adversarial_loss(pred: torch.Tensor, target: float) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities against a constant 0/1 target."""
    if pred.numel() == 0:
        raise LossError("empty batch")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    if target == 1:
        return -torch.log(p).mean()
    if target == 0:
        return -torch.log1p(-p).mean()
    raise LossError(f"target must be 0 or 1, got {target}")


def contextual_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_pair(x, x_hat)
    return (x - x_hat).abs().mean()


def latent_loss(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    _check_pair(z, z_hat)
    return (z - z_hat).pow(2).mean()


def contextual_adversarial_loss(x_hat: torch.Tensor, x_hat_prime: torch.Tensor) -> torch.Tensor:
    """Negated mean absolute error between a reconstruction and its re-reconstruction."""
    _check_pair(x_hat, x_hat_prime)
    return -(x_hat - x_hat_prime).abs().mean()


def normality_loss(l_adv, l_con, l_adcon, l_lat, weights: LossWeights = LossWeights()):
    return (
        weights.lambda_adv * l_adv
        + weights.lambda_con * l_con
        + weights.lambda_adcon * l_adcon
        + weights.lambda_lat * l_lat
    )


def anomaly_loss(l_adv_anom, l_adcon, l_lat, weights: LossWeights = LossWeights(), eps: float = 1e-8):
    """Reciprocal objective for true anomalies.

    ``l_adcon`` is non-positive, so its term divides by ``-l_adcon``. Pass
    ``l_adcon=None`` to drop that term entirely.
    """
    out = weights.lambda_adv / (l_adv_anom + eps) + weights.lambda_lat / (l_lat + eps)
    if l_adcon is not None:
        out = out + weights.lambda_adcon / (-l_adcon + eps)
    return out


def final_loss(l_normality=None, l_anomaly=None):
    """Label-gated total: the normal sub-batch contributes its normality loss,
    the anomalous one its anomaly loss. ``None`` marks an empty subset."""
    if l_normality is None and l_anomaly is None:
        raise LossError("both sub-batches are empty")
    return (0.0 if l_normality is None else l_normality) + (0.0 if l_anomaly is None else l_anomaly)


def discriminator_loss(y_real=None, y_fake=None, y_true_anomaly=None) -> torch.Tensor:
    """BCE(D(x), 1) + BCE(D(x_hat), 0) on normals plus BCE(D(x_a), 0) on true anomalies."""
    terms = []
    if y_real is not None:
        terms.append(adversarial_loss(y_real, 1))
    if y_fake is not None:
        terms.append(adversarial_loss(y_fake, 0))
    if y_true_anomaly is not None:
        terms.append(adversarial_loss(y_true_anomaly, 0))
    if not terms:
        raise LossError("no discriminator inputs given")
    return sum(terms)
