"""Training objectives and their composition."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Sequence

import torch
import torch.nn.functional as F

from visa.dlfm import cosine_sim
from visa.etgm import RoutingResult, load_balance_loss

ORTHO_TARGETS = ("global", "global+queries")


class DegenerateBatchError(ValueError):
    """An anchor has no positive or no negative in the batch."""


@dataclass
class LossConfig:
    margin: float = 0.3
    label_smoothing: float = 0.1
    lambda_balance: float = 0.001
    ortho_targets: str = "global"
    triplet_normalize: bool = True

    def __post_init__(self) -> None:
        if self.ortho_targets not in ORTHO_TARGETS:
            raise ValueError(f"ortho_targets must be one of {ORTHO_TARGETS}")


@dataclass
class LossBreakdown:
    id_global: torch.Tensor
    tri_global: torch.Tensor
    id_local: torch.Tensor
    tri_local: torch.Tensor
    view: torch.Tensor
    ortho: torch.Tensor
    balance: torch.Tensor
    total: torch.Tensor
    lam: float

    COMPONENTS = ("id_global", "tri_global", "id_local", "tri_local", "view", "ortho", "balance")

    def as_floats(self) -> Dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        out["lambda"] = out.pop("lam")
        return out


def id_loss(logits: torch.Tensor, labels: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean (label-smoothed) cross-entropy of classifier logits ``[B, C]``."""
    c = logits.shape[-1]
    if (labels < 0).any() or (labels >= c).any():
        raise ValueError(f"labels must lie in [0, {c})")
    return F.cross_entropy(logits, labels.long(), label_smoothing=label_smoothing)


def pairwise_sq_dist(x: torch.Tensor) -> torch.Tensor:
    diff = x[:, None, :] - x[None, :, :]
    return (diff**2).sum(dim=-1)


def triplet_loss(
    features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3, normalize: bool = False
) -> torch.Tensor:
    """Batch-hard triplet loss on squared Euclidean distances.

    With ``normalize`` the features are L2-normalised first, which bounds the
    distances to [0, 4]; unnormalised squared distances diverge under SGD.
    """
    if normalize:
        features = F.normalize(features, dim=-1)
    dist = pairwise_sq_dist(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(dim=1).all() or not neg_mask.any(dim=1).all():
        raise DegenerateBatchError("every anchor needs at least one positive and one negative")
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def view_loss(view_logits: torch.Tensor, view_labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of aerial-vs-ground logits ``[B]`` (1 = aerial)."""
    return F.binary_cross_entropy_with_logits(view_logits, view_labels.to(view_logits.dtype))


def ortho_loss(f_inv: torch.Tensor, f_spe: torch.Tensor) -> torch.Tensor:
    """Mean absolute cosine between paired rows; zero-norm rows count as orthogonal."""
    return cosine_sim(f_inv, f_spe).abs().mean()


def balance_loss(routings: Sequence[RoutingResult]) -> torch.Tensor:
    return torch.stack([load_balance_loss(r) for r in routings]).mean()


def total_loss(outputs, labels: torch.Tensor, view_labels: torch.Tensor, cfg: LossConfig) -> LossBreakdown:
    """Compose every objective from a model output.

    ``outputs`` needs ``z_inv``, ``z_spe``, ``global_logits``, ``f_local``,
    ``local_logits``, ``view_logits``, ``routings`` and ``queries``. Heads
    that an ablation removed are ``None`` and contribute zero.
    """
    zero = outputs.z_inv.new_zeros(())
    eps = cfg.label_smoothing

    id_g = id_loss(outputs.global_logits, labels, eps)
    tri_g = triplet_loss(outputs.z_inv, labels, cfg.margin, cfg.triplet_normalize)

    if outputs.f_local is not None:
        id_l = id_loss(outputs.local_logits, labels, eps)
        tri_l = triplet_loss(outputs.f_local, labels, cfg.margin, cfg.triplet_normalize)
    else:
        id_l = tri_l = zero

    if outputs.view_logits is not None:
        v = view_loss(outputs.view_logits, view_labels)
        o = ortho_loss(outputs.z_inv, outputs.z_spe)
        if cfg.ortho_targets == "global+queries" and outputs.queries is not None:
            o = o + ortho_loss(outputs.queries.q_inv.mean(1), outputs.queries.q_spe.mean(1))
    else:
        v = o = zero

    bal = balance_loss(outputs.routings) if outputs.routings else zero
    lam = cfg.lambda_balance
    total = id_g + tri_g + id_l + tri_l + o + v + lam * bal
    return LossBreakdown(
        id_global=id_g,
        tri_global=tri_g,
        id_local=id_l,
        tri_local=tri_l,
        view=v,
        ortho=o,
        balance=bal,
        total=total,
        lam=lam,
    )
