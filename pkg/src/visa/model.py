"""Full network: view-decoupled encoder, expert query generation, local fusion and heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from visa.dlfm import DLFM, DLFMConfig
from visa.encoder import EncoderConfig, EncoderOutput, ViewDecoupledEncoder
from visa.etgm import ETGM, ETGMConfig, QuerySet, RoutingResult


@dataclass
class AblationConfig:
    use_vab: bool = True
    use_etgm: bool = True
    use_dlfm: bool = True


@dataclass
class ModelOutput:
    z_inv: torch.Tensor
    z_spe: torch.Tensor
    global_logits: torch.Tensor
    f_local: Optional[torch.Tensor] = None
    local_logits: Optional[torch.Tensor] = None
    view_logits: Optional[torch.Tensor] = None
    queries: Optional[QuerySet] = None
    routings: Tuple[RoutingResult, ...] = field(default_factory=tuple)
    encoder: Optional[EncoderOutput] = field(default=None, repr=False)


class BNNeckHead(nn.Module):
    """Batch-norm bottleneck followed by a bias-free linear classifier."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.bn.bias.requires_grad_(False)
        self.classifier = nn.Linear(dim, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.bn(x))


class ViSA(nn.Module):
    def __init__(
        self,
        num_classes: int,
        encoder: EncoderConfig,
        etgm: ETGMConfig,
        dlfm: DLFMConfig,
        ablation: AblationConfig,
    ):
        super().__init__()
        encoder.use_vab = ablation.use_vab
        self.ablation = ablation
        self.encoder = ViewDecoupledEncoder(encoder)
        dim = encoder.dim
        m = etgm.tokens_per_expert
        self.top_k = etgm.top_k
        self.neighbors = dlfm.neighbors

        self.has_local = ablation.use_etgm or ablation.use_dlfm
        if ablation.use_etgm:
            self.etgm = ETGM(dim, etgm)
        elif self.has_local:
            self.fixed_q_inv = nn.Parameter(torch.zeros(m, dim))
            self.fixed_q_spe = nn.Parameter(torch.zeros(m, dim))
            nn.init.trunc_normal_(self.fixed_q_inv, std=0.02, a=-0.04, b=0.04)
            nn.init.trunc_normal_(self.fixed_q_spe, std=0.02, a=-0.04, b=0.04)
        if ablation.use_dlfm:
            self.dlfm = DLFM(dim, dlfm)
        local_dim = dlfm.out_dim or dim if ablation.use_dlfm else dim

        self.global_head = BNNeckHead(dim, num_classes)
        if self.has_local:
            self.local_head = BNNeckHead(local_dim, num_classes)
        if ablation.use_vab:
            self.view_classifier = nn.Linear(dim, 1)

    def queries(self, enc: EncoderOutput, view_labels: torch.Tensor, k: Optional[int]):
        if self.ablation.use_etgm:
            return self.etgm(enc, view_labels, k)
        b = enc.z_inv.shape[0]
        q = QuerySet(
            q_inv=self.fixed_q_inv.expand(b, -1, -1), q_spe=self.fixed_q_spe.expand(b, -1, -1)
        )
        return q, ()

    def forward(self, pixels: torch.Tensor, view_labels: torch.Tensor) -> ModelOutput:
        enc = self.encoder(pixels, view_labels)
        out = ModelOutput(
            z_inv=enc.z_inv,
            z_spe=enc.z_spe,
            global_logits=self.global_head(enc.z_inv),
            encoder=enc,
        )
        if self.ablation.use_vab:
            out.view_logits = self.view_classifier(enc.z_spe).squeeze(-1)
        if self.has_local:
            queries, routings = self.queries(enc, view_labels, self.top_k)
            if self.ablation.use_dlfm:
                f_local = self.dlfm(queries, enc, self.neighbors)
            else:
                f_local = torch.cat([queries.q_inv, queries.q_spe], dim=1).mean(dim=1)
            out.queries = queries
            out.routings = tuple(routings)
            out.f_local = f_local
            out.local_logits = self.local_head(f_local)
        return out

    @torch.no_grad()
    def embed(self, pixels: torch.Tensor, view_labels: torch.Tensor) -> torch.Tensor:
        """Retrieval embedding ``[F_local ; z_inv]``, each part L2-normalised."""
        out = self.forward(pixels, view_labels)
        parts = [out.z_inv] if out.f_local is None else [out.f_local, out.z_inv]
        return torch.cat([F.normalize(p, dim=-1) for p in parts], dim=-1)

    @torch.no_grad()
    def predict_view(self, pixels: torch.Tensor, view_labels: torch.Tensor) -> torch.Tensor:
        if not self.ablation.use_vab:
            raise RuntimeError("view classifier is disabled by the ablation flags")
        enc = self.encoder(pixels, view_labels)
        return (self.view_classifier(enc.z_spe).squeeze(-1) > 0).long()
