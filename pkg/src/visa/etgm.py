"""Expert-driven token generation: two mixture-of-experts banks producing query tokens.

Each expert is a learnable token set refined by cross-attention onto a
conditioning set, self-attention among the tokens and a feed-forward layer.
A per-sample router picks the top-k experts and the selected outputs are
combined with the routing probabilities renormalised over the selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from visa.encoder import EncoderOutput
from visa.layers import MLP, Attention, ShapeError, trunc_normal_init

ROUTER_MODES = ("soft", "hard")
EXPERT_INPUTS = ("patches", "vector")


class RoutingError(ValueError):
    pass


@dataclass
class ETGMConfig:
    num_experts: int = 4
    top_k: int = 2
    tokens_per_expert: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    router_mode: str = "soft"
    expert_input: str = "patches"

    def __post_init__(self) -> None:
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if not 1 <= self.tokens_per_expert <= 16:
            raise ValueError("tokens_per_expert must be in [1, 16]")
        if self.router_mode not in ROUTER_MODES:
            raise ValueError(f"router_mode must be one of {ROUTER_MODES}")
        if self.expert_input not in EXPERT_INPUTS:
            raise ValueError(f"expert_input must be one of {EXPERT_INPUTS}")


@dataclass
class RoutingResult:
    probs: torch.Tensor  # [B, E]
    selected: torch.Tensor  # [B, k]
    weights: torch.Tensor  # [B, k]


@dataclass
class QuerySet:
    q_inv: torch.Tensor  # [B, M, D]
    q_spe: torch.Tensor  # [B, M, D]


class Expert(nn.Module):
    def __init__(self, dim: int, num_tokens: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.tokens = nn.Parameter(torch.zeros(num_tokens, dim))
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = MLP(dim, int(dim * mlp_ratio))
        trunc_normal_init(self)
        nn.init.trunc_normal_(self.tokens, std=0.02, a=-0.04, b=0.04)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Refine the expert tokens against a conditioning set ``z`` of shape ``[B, S, D]``."""
        if z.dim() != 3 or z.shape[-1] != self.tokens.shape[-1] or z.shape[1] < 1:
            raise ShapeError(f"conditioning set must be [B, S>=1, {self.tokens.shape[-1]}]")
        t = self.tokens.expand(z.shape[0], -1, -1)
        t = t + self.cross_attn(self.norm_q(t), context=self.norm_ctx(z))
        t = t + self.self_attn(self.norm_self(t))
        t = t + self.ffn(self.norm_ffn(t))
        return t


def expert_forward(expert: Expert, z: torch.Tensor) -> torch.Tensor:
    return expert(z)


def topk_stable(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]


def route_logits(logits: torch.Tensor, k: int) -> RoutingResult:
    e = logits.shape[-1]
    if not 1 <= k <= e:
        raise RoutingError(f"top_k must be in [1, {e}], got {k}")
    probs = logits.softmax(dim=-1)
    selected = topk_stable(logits, k)
    if torch.isneginf(logits.gather(1, selected)).any():
        raise RoutingError("top_k exceeds the number of experts available to a sample")
    picked = probs.gather(1, selected)
    weights = picked / picked.sum(dim=-1, keepdim=True)
    return RoutingResult(probs=probs, selected=selected, weights=weights)


def load_balance_loss(routing: RoutingResult, num_experts: Optional[int] = None) -> torch.Tensor:
    """``E * sum_j mean_b(p[b, j])**2``; equals 1 for uniform usage and E on collapse."""
    e = routing.probs.shape[-1] if num_experts is None else num_experts
    mean_probs = routing.probs.mean(dim=0)
    return e * (mean_probs**2).sum()


def hard_partition_mask(num_experts: int, view_labels: torch.Tensor) -> torch.Tensor:
    """Boolean ``[B, E]`` of experts each sample may use.

    Experts ``[0, a)`` are ground-only, ``[a, 2a)`` aerial-only and the rest
    shared, with ``a = E // 3``.
    """
    a = num_experts // 3
    pool = torch.full((num_experts,), -1, dtype=torch.long)
    pool[:a] = 0
    pool[a : 2 * a] = 1
    v = view_labels.long().cpu()[:, None]
    return ((pool[None] == -1) | (pool[None] == v)).to(view_labels.device)


class ExpertBank(nn.Module):
    """E experts and a linear router for one branch (``invariant`` or ``specific``)."""

    def __init__(self, dim: int, cfg: ETGMConfig, branch: str):
        super().__init__()
        if branch not in ("invariant", "specific"):
            raise ValueError(f"unknown branch {branch!r}")
        self.branch = branch
        self.cfg = cfg
        self.view_aware = branch == "specific"
        router_in = dim + 1 if self.view_aware and cfg.router_mode == "soft" else dim
        self.router = nn.Linear(router_in, cfg.num_experts)
        self.experts = nn.ModuleList(
            Expert(dim, cfg.tokens_per_expert, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.num_experts)
        )
        trunc_normal_init(self.router)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def logits(self, pooled: torch.Tensor, view_labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.view_aware and self.cfg.router_mode == "soft":
            if view_labels is None:
                raise ValueError("specific bank in soft mode needs view labels")
            pooled = torch.cat([pooled, view_labels.to(pooled.dtype)[:, None]], dim=-1)
        logits = self.router(pooled)
        if self.view_aware and self.cfg.router_mode == "hard":
            if view_labels is None:
                raise ValueError("specific bank in hard mode needs view labels")
            allowed = hard_partition_mask(self.num_experts, view_labels)
            logits = logits.masked_fill(~allowed, float("-inf"))
        return logits

    def aggregate(self, cond: torch.Tensor, routing: RoutingResult) -> torch.Tensor:
        """Weighted sum of the selected experts' outputs; unselected experts never run."""
        b = cond.shape[0]
        m = self.cfg.tokens_per_expert
        out = cond.new_zeros(b, m, cond.shape[-1])
        for e, expert in enumerate(self.experts):
            hit = routing.selected == e
            rows = hit.any(dim=1).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            w = (routing.weights * hit).sum(dim=1)[rows]
            out = out.index_add(0, rows, w[:, None, None] * expert(cond[rows]))
        return out

    def forward(
        self,
        pooled: torch.Tensor,
        cond: torch.Tensor,
        k: int,
        view_labels: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, RoutingResult]:
        routing = route_logits(self.logits(pooled, view_labels), k)
        return self.aggregate(cond, routing), routing


def route(
    pooled: torch.Tensor, bank: ExpertBank, k: int, view_labels: Optional[torch.Tensor] = None
) -> RoutingResult:
    return route_logits(bank.logits(pooled, view_labels), k)


class ETGM(nn.Module):
    def __init__(self, dim: int, cfg: ETGMConfig):
        super().__init__()
        self.cfg = cfg
        self.inv_bank = ExpertBank(dim, cfg, "invariant")
        self.spe_bank = ExpertBank(dim, cfg, "specific")

    def conditioning(self, vector: torch.Tensor, enc: EncoderOutput) -> torch.Tensor:
        if self.cfg.expert_input == "vector":
            return vector[:, None]
        return torch.cat([vector[:, None], enc.patch_features], dim=1)

    def forward(
        self, enc: EncoderOutput, view_labels: torch.Tensor, k: Optional[int] = None
    ) -> Tuple[QuerySet, Tuple[RoutingResult, RoutingResult]]:
        k = self.cfg.top_k if k is None else k
        q_inv, r_inv = self.inv_bank(enc.z_inv, self.conditioning(enc.z_inv, enc), k)
        q_spe, r_spe = self.spe_bank(
            enc.z_spe, self.conditioning(enc.z_spe, enc), k, view_labels
        )
        return QuerySet(q_inv=q_inv, q_spe=q_spe), (r_inv, r_spe)


def generate_queries(
    enc: EncoderOutput, etgm: ETGM, view_labels: torch.Tensor, k: Optional[int] = None
) -> Tuple[QuerySet, Tuple[RoutingResult, RoutingResult]]:
    return etgm(enc, view_labels, k)
