"""Dual-branch local fusion.

Each query token picks its top-K most cosine-similar patches, is inserted as
node 0 of a fully connected cosine graph over those patches, and is refined
by a small GCN over the normalised adjacency. The refined invariant and
specific queries are fused with the class token by one self-attention block.

The functions below work on arbitrary leading batch dimensions: a single
query is ``[D]`` with patches ``[N, D]``; the model calls them with
``[B, M, D]`` queries against ``[B, N, D]`` patches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from visa.encoder import EncoderOutput
from visa.etgm import QuerySet
from visa.layers import Block, ShapeError, trunc_normal_init

NORM_EPS = 1e-12
READOUTS = ("mean", "cls")


class NeighborError(ValueError):
    pass


@dataclass
class DLFMConfig:
    neighbors: int = 4
    gcn_layers: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    readout: str = "mean"
    out_dim: Optional[int] = None
    residual: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.neighbors <= 32:
            raise ValueError("neighbors must be in [1, 32]")
        if self.gcn_layers < 1:
            raise ValueError("gcn_layers must be >= 1")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")


@dataclass
class NeighborSelection:
    indices: torch.Tensor  # [..., K]
    similarities: torch.Tensor  # [..., K]


@dataclass
class QueryAugmentedGraph:
    nodes: torch.Tensor  # [..., K+1, D], query at row 0
    adjacency: torch.Tensor  # [..., K+1, K+1], raw cosine, unit diagonal
    normalized_adjacency: torch.Tensor  # [..., K+1, K+1]


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine ``[..., P, Q]`` between rows of ``a`` and ``b``.

    Pairs involving a vector with norm below ``1e-12`` get cosine 0.
    """
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    dots = torch.matmul(a, b.transpose(-1, -2))
    denom = torch.matmul(na, nb.transpose(-1, -2))
    degenerate = (na < NORM_EPS) | (nb.transpose(-1, -2) < NORM_EPS)
    cos = dots / torch.where(degenerate, torch.ones_like(denom), denom)
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    return cos.clamp(-1.0, 1.0)


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return cosine_matrix(a[..., None, :], b[..., None, :])[..., 0, 0]


def is_degenerate(v: torch.Tensor) -> bool:
    return bool((v.norm(dim=-1) < NORM_EPS).any())


def select_neighbors(query: torch.Tensor, patches: torch.Tensor, k: int) -> NeighborSelection:
    """Top-k patches by cosine to the query, ties broken by lower patch index.

    ``query`` is ``[..., D]`` (or ``[..., M, D]`` with ``patches`` ``[..., N, D]``).
    """
    n = patches.shape[-2]
    if not 1 <= k <= n:
        raise NeighborError(f"K must be in [1, {n}], got {k}")
    single = query.dim() == patches.dim() - 1
    q = query[..., None, :] if single else query
    sims = cosine_matrix(q, patches)  # [..., M, N]
    order = torch.sort(sims, dim=-1, descending=True, stable=True).indices[..., :k]
    top = sims.gather(-1, order)
    if single:
        order, top = order[..., 0, :], top[..., 0, :]
    return NeighborSelection(indices=order, similarities=top)


def gather_patches(patches: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """``patches [..., N, D]`` gathered by ``indices [..., M, K]`` into ``[..., M, K, D]``."""
    d = patches.shape[-1]
    expanded = patches[..., None, :, :].expand(*indices.shape[:-1], patches.shape[-2], d)
    return expanded.gather(-2, indices[..., None].expand(*indices.shape, d))


def normalize_adjacency(adjacency: torch.Tensor) -> torch.Tensor:
    """``D^-1/2 A+ D^-1/2`` with ``A+`` the adjacency clamped to [0, 1]."""
    a = adjacency.clamp(min=0.0, max=1.0)
    deg = a.sum(dim=-1)
    return a / torch.sqrt(deg[..., :, None] * deg[..., None, :])


def build_graph(
    query: torch.Tensor, selection: NeighborSelection, patches: torch.Tensor
) -> QueryAugmentedGraph:
    single = query.dim() == patches.dim() - 1
    idx = selection.indices[..., None, :] if single else selection.indices
    q = query[..., None, :] if single else query
    neighbors = gather_patches(patches, idx)  # [..., M, K, D]
    nodes = torch.cat([q[..., None, :], neighbors], dim=-2)
    adjacency = cosine_matrix(nodes, nodes)
    eye = torch.eye(nodes.shape[-2], dtype=torch.bool, device=nodes.device)
    adjacency = torch.where(eye, torch.ones_like(adjacency), adjacency)
    if single:
        nodes, adjacency = nodes[..., 0, :, :], adjacency[..., 0, :, :]
    return QueryAugmentedGraph(
        nodes=nodes, adjacency=adjacency, normalized_adjacency=normalize_adjacency(adjacency)
    )


class GCN(nn.Module):
    """Graph convolution stack ``X <- X + act(A_hat X W)``; activation only between layers."""

    def __init__(self, dim: int, num_layers: int = 2, residual: bool = True, activation: bool = True):
        super().__init__()
        self.weights = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in range(num_layers))
        self.residual = residual
        self.activation = activation
        trunc_normal_init(self)

    def forward(self, nodes: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        x = nodes
        last = len(self.weights) - 1
        for i, lin in enumerate(self.weights):
            upd = lin(torch.matmul(adj, x))
            if self.activation and i < last:
                upd = F.gelu(upd)
            x = x + upd if self.residual else upd
        return x


def gcn_refine(graph: QueryAugmentedGraph, gcn: GCN) -> torch.Tensor:
    """Refined query: row 0 of the propagated node features."""
    return gcn(graph.nodes, graph.normalized_adjacency)[..., 0, :]


class LocalFusion(nn.Module):
    """Self-attention over ``[Q_inv..., Q_spe..., CLS]`` and a pooled read-out."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, out_dim: Optional[int], readout: str):
        super().__init__()
        self.block = Block(dim, heads, mlp_ratio)
        self.readout = readout
        self.out = nn.Identity() if out_dim in (None, dim) else nn.Linear(dim, out_dim)
        trunc_normal_init(self)

    def forward(self, q_inv: torch.Tensor, q_spe: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
        if not q_inv.shape[-1] == q_spe.shape[-1] == cls.shape[-1]:
            raise ShapeError("fusion inputs must share the embedding dimension")
        seq = self.block(torch.cat([q_inv, q_spe, cls[:, None]], dim=1))
        pooled = seq.mean(dim=1) if self.readout == "mean" else seq[:, -1]
        return self.out(pooled)


def fuse_local(
    q_inv_refined: torch.Tensor, q_spe_refined: torch.Tensor, cls: torch.Tensor, fusion: LocalFusion
) -> torch.Tensor:
    return fusion(q_inv_refined, q_spe_refined, cls)


class DLFM(nn.Module):
    def __init__(self, dim: int, cfg: DLFMConfig):
        super().__init__()
        self.cfg = cfg
        self.gcn_inv = GCN(dim, cfg.gcn_layers, cfg.residual)
        self.gcn_spe = GCN(dim, cfg.gcn_layers, cfg.residual)
        self.fusion = LocalFusion(dim, cfg.heads, cfg.mlp_ratio, cfg.out_dim, cfg.readout)
        self.last_selection: Optional[tuple] = None

    def refine(self, queries: torch.Tensor, patches: torch.Tensor, gcn: GCN, k: int) -> tuple:
        selection = select_neighbors(queries, patches, k)
        graph = build_graph(queries, selection, patches)
        return gcn_refine(graph, gcn), selection

    def forward(self, queries: QuerySet, enc: EncoderOutput, k: Optional[int] = None) -> torch.Tensor:
        k = self.cfg.neighbors if k is None else k
        patches = enc.patch_features
        q_inv, sel_inv = self.refine(queries.q_inv, patches, self.gcn_inv, k)
        q_spe, sel_spe = self.refine(queries.q_spe, patches, self.gcn_spe, k)
        self.last_selection = (sel_inv, sel_spe)
        return self.fusion(q_inv, q_spe, enc.z_inv)


def dlfm_forward(queries: QuerySet, enc: EncoderOutput, dlfm: DLFM, k: Optional[int] = None) -> torch.Tensor:
    return dlfm(queries, enc, k)
