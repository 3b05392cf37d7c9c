"""View-decoupled transformer backbone.

Every layer owns one learnable ground token and one learnable aerial token.
Both are added to a running per-view stream that starts at zero, and the
token matching a sample's view label joins the self-attention with the class
token and the patches. The inactive token is still updated (it attends as a
query) but is masked out as a key, so it never influences the sample.

After every layer the active view stream is subtracted from the class token.
In ``readout`` mode the subtraction accumulates on a separate copy and the
residual stream is untouched; in ``inplace`` mode the class-token stream
itself is replaced by the difference before the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn as nn

from visa.layers import Block, ShapeError, trunc_normal_init

GROUND, AERIAL = 0, 1
SUBTRACT_MODES = ("readout", "inplace")


@dataclass
class EncoderConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    patch_size: int = 16
    img_size: Tuple[int, int] = (64, 32)
    in_chans: int = 3
    mlp_ratio: float = 4.0
    use_vab: bool = True
    subtract_mode: str = "readout"

    def __post_init__(self) -> None:
        self.img_size = tuple(self.img_size)
        if self.subtract_mode not in SUBTRACT_MODES:
            raise ValueError(f"subtract_mode must be one of {SUBTRACT_MODES}")

    @property
    def num_patches(self) -> int:
        h, w = self.img_size
        return (h // self.patch_size) * (w // self.patch_size)


@dataclass
class ImageBatch:
    pixels: torch.Tensor
    identity_labels: torch.Tensor
    view_labels: torch.Tensor
    camera_ids: torch.Tensor

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ShapeError(f"pixels must be [B, C, H, W], got {tuple(self.pixels.shape)}")
        b = self.pixels.shape[0]
        for name in ("identity_labels", "view_labels", "camera_ids"):
            if getattr(self, name).shape != (b,):
                raise ShapeError(f"{name} must have shape ({b},)")
        if not torch.isin(self.view_labels, torch.tensor([GROUND, AERIAL])).all():
            raise ValueError("view_labels must be 0 (ground) or 1 (aerial)")
        if (self.identity_labels < 0).any():
            raise ValueError("identity_labels must be non-negative")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class TokenState:
    cls: torch.Tensor  # [B, D]
    view_tokens: torch.Tensor  # [B, 2, D], slot 0 ground, slot 1 aerial
    patches: torch.Tensor  # [B, N, D]


@dataclass
class EncoderOutput:
    z_inv: torch.Tensor  # [B, D]
    z_spe: torch.Tensor  # [B, D]
    patch_features: torch.Tensor  # [B, N, D]
    cls: Optional[torch.Tensor] = field(default=None, repr=False)  # raw class stream


def subtract_view_token(cls_stream: torch.Tensor, view_stream: torch.Tensor) -> torch.Tensor:
    return cls_stream - view_stream


def select_view(view_tokens: torch.Tensor, view_labels: torch.Tensor) -> torch.Tensor:
    """Pick each sample's own view slot from ``[B, 2, D]``."""
    return view_tokens[torch.arange(view_tokens.shape[0]), view_labels.long()]


class PatchEmbed(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        h, w = cfg.img_size
        p = cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"patch size {p} must divide input size {h}x{w}")
        self.cfg = cfg
        self.proj = nn.Conv2d(cfg.in_chans, cfg.dim, kernel_size=p, stride=p)
        self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1 + cfg.num_patches, cfg.dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)

    def forward(self, pixels: torch.Tensor) -> TokenState:
        cfg = self.cfg
        _, c, h, w = pixels.shape
        if (h, w) != tuple(cfg.img_size) or c != cfg.in_chans:
            raise ShapeError(
                f"expected [B, {cfg.in_chans}, {cfg.img_size[0]}, {cfg.img_size[1]}], "
                f"got {tuple(pixels.shape)}"
            )
        patches = self.proj(pixels).flatten(2).transpose(1, 2) + self.pos_embed[1:]
        b = pixels.shape[0]
        cls = (self.cls_token + self.pos_embed[0]).expand(b, -1)
        views = pixels.new_zeros(b, 2, cfg.dim)
        return TokenState(cls=cls, view_tokens=views, patches=patches)


def embed_patches(batch: ImageBatch, encoder: "ViewDecoupledEncoder") -> TokenState:
    return encoder.embed(batch.pixels)


class ViewDecoupledLayer(nn.Module):
    """One encoder layer with its own aerial/ground tokens.

    The key mask used for the most recent call is kept in ``last_key_mask``
    (``[B, S]``, sequence order ``[cls, ground, aerial, patches...]``).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.use_vab = cfg.use_vab
        self.block = Block(cfg.dim, cfg.heads, cfg.mlp_ratio)
        if self.use_vab:
            self.view_tokens = nn.Parameter(torch.zeros(2, cfg.dim))
            nn.init.trunc_normal_(self.view_tokens, std=0.02, a=-0.04, b=0.04)
        self.last_key_mask: Optional[torch.Tensor] = None

    def forward(self, state: TokenState, view_labels: torch.Tensor) -> TokenState:
        b = state.cls.shape[0]
        if not self.use_vab:
            x = torch.cat([state.cls[:, None], state.patches], dim=1)
            x = self.block(x)
            self.last_key_mask = None
            return TokenState(cls=x[:, 0], view_tokens=state.view_tokens, patches=x[:, 1:])

        views = state.view_tokens + self.view_tokens
        x = torch.cat([state.cls[:, None], views, state.patches], dim=1)
        key_mask = torch.ones(b, x.shape[1], dtype=torch.bool, device=x.device)
        inactive = 1 + (1 - view_labels.long())
        key_mask[torch.arange(b), inactive] = False
        self.last_key_mask = key_mask.detach()
        x = self.block(x, key_mask=key_mask)
        return TokenState(cls=x[:, 0], view_tokens=x[:, 1:3], patches=x[:, 3:])


def encoder_layer(
    state: TokenState, layer: ViewDecoupledLayer, view_labels: torch.Tensor
) -> TokenState:
    return layer(state, view_labels)


class ViewDecoupledEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.layers = nn.ModuleList(ViewDecoupledLayer(cfg) for _ in range(cfg.depth))
        trunc_normal_init(self)

    def embed(self, pixels: torch.Tensor) -> TokenState:
        return self.patch_embed(pixels)

    def forward(self, pixels: torch.Tensor, view_labels: torch.Tensor) -> EncoderOutput:
        state = self.embed(pixels)
        readout = torch.zeros_like(state.cls)
        for layer in self.layers:
            state = layer(state, view_labels)
            if not self.cfg.use_vab:
                continue
            active = select_view(state.view_tokens, view_labels)
            if self.cfg.subtract_mode == "inplace":
                state = TokenState(
                    cls=subtract_view_token(state.cls, active),
                    view_tokens=state.view_tokens,
                    patches=state.patches,
                )
            else:
                readout = readout + active

        z_inv = subtract_view_token(state.cls, readout)
        z_spe = select_view(state.view_tokens, view_labels)
        return EncoderOutput(
            z_inv=z_inv, z_spe=z_spe, patch_features=state.patches, cls=state.cls
        )


def encode(batch: ImageBatch, encoder: ViewDecoupledEncoder) -> EncoderOutput:
    return encoder(batch.pixels, batch.view_labels)
