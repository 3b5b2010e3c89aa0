"""Channel re-weighting and non-local pixel-affinity refinement.

A `DomainHead` holds per-channel classifier weights: they scale feature
channels (style-discriminative weighting) and, pooled, produce a domain
logit. `PixelAffinity` embeds two feature maps with 1x1 convolutions and
forms a row-stochastic (H*W)x(H*W) attention matrix from dot-product
pixel similarity. The refinement aggregates the weighted map under that
attention and adds it back as a residual:

    refined = unflatten(affinity(query, key) @ flatten(weighted)) + weighted

`sram` refines a feature map against itself; `cram` draws the affinity
keys from a second source (skeleton features) while values and residual
come from the first. With identical inputs the two coincide exactly.

All operations accept (C, H, W) or (B, C, H, W) tensors and preserve the
input rank.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ChannelMismatch, ShapeMismatch

__all__ = [
    "DomainHead",
    "PixelAffinity",
    "RefinedAttentionBlock",
    "cam_weight",
    "affinity",
    "sram",
    "cram",
]


def _batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ShapeMismatch(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(t.shape)}")


class DomainHead(nn.Module):
    """Per-channel weights with a bias, doubling as a domain classifier."""

    def __init__(self, channels: int):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        self.channels = channels
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(()))
        with torch.no_grad():
            self.weight.add_(torch.randn(channels) * 0.02)


class PixelAffinity(nn.Module):
    """Paired 1x1 embeddings for dot-product pixel affinity."""

    def __init__(self, channels: int, embed_channels: int | None = None):
        super().__init__()
        if embed_channels is None:
            embed_channels = max(channels // 8, 1)
        if embed_channels < 1:
            raise ValueError("embed_channels must be >= 1")
        self.channels = channels
        self.embed_channels = embed_channels
        self.theta = nn.Conv2d(channels, embed_channels, 1, bias=False)
        self.phi = nn.Conv2d(channels, embed_channels, 1, bias=False)
        with torch.no_grad():
            std = channels**-0.5
            self.theta.weight.normal_(0.0, std)
            self.phi.weight.normal_(0.0, std)
        self.theta.skip_global_init = True
        self.phi.skip_global_init = True


def cam_weight(feats: torch.Tensor, head: DomainHead):
    """Channel weighting plus diagnostics.

    Returns ``(weighted, heat, logit)``: the channel-preserving weighted
    map ``weight[k] * feats[k]``, its channel sum as a scalar heatmap, and
    the pooled domain logit ``mean(feats) . weight + bias``.
    """
    f, squeeze = _batched(feats)
    c = f.shape[1]
    if c != head.channels:
        raise ChannelMismatch(f"feature channels {c} != head channels {head.channels}")
    w = head.weight.view(1, -1, 1, 1)
    weighted = f * w
    heat = weighted.sum(dim=1)
    logit = (f.mean(dim=(2, 3)) * head.weight).sum(dim=1) + head.bias
    if squeeze:
        return weighted.squeeze(0), heat.squeeze(0), logit.squeeze(0)
    return weighted, heat, logit


def affinity(fq: torch.Tensor, fk: torch.Tensor, params: PixelAffinity) -> torch.Tensor:
    """Row-stochastic pixel-affinity matrix between two feature maps.

    Row i holds the softmax over key pixels of the embedded dot products
    ``theta(fq)[:, i] . phi(fk)[:, j]``.
    """
    if fq.shape != fk.shape:
        raise ShapeMismatch(f"query {tuple(fq.shape)} != key {tuple(fk.shape)}")
    q, squeeze = _batched(fq)
    k, _ = _batched(fk)
    if q.shape[1] != params.channels:
        raise ShapeMismatch(
            f"feature channels {q.shape[1]} != affinity channels {params.channels}"
        )
    qe = params.theta(q).flatten(2)  # (B, C1, HW)
    ke = params.phi(k).flatten(2)
    logits = qe.transpose(1, 2) @ ke  # (B, HW, HW)
    attn = torch.softmax(logits, dim=-1)
    return attn.squeeze(0) if squeeze else attn


def _refine(fi: torch.Tensor, fs: torch.Tensor, head: DomainHead, params: PixelAffinity):
    f_i, squeeze = _batched(fi)
    f_s, _ = _batched(fs)
    weighted, heat, logit = cam_weight(f_i, head)
    attn = affinity(f_i, f_s, params)
    b, c, h, w = weighted.shape
    values = weighted.flatten(2).transpose(1, 2)  # (B, HW, C)
    aggregated = attn @ values
    refined = aggregated.transpose(1, 2).reshape(b, c, h, w) + weighted
    if squeeze:
        return refined.squeeze(0), heat.squeeze(0), logit.squeeze(0)
    return refined, heat, logit


def sram(feats: torch.Tensor, head: DomainHead, params: PixelAffinity) -> torch.Tensor:
    """Self-refined attention over one feature map."""
    return _refine(feats, feats, head, params)[0]


def cram(
    fi: torch.Tensor, fs: torch.Tensor, head: DomainHead, params: PixelAffinity
) -> torch.Tensor:
    """Cross-refined attention: keys from ``fs``, values/residual from ``fi``."""
    if fi.shape != fs.shape:
        raise ShapeMismatch(f"image {tuple(fi.shape)} != skeleton {tuple(fs.shape)}")
    return _refine(fi, fs, head, params)[0]


class RefinedAttentionBlock(nn.Module):
    """Bundled head and affinity parameters for use inside networks."""

    def __init__(self, channels: int, embed_channels: int | None = None):
        super().__init__()
        self.head = DomainHead(channels)
        self.params = PixelAffinity(channels, embed_channels)

    def forward(self, feats: torch.Tensor, keys: torch.Tensor | None = None):
        """Refine ``feats`` (against ``keys`` when given); returns
        ``(refined, heat, logit)``."""
        return _refine(feats, keys if keys is not None else feats, self.head, self.params)
