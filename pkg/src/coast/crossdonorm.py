"""Cross-domain feature normalization.

A feature map's per-channel mean and standard deviation act as its style.
Standardizing a map with its own statistics and re-scaling it with another
map's statistics transfers the other map's style while keeping the content.
"""
from __future__ import annotations

from dataclasses import dataclass

from .autograd import InvalidShapeError, Tensor, channel_stats

EPS_STATS = 1e-5


@dataclass
class StyleVector:
    mu: Tensor  # [N, C]
    sigma: Tensor  # [N, C]
    source_domain_id: str | None = None

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]

    def detach(self) -> "StyleVector":
        return StyleVector(self.mu.detach(), self.sigma.detach(), self.source_domain_id)

    def __getitem__(self, n: int) -> "StyleVector":
        return StyleVector(self.mu[n : n + 1], self.sigma[n : n + 1], self.source_domain_id)


def extract_style(z: Tensor, domain_id: str | None = None, eps: float = EPS_STATS) -> StyleVector:
    """Per-sample style vectors of an NCHW map (row n belongs to sample n)."""
    mu, sigma = channel_stats(z, eps)
    return StyleVector(mu, sigma, domain_id)


def apply_style(z: Tensor, own: StyleVector, other: StyleVector) -> Tensor:
    """other.sigma * (z - own.mu) / own.sigma + other.mu, per sample and channel."""
    if z.ndim != 4:
        raise InvalidShapeError(f"expected NCHW features, got {z.shape}")
    c = z.shape[1]
    if own.channels != c or other.channels != c:
        raise InvalidShapeError(f"channel mismatch: features {c}, styles {own.channels}/{other.channels}")

    def col(t: Tensor) -> Tensor:
        return t.reshape(t.shape[0], c, 1, 1)

    return (z - col(own.mu)) * (col(other.sigma) / col(own.sigma)) + col(other.mu)


def cross_stylize(z_i: Tensor, z_j: Tensor, detach_style: bool = False) -> tuple[Tensor, Tensor]:
    """Swap styles between paired samples: returns (z_i in j's style, z_j in i's style)."""
    if z_i.shape != z_j.shape:
        raise InvalidShapeError(f"paired feature maps differ in shape: {z_i.shape} vs {z_j.shape}")
    s_i, s_j = extract_style(z_i), extract_style(z_j)
    if detach_style:
        s_i, s_j = s_i.detach(), s_j.detach()
    return apply_style(z_i, s_i, s_j), apply_style(z_j, s_j, s_i)


def stylize_toward(z: Tensor, style_source: Tensor, detach_style: bool = False) -> Tensor:
    """One direction of ``cross_stylize``: ``z`` re-normalized with ``style_source``'s statistics."""
    if z.shape != style_source.shape:
        raise InvalidShapeError(f"paired feature maps differ in shape: {z.shape} vs {style_source.shape}")
    own, other = extract_style(z), extract_style(style_source)
    if detach_style:
        own, other = own.detach(), other.detach()
    return apply_style(z, own, other)
