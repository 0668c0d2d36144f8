"""Positive feature maps, rotary bases and distance reweighting.

Every mixer in :mod:`dualform.mixers` is built from the primitives here.
Positions are token indices for the index variants and days since the
first acquisition for the ``time_*`` variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import (
    CausalityError,
    ConfigurationError,
    DimensionError,
    InvalidInputError,
    InvalidParameterError,
    SpanExceededError,
)

KINDS = (
    "transformer_noncausal",
    "transformer_causal",
    "linear",
    "cosformer",
    "time_cosformer",
    "linroformer",
    "time_linroformer",
    "retention",
    "time_retention",
)
TRANSFORMER_KINDS = frozenset({"transformer_noncausal", "transformer_causal"})
RECURRENT_KINDS = tuple(k for k in KINDS if k not in TRANSFORMER_KINDS)
TIME_KINDS = frozenset({"time_cosformer", "time_linroformer", "time_retention"})
COSFORMER_KINDS = frozenset({"cosformer", "time_cosformer"})
ROTARY_KINDS = frozenset({"linroformer", "time_linroformer", "retention", "time_retention"})
RETENTION_KINDS = frozenset({"retention", "time_retention"})
# normalized linear attention (row weights sum to one)
ATTENTION_KINDS = frozenset(RECURRENT_KINDS) - RETENTION_KINDS

# index variant -> date variant
TIME_COUNTERPART = {
    "cosformer": "time_cosformer",
    "linroformer": "time_linroformer",
    "retention": "time_retention",
}

DEFAULT_TIME_SPAN = 700.0
# relative slack under which a distance marginally above M is clamped
SPAN_SLACK = 1e-9


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ConfigurationError(f"unknown mechanism kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class RotaryBasis:
    """Rotation frequencies for ``dim`` features (``dim/2`` planes)."""

    dim: int
    thetas: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise DimensionError(f"rotary dimension must be even and positive, got {self.dim}")
        thetas = tuple(1.0 / 10000 ** (2 * i / self.dim) for i in range(self.dim // 2))
        object.__setattr__(self, "thetas", thetas)

    def as_tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.tensor(self.thetas, dtype=dtype, device=device)


@dataclass(frozen=True)
class ReweightParams:
    max_span: float = DEFAULT_TIME_SPAN

    def __post_init__(self):
        if not (self.max_span > 0 and math.isfinite(self.max_span)):
            raise InvalidParameterError(f"max_span must be positive, got {self.max_span}")


def psi(u: torch.Tensor) -> torch.Tensor:
    """``elu(u) + 1``, strictly positive everywhere.

    Written as ``u + 1`` / ``exp(u)`` on the two branches, which is the same
    function but keeps precision for very negative inputs; the result is
    clamped to the smallest normal float so it never underflows to zero.
    """
    u = torch.as_tensor(u)
    if not torch.is_floating_point(u):
        u = u.to(torch.get_default_dtype())
    if not bool(torch.isfinite(u).all()):
        raise InvalidInputError("psi received non-finite input")
    out = torch.where(u > 0, u + 1.0, torch.exp(torch.clamp(u, max=0.0)))
    return out.clamp_min(torch.finfo(out.dtype).tiny)


def _rotation_angles(t: torch.Tensor | float, basis: RotaryBasis, like: torch.Tensor) -> torch.Tensor:
    thetas = basis.as_tensor(dtype=like.dtype, device=like.device)
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    return t[..., None] * thetas


def rotary_apply(u: torch.Tensor, t, basis: RotaryBasis) -> torch.Tensor:
    """Rotate consecutive feature pairs ``(u[2k], u[2k+1])`` by ``t * theta_k``.

    ``t`` may be a scalar or a tensor broadcastable against ``u[..., 0]``.
    """
    u = torch.as_tensor(u)
    if not torch.is_floating_point(u):
        u = u.to(torch.get_default_dtype())
    if u.shape[-1] % 2:
        raise DimensionError(f"rotary input must have an even feature count, got {u.shape[-1]}")
    if u.shape[-1] != basis.dim:
        raise DimensionError(f"rotary input has {u.shape[-1]} features, basis expects {basis.dim}")
    angles = _rotation_angles(t, basis, u)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = u[..., 0::2], u[..., 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = odd * cos + even * sin
    return torch.stack((rot_even, rot_odd), dim=-1).flatten(-2)


def _check_span(delta: float, max_span: float) -> float:
    if delta < 0:
        raise CausalityError(f"negative token distance {delta}")
    if delta > max_span:
        if delta <= max_span * (1 + SPAN_SLACK):
            return max_span
        raise SpanExceededError(f"distance {delta} exceeds maximum span {max_span}")
    return delta


def cos_reweight(delta: float, params: ReweightParams) -> float:
    delta = _check_span(float(delta), params.max_span)
    if delta == params.max_span:
        return 0.0
    return math.cos(math.pi * delta / (2 * params.max_span))


def decay_weight(gamma: float, delta: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise InvalidParameterError(f"decay gamma must lie in [0, 1], got {gamma}")
    if delta < 0:
        raise CausalityError(f"negative token distance {delta}")
    if delta == 0:
        return 1.0
    return gamma**delta


def check_positions(positions: torch.Tensor, max_span: float) -> torch.Tensor:
    """Validate positions against ``[0, M]``; clamps float noise just above ``M``."""
    if positions.numel() == 0:
        return positions
    lo = float(positions.min())
    hi = float(positions.max())
    if lo < 0:
        raise CausalityError(f"negative position {lo}")
    if hi > max_span * (1 + SPAN_SLACK):
        raise SpanExceededError(f"position {hi} exceeds maximum span {max_span}")
    return positions.clamp(max=max_span)


def feature_map(
    kind: str,
    u: torch.Tensor,
    position,
    reweight: ReweightParams | None = None,
    basis: RotaryBasis | None = None,
    side: str = "query",
) -> torch.Tensor:
    """Feature map ``phi`` of a mechanism, applied along the last axis of ``u``.

    For rotary kinds the ``1/dim`` stabilisation is applied only on the
    query side, so ``phi_q . phi_k`` carries a single ``1/dim`` factor.
    """
    check_kind(kind)
    if kind in TRANSFORMER_KINDS:
        raise ConfigurationError(f"{kind} uses a softmax kernel and has no feature map")
    if side not in ("query", "key"):
        raise ConfigurationError(f"side must be 'query' or 'key', got {side!r}")
    feats = psi(u)
    if kind == "linear":
        return feats
    if kind in COSFORMER_KINDS:
        reweight = reweight or ReweightParams()
        pos = torch.as_tensor(position, dtype=feats.dtype, device=feats.device)
        pos = check_positions(pos, reweight.max_span)
        angle = (math.pi / (2 * reweight.max_span)) * pos
        return torch.cat((torch.cos(angle)[..., None] * feats, torch.sin(angle)[..., None] * feats), dim=-1)
    basis = basis or RotaryBasis(feats.shape[-1])
    rotated = rotary_apply(feats, position, basis)
    if side == "query":
        rotated = rotated / basis.dim
    return rotated


def phi_dim(kind: str, head_dim: int) -> int:
    """Length of the feature map output for a head of ``head_dim`` features."""
    return 2 * head_dim if kind in COSFORMER_KINDS else head_dim
