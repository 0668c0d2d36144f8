"""Sequence mixers with a parallel form and, where one exists, a recurrent form.

Shapes follow ``(batch, time, features)``; a batch is typically the set of
pixels of one site, which share the acquisition positions.  All reductions
run in float64 regardless of the parameter dtype, so the parallel and
recurrent paths agree to ~1e-12 before the final cast.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import featmaps as fm
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    InvalidInputError,
    NoRecurrentFormError,
    OutOfOrderError,
    SpanExceededError,
)

GROUP_NORM_EPS = 1e-5
DENOM_EPS = 1e-6
DEFAULT_INDEX_SPAN = 64.0
# one median revisit interval of the synthetic data, in days
TIME_DECAY_UNIT = 12.0

STATE_HEADER = struct.Struct("<BHIIQd")


def default_gammas(kind: str, n_heads: int) -> tuple[float, ...] | None:
    if kind not in fm.RETENTION_KINDS:
        return None
    gammas = [1.0 - 2.0 ** (-(5 + h)) for h in range(n_heads)]
    if kind in fm.TIME_KINDS:
        gammas = [g ** (1.0 / TIME_DECAY_UNIT) for g in gammas]
    return tuple(gammas)


@dataclass(frozen=True)
class MixerConfig:
    kind: str
    d_model: int
    d_k: int
    d_v: int
    n_heads: int
    gammas: tuple[float, ...] | None = None
    max_span: float | None = None

    def __post_init__(self):
        fm.check_kind(self.kind)
        if self.d_k % self.n_heads or self.d_v % self.n_heads:
            raise ConfigurationError("d_k and d_v must be divisible by n_heads")
        if self.d_v != self.d_model:
            raise ConfigurationError("heads are concatenated back into the residual stream, so d_v must equal d_model")
        if self.kind in fm.ROTARY_KINDS and self.head_k % 2:
            raise ConfigurationError(f"rotary kinds need an even per-head key width, got {self.head_k}")
        if self.kind in fm.RETENTION_KINDS:
            if self.gammas is None:
                object.__setattr__(self, "gammas", default_gammas(self.kind, self.n_heads))
            if len(self.gammas) != self.n_heads:
                raise ConfigurationError("one decay per head is required")
            if any(not 0.0 <= g <= 1.0 for g in self.gammas):
                raise ConfigurationError("decays must lie in [0, 1]")
        elif self.gammas is not None:
            raise ConfigurationError(f"{self.kind} does not take decays")
        if self.max_span is None:
            span = fm.DEFAULT_TIME_SPAN if self.kind in fm.TIME_KINDS else DEFAULT_INDEX_SPAN
            object.__setattr__(self, "max_span", span)
        fm.ReweightParams(self.max_span)

    @classmethod
    def build(cls, kind: str, d_model: int, d_k: int | None = None, n_heads: int = 4, **kw) -> "MixerConfig":
        return cls(kind=kind, d_model=d_model, d_k=d_k or d_model, d_v=d_model, n_heads=n_heads, **kw)

    @property
    def head_k(self) -> int:
        return self.d_k // self.n_heads

    @property
    def head_v(self) -> int:
        return self.d_v // self.n_heads

    @property
    def phi_dim(self) -> int:
        return fm.phi_dim(self.kind, self.head_k)

    @property
    def reweight(self) -> fm.ReweightParams:
        return fm.ReweightParams(self.max_span)

    @property
    def rotary(self) -> fm.RotaryBasis:
        return fm.RotaryBasis(self.head_k)

    @property
    def is_time(self) -> bool:
        return self.kind in fm.TIME_KINDS

    @property
    def has_recurrent_form(self) -> bool:
        return self.kind not in fm.TRANSFORMER_KINDS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d_model": self.d_model,
            "d_k": self.d_k,
            "d_v": self.d_v,
            "n_heads": self.n_heads,
            "gammas": list(self.gammas) if self.gammas is not None else None,
            "max_span": self.max_span,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        d = dict(d)
        if d.get("gammas") is not None:
            d["gammas"] = tuple(d["gammas"])
        return cls(**d)


def uniform_(param: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        param.copy_(torch.rand(param.shape, generator=generator, dtype=param.dtype) * (2 * bound) - bound)


class MixerWeights(nn.Module):
    """Learnable projections of one mixer; ``forward`` runs the parallel form."""

    def __init__(self, config: MixerConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        d = config.d_model
        self.w_q = nn.Parameter(torch.empty(d, config.d_k))
        self.w_k = nn.Parameter(torch.empty(d, config.d_k))
        self.w_v = nn.Parameter(torch.empty(d, config.d_v))
        mats = [self.w_q, self.w_k, self.w_v]
        if config.kind in fm.RETENTION_KINDS:
            self.w_g = nn.Parameter(torch.empty(d, d))
            self.w_o = nn.Parameter(torch.empty(d, d))
            self.gn_scale = nn.Parameter(torch.ones(config.d_v))
            self.gn_offset = nn.Parameter(torch.zeros(config.d_v))
            mats += [self.w_g, self.w_o]
        for m in mats:
            uniform_(m, d, generator)

    def forward(self, tokens: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        return mix_parallel(self.config, self, TokenSequence(tokens, positions))


@dataclass
class TokenSequence:
    """Tokens ``(T, d)`` or ``(B, T, d)`` sharing one position vector ``(T,)``.

    ``positions`` default to ``0..T-1``.  ``modality`` is carried for
    diagnostics only.
    """

    tokens: torch.Tensor
    positions: torch.Tensor | None = None
    modality: tuple | None = None

    def __post_init__(self):
        if self.tokens.dim() not in (2, 3):
            raise DimensionError(f"tokens must be (T, d) or (B, T, d), got {tuple(self.tokens.shape)}")
        n = self.length
        if n < 1:
            raise DimensionError("a sequence needs at least one token")
        if self.positions is None:
            self.positions = torch.arange(n, dtype=torch.float64)
        self.positions = torch.as_tensor(self.positions, dtype=torch.float64)
        if self.positions.shape != (n,):
            raise DimensionError(f"expected {n} positions, got {tuple(self.positions.shape)}")
        if n > 1 and bool((self.positions[1:] < self.positions[:-1]).any()):
            raise OutOfOrderError("positions must be non-decreasing")

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def effective_positions(config: MixerConfig, seq: TokenSequence) -> torch.Tensor:
    if config.is_time:
        pos = seq.positions
        span = float(pos[-1] - pos[0])
        if span > config.max_span * (1 + fm.SPAN_SLACK):
            raise SpanExceededError(f"sequence spans {span} days, more than {config.max_span}")
        return fm.check_positions(pos, config.max_span)
    return torch.arange(seq.length, dtype=torch.float64)


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, t, d = x.shape
    return x.transpose(1, 2).reshape(b, t, h * d)


def _project(config: MixerConfig, weights: MixerWeights, x: torch.Tensor):
    q = _split_heads(x @ weights.w_q.to(torch.float64), config.n_heads)
    k = _split_heads(x @ weights.w_k.to(torch.float64), config.n_heads)
    v = _split_heads(x @ weights.w_v.to(torch.float64), config.n_heads)
    return q, k, v


def _features(config: MixerConfig, q, k, pos):
    fq = fm.feature_map(config.kind, q, pos, config.reweight, config.rotary, side="query")
    fk = fm.feature_map(config.kind, k, pos, config.reweight, config.rotary, side="key")
    return fq, fk


def decay_matrix(config: MixerConfig, pos: torch.Tensor) -> torch.Tensor:
    """Lower-triangular ``(H, T, T)`` matrix: ones, or ``gamma_h ** (p_i - p_j)``."""
    t = pos.shape[0]
    causal = torch.ones(t, t, dtype=torch.bool).tril()
    if config.kind not in fm.RETENTION_KINDS:
        return causal.to(torch.float64).expand(config.n_heads, t, t)
    delta = (pos[:, None] - pos[None, :]).clamp(min=0.0)
    gammas = torch.tensor(config.gammas, dtype=torch.float64)[:, None, None]
    return torch.where(causal, torch.pow(gammas, delta), torch.zeros((), dtype=torch.float64))


def _stabilize(den: torch.Tensor) -> torch.Tensor:
    sign = torch.where(den >= 0, 1.0, -1.0).to(den.dtype)
    return sign * den.abs().clamp_min(DENOM_EPS)


def _as_batch(seq: TokenSequence) -> tuple[torch.Tensor, bool]:
    x = seq.tokens
    unbatched = x.dim() == 2
    if unbatched:
        x = x[None]
    return x.to(torch.float64), unbatched


def _check_width(config: MixerConfig, x: torch.Tensor) -> None:
    if x.shape[-1] != config.d_model:
        raise DimensionError(f"tokens have width {x.shape[-1]}, mixer expects {config.d_model}")


def scores_parallel(config: MixerConfig, weights: MixerWeights, seq: TokenSequence) -> torch.Tensor:
    """Unnormalized score matrix per head, ``(B, H, T, T)`` (or ``(H, T, T)``)."""
    x, unbatched = _as_batch(seq)
    _check_width(config, x)
    q, k, _ = _project(config, weights, x)
    t = x.shape[1]
    if config.kind in fm.TRANSFORMER_KINDS:
        s = torch.exp(q @ k.transpose(-1, -2) / math.sqrt(config.head_k))
        if config.kind == "transformer_causal":
            s = s * torch.ones(t, t, dtype=torch.float64).tril()
    else:
        pos = effective_positions(config, seq)
        fq, fk = _features(config, q, k, pos)
        s = (fq @ fk.transpose(-1, -2)) * decay_matrix(config, pos)
    return s[0] if unbatched else s


def retention_gate(head_outputs: torch.Tensor, x: torch.Tensor, weights: MixerWeights) -> torch.Tensor:
    """Group-normalize the concatenated heads, gate with ``x W_G`` and project by ``W_O``.

    Computes ``swish(x W_G * GroupNorm(o)) W_O`` with one group per head.
    """
    config = weights.config
    o = head_outputs.to(torch.float64)
    groups = o.reshape(*o.shape[:-1], config.n_heads, config.head_v)
    mean = groups.mean(dim=-1, keepdim=True)
    var = groups.var(dim=-1, unbiased=False, keepdim=True)
    normed = ((groups - mean) / torch.sqrt(var + GROUP_NORM_EPS)).reshape(o.shape)
    normed = normed * weights.gn_scale.to(torch.float64) + weights.gn_offset.to(torch.float64)
    gate = x.to(torch.float64) @ weights.w_g.to(torch.float64)
    return nn.functional.silu(gate * normed) @ weights.w_o.to(torch.float64)


def mix_parallel(config: MixerConfig, weights: MixerWeights, seq: TokenSequence) -> torch.Tensor:
    """Whole-sequence output of the mixer, same shape and dtype as ``seq.tokens``."""
    x, unbatched = _as_batch(seq)
    _check_width(config, x)
    q, k, v = _project(config, weights, x)
    t = x.shape[1]
    if config.kind in fm.TRANSFORMER_KINDS:
        logits = q @ k.transpose(-1, -2) / math.sqrt(config.head_k)
        if config.kind == "transformer_causal":
            future = torch.ones(t, t, dtype=torch.bool).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        out = _merge_heads(torch.softmax(logits, dim=-1) @ v)
    else:
        pos = effective_positions(config, seq)
        fq, fk = _features(config, q, k, pos)
        s = (fq @ fk.transpose(-1, -2)) * decay_matrix(config, pos)
        if config.kind in fm.RETENTION_KINDS:
            out = retention_gate(_merge_heads(s @ v), x, weights)
        else:
            out = _merge_heads((s @ v) / _stabilize(s.sum(dim=-1, keepdim=True)))
    out = out.to(seq.tokens.dtype)
    return out[0] if unbatched else out


@dataclass
class RecurrentState:
    """Constant-size memory of a recurrent mixer for a batch of independent sequences.

    ``acc`` is ``(B, H, phi_dim, head_v)``; ``norm`` is ``(B, H, phi_dim)`` for
    normalized attention kinds and ``None`` for retention.
    """

    kind: str
    acc: torch.Tensor
    norm: torch.Tensor | None
    last_position: float = 0.0
    step_count: int = 0

    @property
    def batch(self) -> int:
        return self.acc.shape[0]

    @property
    def nbytes(self) -> int:
        n = self.acc.numel() * self.acc.element_size()
        if self.norm is not None:
            n += self.norm.numel() * self.norm.element_size()
        return n

    def clone(self) -> "RecurrentState":
        return replace(self, acc=self.acc.clone(), norm=None if self.norm is None else self.norm.clone())

    def to_bytes(self) -> bytes:
        _, h, phi, dv = self.acc.shape
        header = STATE_HEADER.pack(fm.KINDS.index(self.kind), h, phi, dv, self.step_count, self.last_position)
        parts = [header, self.acc.detach().to(torch.float64).numpy().astype("<f8").tobytes()]
        if self.norm is not None:
            parts.append(self.norm.detach().to(torch.float64).numpy().astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RecurrentState":
        if len(data) < STATE_HEADER.size:
            raise FormatError("truncated recurrent state header", len(data))
        tag, h, phi, dv, steps, last = STATE_HEADER.unpack_from(data, 0)
        if tag >= len(fm.KINDS) or fm.KINDS[tag] in fm.TRANSFORMER_KINDS:
            raise FormatError(f"invalid kind tag {tag}", 0)
        kind = fm.KINDS[tag]
        has_norm = kind not in fm.RETENTION_KINDS
        per_item = h * phi * dv + (h * phi if has_norm else 0)
        payload = len(data) - STATE_HEADER.size
        if per_item == 0 or payload % (8 * per_item):
            raise FormatError("payload size does not match header", STATE_HEADER.size)
        batch = payload // (8 * per_item)
        offset = STATE_HEADER.size
        n_acc = batch * h * phi * dv
        acc = np.frombuffer(data, dtype="<f8", count=n_acc, offset=offset).reshape(batch, h, phi, dv)
        offset += 8 * n_acc
        norm = None
        if has_norm:
            norm = np.frombuffer(data, dtype="<f8", count=batch * h * phi, offset=offset).reshape(batch, h, phi)
            norm = torch.from_numpy(norm.astype(np.float64))
        return cls(kind, torch.from_numpy(acc.astype(np.float64)), norm, last, steps)


def state_init(config: MixerConfig, batch: int = 1) -> RecurrentState:
    if not config.has_recurrent_form:
        raise NoRecurrentFormError(f"{config.kind} has no recurrent form (softmax is not separable)")
    acc = torch.zeros(batch, config.n_heads, config.phi_dim, config.head_v, dtype=torch.float64)
    norm = None
    if config.kind not in fm.RETENTION_KINDS:
        norm = torch.zeros(batch, config.n_heads, config.phi_dim, dtype=torch.float64)
    return RecurrentState(config.kind, acc, norm)


def mix_step(
    config: MixerConfig,
    weights: MixerWeights,
    state: RecurrentState,
    x: torch.Tensor,
    position: float,
) -> tuple[torch.Tensor, RecurrentState]:
    """Consume one token per batch item; returns the output and the next state.

    ``position`` is the token index for index kinds and the date offset in
    days for time kinds.  The input state is not modified.
    """
    if not config.has_recurrent_form:
        raise NoRecurrentFormError(f"{config.kind} has no recurrent form (softmax is not separable)")
    if state.kind != config.kind:
        raise ConfigurationError(f"state of kind {state.kind} fed to a {config.kind} mixer")
    position = float(position)
    if not math.isfinite(position):
        raise InvalidInputError("position must be finite")
    if state.step_count and position < state.last_position:
        raise OutOfOrderError(f"position {position} precedes last position {state.last_position}")
    unbatched = x.dim() == 1
    xb = (x[None] if unbatched else x).to(torch.float64)
    _check_width(config, xb)
    if xb.shape[0] != state.batch:
        raise DimensionError(f"batch of {xb.shape[0]} tokens for a state of batch {state.batch}")
    pos = torch.tensor([position], dtype=torch.float64)
    if config.is_time:
        pos = fm.check_positions(pos, config.max_span)
    q, k, v = _project(config, weights, xb[:, None, :])
    fq, fk = _features(config, q, k, pos)
    fq, fk, v = fq[:, :, 0], fk[:, :, 0], v[:, :, 0]
    update = fk[..., :, None] * v[..., None, :]
    if config.kind in fm.RETENTION_KINDS:
        delta = (position - state.last_position) if config.is_time else 1.0
        decay = torch.tensor([fm.decay_weight(g, delta) for g in config.gammas], dtype=torch.float64)
        acc = decay[None, :, None, None] * state.acc + update
        heads = torch.einsum("bhf,bhfv->bhv", fq, acc)
        out = retention_gate(heads.reshape(xb.shape[0], -1), xb, weights)
        norm = None
    else:
        acc = state.acc + update
        norm = state.norm + fk
        num = torch.einsum("bhf,bhfv->bhv", fq, acc)
        den = (fq * norm).sum(dim=-1, keepdim=True)
        out = (num / _stabilize(den)).reshape(xb.shape[0], -1)
    new_state = RecurrentState(config.kind, acc, norm, position, state.step_count + 1)
    out = out.to(x.dtype)
    return (out[0] if unbatched else out), new_state
