"""Multi-modal spectro-spatio-temporal backbone.

Each image goes through a modality-specific U-Net (``SpatialEncoder``) that
halves the resolution, every pixel's merged S1/S2 token sequence goes
through a stack of mixer blocks, and a pixel shuffle brings each step back
to full resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import featmaps as fm
from .errors import ConfigurationError, DimensionError, OutOfOrderError, SpanExceededError
from .mixers import MixerConfig, MixerWeights, RecurrentState, TokenSequence, mix_step, state_init

MODALITIES = ("S1", "S2")
DEFAULT_CHANNELS = {"S1": 2, "S2": 10}


@dataclass
class SSEConfig:
    in_channels: int
    d_model: int
    widths: tuple[int, ...] = (32, 64, 96, 128)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4:
            raise ConfigurationError("the spatial encoder has exactly four down-sampling blocks")


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GELU(),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GELU(),
    )


class SpatialEncoder(nn.Module):
    """U-Net with four down blocks and three up blocks: ``(N, C, H, W) -> (N, d_model, H/2, W/2)``."""

    def __init__(self, config: SSEConfig):
        super().__init__()
        self.config = config
        w1, w2, w3, w4 = config.widths
        self.down = nn.ModuleList(
            [_double_conv(config.in_channels, w1), _double_conv(w1, w2), _double_conv(w2, w3), _double_conv(w3, w4)]
        )
        # up block i consumes the upsampled deeper map and the matching skip
        self.up = nn.ModuleList([_double_conv(w4 + w4, w3), _double_conv(w3 + w3, w2), _double_conv(w2 + w2, w1)])
        self.head = nn.Conv2d(w1, config.d_model, 1)
        # He init keeps activations from shrinking through the 14 conv + GELU layers
        for module in self.modules():
            if isinstance(module, nn.Conv2d) and module.kernel_size == (3, 3):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise DimensionError(f"image sides must be divisible by 16, got {h}x{w}")
        if images.shape[-3] != self.config.in_channels:
            raise DimensionError(f"expected {self.config.in_channels} channels, got {images.shape[-3]}")
        skips = []
        x = images
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        # skips[0] lives at full resolution and is never reused: only three up blocks
        for block, skip in zip(self.up, reversed(skips[1:])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat((x, skip), dim=1))
        return self.head(x)


def sse_encode(encoder: SpatialEncoder, image: torch.Tensor, modality: str | None = None) -> torch.Tensor:
    """Encode one ``(C, H, W)`` image (or a stack) to half-resolution features."""
    if image.dim() == 3:
        return encoder(image[None])[0]
    return encoder(image)


def date_pe(tau, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of ``tau`` days, ``[sin, cos]`` interleaved per frequency."""
    if dim % 2:
        raise DimensionError(f"positional encoding width must be even, got {dim}")
    tau = torch.as_tensor(tau, dtype=torch.float64)
    freqs = 1.0 / 10000 ** (2 * torch.arange(dim // 2, dtype=torch.float64) / dim)
    angles = tau[..., None] * freqs
    return torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).flatten(-2)


@dataclass
class MergedOrder:
    """Chronological interleaving of two modalities.

    ``entries[i] = (modality, index_within_modality, date)``.
    """

    entries: list[tuple[str, int, float]]

    @property
    def dates(self) -> torch.Tensor:
        return torch.tensor([e[2] for e in self.entries], dtype=torch.float64)

    @property
    def modality(self) -> tuple[str, ...]:
        return tuple(e[0] for e in self.entries)

    @property
    def positions(self) -> torch.Tensor:
        d = self.dates
        return d - d[0]

    def __len__(self) -> int:
        return len(self.entries)


def _check_increasing(dates, name: str) -> None:
    for a, b in zip(dates, dates[1:]):
        if not b > a:
            raise OutOfOrderError(f"{name} dates must be strictly increasing ({a} then {b})")


def merge_order(s1_dates, s2_dates) -> MergedOrder:
    """Merge by date; at equal dates S2 comes before S1."""
    s1_dates = [float(d) for d in s1_dates]
    s2_dates = [float(d) for d in s2_dates]
    _check_increasing(s1_dates, "S1")
    _check_increasing(s2_dates, "S2")
    if not s1_dates and not s2_dates:
        raise DimensionError("at least one acquisition is required")
    tagged = [(d, 1, "S1", i) for i, d in enumerate(s1_dates)] + [(d, 0, "S2", i) for i, d in enumerate(s2_dates)]
    tagged.sort(key=lambda e: (e[0], e[1]))
    return MergedOrder([(m, i, d) for d, _, m, i in tagged])


class TokenAssembler(nn.Module):
    """Projects ``[feature; date_pe(tau); modality embedding]`` back to ``d_model``."""

    def __init__(self, d_model: int, pe_dim: int = 32, mod_dim: int = 16):
        super().__init__()
        self.pe_dim = pe_dim
        self.modality_embedding = nn.Parameter(torch.randn(len(MODALITIES), mod_dim) * 0.1)
        self.proj = nn.Linear(d_model + pe_dim + mod_dim, d_model)

    def forward(self, features: torch.Tensor, dates: torch.Tensor, modality: tuple[str, ...]) -> torch.Tensor:
        """``features`` is ``(T, d, h, w)``; returns per-pixel tokens ``(h*w, T, d)``."""
        t, d, h, w = features.shape
        feats = features.permute(2, 3, 0, 1).reshape(h * w, t, d)
        pe = date_pe(dates, self.pe_dim).to(feats.dtype)
        mod = self.modality_embedding[[MODALITIES.index(m) for m in modality]]
        extra = torch.cat((pe, mod), dim=-1).expand(h * w, t, -1)
        return self.proj(torch.cat((feats, extra), dim=-1))


def assemble_tokens(
    assembler: TokenAssembler,
    feat_s1: list,
    feat_s2: list,
    max_span: float | None = None,
) -> tuple[TokenSequence, MergedOrder]:
    """Merge per-modality ``(date, feature_map)`` lists into one token sequence per pixel.

    Positions are days since the earliest acquisition.  With ``max_span``
    set (time kinds), a merged span beyond it raises ``SpanExceededError``.
    """
    order = merge_order([d for d, _ in feat_s1], [d for d, _ in feat_s2])
    maps = {"S1": [m for _, m in feat_s1], "S2": [m for _, m in feat_s2]}
    features = torch.stack([maps[m][i] for m, i, _ in order.entries])
    pos = order.positions
    if max_span is not None and float(pos[-1]) > max_span * (1 + fm.SPAN_SLACK):
        raise SpanExceededError(f"merged sequence spans {float(pos[-1])} days, more than {max_span}")
    tokens = assembler(features, order.dates, order.modality)
    return TokenSequence(tokens, pos, order.modality), order


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, mult: int = 4):
        super().__init__(nn.Linear(d_model, mult * d_model), nn.GELU(), nn.Linear(mult * d_model, d_model))


class FusionBlock(nn.Module):
    """Pre-norm residual mixer followed by a pre-norm residual feed-forward."""

    def __init__(self, mixer_config: MixerConfig, generator: torch.Generator, ffn_mult: int = 4):
        super().__init__()
        d = mixer_config.d_model
        self.norm1 = nn.LayerNorm(d)
        self.mixer = MixerWeights(mixer_config, generator)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult)

    def forward(self, seq: TokenSequence) -> torch.Tensor:
        x = seq.tokens
        h = x + self.mixer(self.norm1(x), seq.positions)
        return h + self.ffn(self.norm2(h))

    def step(self, state: RecurrentState, x: torch.Tensor, position: float):
        o, state = mix_step(self.mixer.config, self.mixer, state, self.norm1(x), position)
        h = x + o
        return h + self.ffn(self.norm2(h)), state


class FusionStack(nn.Module):
    def __init__(self, mixer_config: MixerConfig, n_layers: int, generator: torch.Generator, ffn_mult: int = 4):
        super().__init__()
        self.mixer_config = mixer_config
        self.blocks = nn.ModuleList([FusionBlock(mixer_config, generator, ffn_mult) for _ in range(n_layers)])

    def forward(self, seq: TokenSequence) -> torch.Tensor:
        x = seq.tokens
        for block in self.blocks:
            x = block(TokenSequence(x, seq.positions, seq.modality))
        return x

    def init_states(self, batch: int) -> list[RecurrentState]:
        return [state_init(self.mixer_config, batch) for _ in self.blocks]

    def step(self, states: list[RecurrentState], x: torch.Tensor, date_position: float, step_index: int):
        """One token per sequence; ``step_index`` is used as the position by index kinds."""
        position = date_position if self.mixer_config.is_time else float(step_index)
        new_states = []
        for block, state in zip(self.blocks, states):
            x, state = block.step(state, x, position)
            new_states.append(state)
        return x, new_states


def fusion_forward(stack: FusionStack, seq: TokenSequence) -> torch.Tensor:
    return stack(seq)


class PixelShuffleUp(nn.Module):
    """1x1 conv to ``4 d`` channels then depth-to-space: channel ``d*4 + 2*dy + dx`` -> subpixel ``(dy, dx)``."""

    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Conv2d(d_model, 4 * d_model, 1)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return F.pixel_shuffle(self.proj(y), 2)


def pixel_shuffle_up(module: PixelShuffleUp, y_t: torch.Tensor) -> torch.Tensor:
    if y_t.dim() == 3:
        return module(y_t[None])[0]
    return module(y_t)


@dataclass
class BackboneConfig:
    kind: str = "linear"
    d_model: int = 32
    d_k: int = 32
    n_heads: int = 4
    n_layers: int = 2
    sse_widths: tuple[int, ...] = (32, 64, 96, 128)
    in_channels: dict = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    modalities: tuple[str, ...] = MODALITIES
    pe_dim: int = 32
    mod_dim: int = 16
    ffn_mult: int = 4
    max_span: float | None = None

    def __post_init__(self):
        fm.check_kind(self.kind)
        self.sse_widths = tuple(self.sse_widths)
        self.modalities = tuple(self.modalities)
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigurationError(f"modalities must be a non-empty subset of {MODALITIES}")

    def mixer_config(self) -> MixerConfig:
        return MixerConfig.build(self.kind, self.d_model, self.d_k, self.n_heads, max_span=self.max_span)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sse_widths"] = list(self.sse_widths)
        d["modalities"] = list(self.modalities)
        return d


@dataclass
class BackboneOutput:
    y: torch.Tensor  # (T, d_model, H, W)
    order: MergedOrder


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.sse = nn.ModuleDict(
                {
                    m: SpatialEncoder(SSEConfig(config.in_channels[m], config.d_model, config.sse_widths))
                    for m in config.modalities
                }
            )
            self.assembler = TokenAssembler(config.d_model, config.pe_dim, config.mod_dim)
            self.fusion = FusionStack(config.mixer_config(), config.n_layers, gen, config.ffn_mult)
            self.upsample = PixelShuffleUp(config.d_model)

    @property
    def mixer_config(self) -> MixerConfig:
        return self.fusion.mixer_config

    def encode_modality(self, modality: str, images: torch.Tensor) -> torch.Tensor:
        return self.sse[modality](images)

    def forward(self, inputs: dict) -> BackboneOutput:
        """``inputs[m] = (dates, images (T_m, C_m, H, W))`` for each used modality."""
        feats = {}
        for m in MODALITIES:
            if m in self.config.modalities and m in inputs and len(inputs[m][0]):
                dates, images = inputs[m]
                maps = self.encode_modality(m, images)
                feats[m] = list(zip([float(d) for d in dates], maps))
            else:
                feats[m] = []
        max_span = self.mixer_config.max_span if self.mixer_config.is_time else None
        seq, order = assemble_tokens(self.assembler, feats["S1"], feats["S2"], max_span)
        fused = self.fusion(seq)
        t = len(order)
        _, h2, w2 = feats[order.entries[0][0]][0][1].shape
        grid = fused.reshape(h2, w2, t, -1).permute(2, 3, 0, 1)
        return BackboneOutput(self.upsample(grid), order)
