"""Task heads and their losses.

The forecaster works on single pixel vectors of the backbone output; it
never mixes information across time or space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import MODALITIES
from .errors import InvalidDeltaError, InvalidInputError
from .featmaps import RotaryBasis, rotary_apply

N_WEATHER_DAYS = 10
N_WEATHER_VARS = 8
N_CLASSES = 3
SOLAR_CLASS = 1
UNLABELED = 255


@dataclass
class ForecastAux:
    """Auxiliary inputs describing the acquisition to predict."""

    modality: str
    delta: float
    weather: torch.Tensor  # (n_w, d_w)
    angles: tuple[float, float] | None = None  # (azimuth, incidence) in radians, S1 only


class WeatherEncoder(nn.Module):
    """Cross-attention of ``n_q`` learnable queries over the past ``n_w`` days of weather."""

    def __init__(self, d_w: int = N_WEATHER_VARS, n_q: int = 4, d_k: int = 8):
        super().__init__()
        self.d_k = d_k
        self.queries = nn.Parameter(torch.randn(n_q, d_k) * 0.5)
        self.w_k = nn.Parameter(torch.randn(d_w, d_k) / d_w**0.5)
        self.w_v = nn.Parameter(torch.randn(d_w, d_w) / d_w**0.5)

    @property
    def out_dim(self) -> int:
        return self.queries.shape[0] * self.w_v.shape[1]

    def forward(self, weather: torch.Tensor) -> torch.Tensor:
        keys = weather @ self.w_k
        attn = torch.softmax(self.queries @ keys.transpose(-1, -2) / self.d_k, dim=-1)
        return (attn @ (weather @ self.w_v)).flatten(-2)


def encode_weather(weather: torch.Tensor, encoder: WeatherEncoder) -> torch.Tensor:
    weather = torch.as_tensor(weather)
    if bool(torch.isnan(weather).any()):
        raise InvalidInputError("weather series contains NaN")
    return encoder(weather.to(encoder.w_k.dtype))


class AngleEncoder(nn.Linear):
    def __init__(self, d_a: int = 16):
        super().__init__(3, d_a)

    def encode(self, phi, theta) -> torch.Tensor:
        phi = torch.as_tensor(phi, dtype=self.weight.dtype)
        theta = torch.as_tensor(theta, dtype=self.weight.dtype)
        feats = torch.stack((torch.cos(phi), torch.sin(phi), torch.cos(theta) * torch.sin(theta)), dim=-1)
        return self(feats)


def encode_s1_angles(phi, theta, encoder: AngleEncoder) -> torch.Tensor:
    return encoder.encode(phi, theta)


class Forecaster(nn.Module):
    """Shared per-pixel MLP with modality-specific output heads."""

    def __init__(self, d_model: int, channels: dict, mod_dim: int = 16, d_a: int = 16, n_q: int = 4):
        super().__init__()
        self.basis = RotaryBasis(d_model)
        self.modality_embedding = nn.Parameter(torch.randn(len(MODALITIES), mod_dim) * 0.1)
        self.s2_angle_placeholder = nn.Parameter(torch.zeros(d_a))
        self.weather = WeatherEncoder(n_q=n_q)
        self.angles = AngleEncoder(d_a)
        hidden = 2 * d_model
        self.mlp = nn.Sequential(
            nn.Linear(d_model + mod_dim + self.weather.out_dim + d_a, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
        )
        self.heads = nn.ModuleDict({m: nn.Linear(hidden, channels[m]) for m in MODALITIES if m in channels})

    def rope(self, y: torch.Tensor, delta) -> torch.Tensor:
        return rotary_apply(y, delta, self.basis).to(y.dtype)

    def aux_code(self, aux: ForecastAux) -> torch.Tensor:
        mod = self.modality_embedding[MODALITIES.index(aux.modality)]
        weather = encode_weather(aux.weather, self.weather)
        if aux.modality == "S1":
            if aux.angles is None:
                raise InvalidInputError("S1 targets need azimuth/incidence angles")
            angle = self.angles.encode(*aux.angles)
        else:
            angle = self.s2_angle_placeholder
        return torch.cat((mod, weather, angle))

    def hidden(self, y: torch.Tensor, aux: ForecastAux, validate: bool = True) -> torch.Tensor:
        if validate and not aux.delta > 0:
            raise InvalidDeltaError(f"forecast horizon must be positive, got {aux.delta}")
        code = self.aux_code(aux)
        code = code.expand(*y.shape[:-1], code.shape[-1])
        return self.mlp(torch.cat((self.rope(y, aux.delta), code), dim=-1))

    def forward(self, y: torch.Tensor, aux: ForecastAux, validate: bool = True) -> torch.Tensor:
        """``y`` is ``(..., d_model)``; returns ``(..., C)`` for ``aux.modality``."""
        return self.heads[aux.modality](self.hidden(y, aux, validate))


def forecast_step(y_t: torch.Tensor, aux: ForecastAux, forecaster: Forecaster) -> torch.Tensor:
    return forecaster(y_t, aux)


class LossResult(NamedTuple):
    loss: torch.Tensor
    parts: dict
    empty: bool


def masked_mse_loss(
    preds,
    targets,
    validity_masks,
    cloud_masks,
    modality_tags,
    step_indices=None,
    n_after: int = 6,
    w_s2: float = 0.1,
) -> LossResult:
    """``MSE_S1 + w_s2 * MSE_S2`` over valid, cloud-free entries of target steps ``>= n_after``.

    All arguments are per-target-step lists; ``preds[i]``/``targets[i]`` are
    ``(C, H, W)`` and masks ``(H, W)`` (``cloud_masks[i]`` may be ``None``).
    ``step_indices[i]`` is the merged-sequence index of target ``i``.
    """
    if step_indices is None:
        step_indices = range(len(preds))
    sums = {m: None for m in MODALITIES}
    counts = {m: 0 for m in MODALITIES}
    for pred, target, valid, cloud, mod, idx in zip(preds, targets, validity_masks, cloud_masks, modality_tags, step_indices):
        if idx < n_after:
            continue
        keep = valid.bool()
        if cloud is not None:
            keep = keep & ~cloud.bool()
        n = int(keep.sum())
        if n == 0:
            continue
        sq = ((pred - target) ** 2 * keep).sum()
        sums[mod] = sq if sums[mod] is None else sums[mod] + sq
        counts[mod] += n * pred.shape[0]
    ref = preds[0] if len(preds) else torch.zeros(())
    parts = {}
    total = torch.zeros((), dtype=ref.dtype)
    for mod, weight in (("S1", 1.0), ("S2", w_s2)):
        if counts[mod]:
            mse = sums[mod] / counts[mod]
            parts[f"mse_{mod.lower()}"] = mse
            total = total + weight * mse
    empty = not any(counts.values())
    if empty:
        warnings.warn("every target entry is masked; loss defined as 0", RuntimeWarning, stacklevel=2)
    parts["counts"] = counts
    return LossResult(total, parts, empty)


class SegmentationHead(nn.Linear):
    def __init__(self, d_model: int):
        super().__init__(d_model, N_CLASSES)


def segmentation_logits(y_t: torch.Tensor, head: SegmentationHead) -> torch.Tensor:
    return head(y_t)


def focal_loss(logits, labels, label_mask=None, alpha: float = 0.58, gamma: float = 2.0) -> LossResult:
    """Multi-class focal loss over labeled entries.

    ``logits`` is ``(N, 3)``; class weights are ``[1 - alpha, alpha, 1 - alpha]``
    so the solar class gets ``alpha``.
    """
    labels = torch.as_tensor(labels).long()
    if label_mask is None:
        label_mask = labels != UNLABELED
    label_mask = label_mask.bool()
    if not bool(label_mask.any()):
        warnings.warn("no labeled entries; focal loss defined as 0", RuntimeWarning, stacklevel=2)
        return LossResult(logits.sum() * 0.0, {"count": 0}, True)
    logits = logits[label_mask]
    labels = labels[label_mask]
    logp = F.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]
    weights = torch.tensor([1 - alpha, alpha, 1 - alpha], dtype=logits.dtype)[labels]
    loss = -(weights * (1 - logp.exp()) ** gamma * logp).mean()
    return LossResult(loss, {"count": int(label_mask.sum())}, False)
