"""Task models (backbone + head) and the windowing of samples into model inputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .encoder import MODALITIES, Backbone, BackboneConfig, BackboneOutput, MergedOrder
from .errors import ConfigurationError
from .heads import (
    UNLABELED,
    ForecastAux,
    Forecaster,
    LossResult,
    SegmentationHead,
    focal_loss,
    masked_mse_loss,
)
from .synthdata import MultiModalSample

TASKS = ("forecast", "segmentation")


@dataclass
class ModalitySeries:
    dates: np.ndarray  # absolute days, strictly increasing
    images: torch.Tensor  # (T, C, H, W)
    valid: torch.Tensor  # (T, H, W) bool
    cloud: torch.Tensor | None  # (T, H, W) bool, S2 only
    weather: torch.Tensor  # (T, n_w, d_w)
    angles: torch.Tensor | None  # (T, 2), S1 only

    def __len__(self) -> int:
        return len(self.dates)


@dataclass
class Window:
    """A contiguous slice of a sample, ready for the model."""

    series: dict  # modality -> ModalitySeries
    labels: dict = field(default_factory=dict)  # S2 date -> (H, W) int64 label map

    def inputs(self) -> dict:
        return {m: (s.dates, s.images) for m, s in self.series.items() if len(s)}

    def acquisition(self, modality: str, index: int) -> dict:
        s = self.series[modality]
        return {
            "modality": modality,
            "date": float(s.dates[index]),
            "image": s.images[index],
            "valid": s.valid[index],
            "cloud": None if s.cloud is None else s.cloud[index],
            "weather": s.weather[index],
            "angles": None if s.angles is None else tuple(float(a) for a in s.angles[index]),
        }


def _series(sample: MultiModalSample, modality: str, idx: np.ndarray, dtype) -> ModalitySeries:
    if modality == "S1":
        return ModalitySeries(
            sample.s1_dates[idx],
            torch.from_numpy(sample.s1_images[idx]).to(dtype),
            torch.from_numpy(sample.s1_valid[idx]),
            None,
            torch.from_numpy(sample.s1_weather[idx]).to(dtype),
            torch.from_numpy(sample.s1_angles[idx]).to(dtype),
        )
    return ModalitySeries(
        sample.s2_dates[idx],
        torch.from_numpy(sample.s2_images[idx]).to(dtype),
        torch.from_numpy(sample.s2_valid[idx]),
        torch.from_numpy(sample.s2_cloud[idx]),
        torch.from_numpy(sample.s2_weather[idx]).to(dtype),
        None,
    )


def make_window(
    sample: MultiModalSample,
    start_day: float,
    max_len: int,
    modalities=MODALITIES,
    dtype=torch.float32,
    max_days: float | None = None,
) -> Window:
    """Up to ``max_len`` acquisitions per modality dated at or after ``start_day``.

    With both modalities, the window ends at the earlier of the two last
    dates so neither modality's tail dangles alone.  ``max_days`` further
    caps the span.
    """
    picks = {}
    for m in modalities:
        dates = sample.s1_dates if m == "S1" else sample.s2_dates
        idx = np.flatnonzero(dates >= start_day)[:max_len]
        if max_days is not None:
            idx = idx[dates[idx] <= start_day + max_days]
        picks[m] = (dates, idx)
    ends = [dates[idx[-1]] for dates, idx in picks.values() if len(idx)]
    if len(picks) > 1 and len(ends) == len(picks):
        end = min(ends)
        picks = {m: (d, i[d[i] <= end]) for m, (d, i) in picks.items()}
    series = {m: _series(sample, m, idx, dtype) for m, (_, idx) in picks.items()}
    labels = {}
    if "S2" in series:
        s2_dates = set(series["S2"].dates.tolist())
        for k, day in enumerate(sample.label_dates.tolist()):
            if day in s2_dates:
                labels[float(day)] = torch.from_numpy(sample.labels[k].astype(np.int64))
    return Window(series, labels)


def window_starts(sample: MultiModalSample, max_len: int, modalities=MODALITIES) -> list[float]:
    """Start days of consecutive non-overlapping evaluation windows."""
    ref = sample.s2_dates if "S2" in modalities else sample.s1_dates
    return [float(ref[i]) for i in range(0, max(1, len(ref) - max_len // 2), max_len)]


@dataclass
class Target:
    index: int  # merged index of the predicted acquisition
    modality: str
    within: int  # index inside its modality series
    delta: float


def forecast_targets(order: MergedOrder, n_after: int) -> list[Target]:
    """Next-acquisition targets with merged index ``>= n_after`` and a positive horizon.

    Pairs acquired on the same day (horizon 0) are skipped: the horizon must be positive.
    """
    targets = []
    for j in range(max(1, n_after), len(order)):
        delta = order.entries[j][2] - order.entries[j - 1][2]
        if delta > 0:
            targets.append(Target(j, order.entries[j][0], order.entries[j][1], delta))
    return targets


def _pixels(y: torch.Tensor) -> torch.Tensor:
    """``(d, H, W) -> (H*W, d)``."""
    return y.flatten(1).transpose(0, 1)


class ForecastModel(nn.Module):
    task = "forecast"

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.backbone = Backbone(config, seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed + 1)
            self.head = Forecaster(config.d_model, {m: config.in_channels[m] for m in config.modalities}, config.mod_dim)

    def aux_for(self, window: Window, target: Target) -> ForecastAux:
        acq = window.acquisition(target.modality, target.within)
        return ForecastAux(target.modality, target.delta, acq["weather"], acq["angles"])

    def predict(self, y_src: torch.Tensor, aux: ForecastAux) -> torch.Tensor:
        """Forecast from one ``(d, H, W)`` backbone step; returns ``(C, H, W)``."""
        d, h, w = y_src.shape
        return self.head(_pixels(y_src), aux).transpose(0, 1).reshape(-1, h, w)

    def forward(self, window: Window, n_after: int = 6, w_s2: float = 0.1, out: BackboneOutput | None = None):
        out = out or self.backbone(window.inputs())
        targets = forecast_targets(out.order, n_after)
        preds, tgts, valid, cloud, mods, idx = [], [], [], [], [], []
        for t in targets:
            s = window.series[t.modality]
            preds.append(self.predict(out.y[t.index - 1], self.aux_for(window, t)))
            tgts.append(s.images[t.within])
            valid.append(s.valid[t.within])
            cloud.append(None if s.cloud is None else s.cloud[t.within])
            mods.append(t.modality)
            idx.append(t.index)
        result = masked_mse_loss(preds, tgts, valid, cloud, mods, idx, n_after=n_after, w_s2=w_s2)
        return result, preds, targets


class SegmentationModel(nn.Module):
    task = "segmentation"

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.backbone = Backbone(config, seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed + 1)
            self.head = SegmentationHead(config.d_model)

    def logits(self, y: torch.Tensor) -> torch.Tensor:
        """``(d, H, W) -> (3, H, W)``."""
        d, h, w = y.shape
        return self.head(_pixels(y)).transpose(0, 1).reshape(-1, h, w)

    def labeled_steps(self, window: Window, order: MergedOrder) -> list[tuple[int, torch.Tensor]]:
        return [
            (j, window.labels[date]) for j, (m, _, date) in enumerate(order.entries) if m == "S2" and date in window.labels
        ]

    def forward(self, window: Window, alpha: float = 0.58, gamma: float = 2.0, out: BackboneOutput | None = None):
        out = out or self.backbone(window.inputs())
        steps = self.labeled_steps(window, out.order)
        if not steps:  # windows without a labeled date are common and carry no signal
            return LossResult(out.y.sum() * 0.0, {"count": 0}, True), [], []
        logits = [self.logits(out.y[j]) for j, _ in steps]
        labels = [lab for _, lab in steps]
        flat_logits = torch.cat([l.flatten(1).transpose(0, 1) for l in logits])
        flat_labels = torch.cat([lab.flatten() for lab in labels])
        result = focal_loss(flat_logits, flat_labels, flat_labels != UNLABELED, alpha, gamma)
        return result, logits, labels


def build_model(task: str, config: BackboneConfig, seed: int = 0) -> nn.Module:
    if task == "forecast":
        return ForecastModel(config, seed)
    if task == "segmentation":
        return SegmentationModel(config, seed)
    raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
