"""Training, evaluation, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from .encoder import MODALITIES, BackboneConfig
from .errors import ConfigurationError, FormatError, TrainingDivergedError
from .featmaps import KINDS
from .heads import SOLAR_CLASS, UNLABELED
from .models import (
    TASKS,
    ForecastModel,
    SegmentationModel,
    Window,
    build_model,
    forecast_targets,
    make_window,
    window_starts,
)
from .synthdata import Manifest, MultiModalSample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dualform-checkpoint"
CHECKPOINT_VERSION = 1

TRAIN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "TrainConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "kind"],
    "properties": {
        "task": {"enum": list(TASKS)},
        "kind": {"enum": list(KINDS)},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "max_len": {"type": "integer", "minimum": 1},
        "w_s2": {"type": "number", "minimum": 0},
        "n_after": {"type": "integer", "minimum": 0},
        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
        "gamma": {"type": "number", "minimum": 0},
        "eval_every": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": {"type": "integer", "minimum": 2},
                "d_k": {"type": "integer", "minimum": 2},
                "n_heads": {"type": "integer", "minimum": 1},
                "n_layers": {"type": "integer", "minimum": 0},
                "sse_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 4, "maxItems": 4},
                "modalities": {"type": "array", "items": {"enum": list(MODALITIES)}, "minItems": 1, "uniqueItems": True},
                "pe_dim": {"type": "integer", "minimum": 2},
                "mod_dim": {"type": "integer", "minimum": 1},
                "ffn_mult": {"type": "integer", "minimum": 1},
                "max_span": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
    },
}


@dataclass
class TrainConfig:
    task: str
    kind: str
    epochs: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    max_len: int = 16
    w_s2: float = 0.1
    n_after: int = 6
    alpha: float = 0.58
    gamma: float = 2.0
    eval_every: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            jsonschema.validate(self.to_dict(), TRAIN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"invalid training config: {exc.message}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            jsonschema.validate(d, TRAIN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"invalid training config: {exc.message}") from None
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def backbone_config(self, channels: dict | None = None) -> BackboneConfig:
        kw = dict(self.model)
        if channels:
            kw["in_channels"] = channels
        return BackboneConfig(kind=self.kind, **kw)


# -- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    task: str
    backbone: BackboneConfig
    model: torch.nn.Module
    train_config: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    data: str | None = None  # manifest the model was trained on, when known


def _blob_name(path: str) -> str:
    return f"params/{path}.bin"


def save_checkpoint(
    path,
    model,
    task: str,
    backbone: BackboneConfig,
    train_config: dict | None = None,
    step: int = 0,
    seed: int = 0,
    data: str | None = None,
) -> Path:
    """Zip archive: ``manifest.json`` plus one little-endian float32 blob per parameter.

    ``path`` is a ``.zip`` file, a directory (receives ``checkpoint.zip``) or
    a writable binary file object.
    """
    if not hasattr(path, "write"):
        path = Path(path)
        if path.suffix != ".zip":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "checkpoint.zip"
    params = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            zf.writestr(_blob_name(name), arr.tobytes())
            params[name] = {"shape": list(arr.shape), "dtype": "<f4", "file": _blob_name(name)}
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "task": task,
            "mixer_kind": backbone.kind,
            "backbone": backbone.to_dict(),
            "train_config": train_config or {},
            "seeds": {"model": seed},
            "step": step,
            "data": data,
            "params": params,
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    """Inverse of :func:`save_checkpoint`; accepts a path or a readable binary file object."""
    if not hasattr(path, "read"):
        path = Path(path)
        if path.is_dir():
            path = path / "checkpoint.zip"
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"not a checkpoint archive: {exc}", 0) from None
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise FormatError("manifest is not a dualform checkpoint", 0)
        backbone = BackboneConfig(**manifest["backbone"])
        model = build_model(manifest["task"], backbone, manifest["seeds"]["model"])
        state = {}
        for name, meta in manifest["params"].items():
            raw = zf.read(meta["file"])
            expected = 4 * int(np.prod(meta["shape"], dtype=np.int64))
            if len(raw) != expected:
                raise FormatError(f"parameter {name!r} has {len(raw)} bytes, expected {expected}", len(raw))
            state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy())
        model.load_state_dict(state)
    return Checkpoint(
        manifest["task"], backbone, model, manifest["train_config"], manifest["step"], manifest["seeds"]["model"], manifest.get("data")
    )


# -- metrics ---------------------------------------------------------------


def confusion_metrics(pred: np.ndarray, labels: np.ndarray, positive: int = SOLAR_CLASS) -> dict:
    """Accuracy over all classes plus binary F1/IoU of ``positive``, ignoring unlabeled entries."""
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    keep = labels != UNLABELED
    pred, labels = pred[keep], labels[keep]
    tp = int(((pred == positive) & (labels == positive)).sum())
    fp = int(((pred == positive) & (labels != positive)).sum())
    fn = int(((pred != positive) & (labels == positive)).sum())
    n = len(labels)
    acc = float((pred == labels).mean()) if n else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    iou = tp / (tp + fp + fn) if (tp + fp + fn) else 0.0
    return {"accuracy": acc, "f1": f1, "iou": iou, "tp": tp, "fp": fp, "fn": fn, "n": n}


def _eval_windows(samples, max_len, modalities):
    for sample in samples:
        for start in window_starts(sample, max_len, modalities):
            yield make_window(sample, start, max_len, modalities)


def _baseline_prediction(window: Window, modality: str, within: int) -> torch.Tensor:
    """Per-pixel last valid (cloud-free) earlier observation of the same modality."""
    s = window.series[modality]
    ok = s.valid if s.cloud is None else s.valid & ~s.cloud
    pred = None
    for i in range(within):
        img = s.images[i]
        if pred is None:
            fill = img[:, ok[i]].mean(dim=1) if bool(ok[i].any()) else torch.zeros(img.shape[0], dtype=img.dtype)
            pred = fill[:, None, None].expand_as(img).clone()
        pred = torch.where(ok[i][None], img, pred)
    if pred is None:
        return torch.zeros_like(s.images[within])
    return pred


@torch.no_grad()
def evaluate_forecast(model: ForecastModel, samples, max_len: int, n_after: int = 6, w_s2: float = 0.1) -> dict:
    """Masked MSE of the model and of the copy-last-same-modality baseline on identical entries."""
    sums = {k: {m: 0.0 for m in MODALITIES} for k in ("model", "baseline")}
    counts = {m: 0 for m in MODALITIES}
    modalities = model.backbone.config.modalities
    for window in _eval_windows(samples, max_len, modalities):
        out = model.backbone(window.inputs())
        for t in forecast_targets(out.order, n_after):
            s = window.series[t.modality]
            keep = s.valid[t.within]
            if s.cloud is not None:
                keep = keep & ~s.cloud[t.within]
            if not bool(keep.any()):
                continue
            target = s.images[t.within].double()
            pred = model.predict(out.y[t.index - 1], model.aux_for(window, t)).double()
            base = _baseline_prediction(window, t.modality, t.within).double()
            sums["model"][t.modality] += float((((pred - target) ** 2) * keep).sum())
            sums["baseline"][t.modality] += float((((base - target) ** 2) * keep).sum())
            counts[t.modality] += int(keep.sum()) * target.shape[0]
    metrics = {}
    for who in ("model", "baseline"):
        mse = {m: (sums[who][m] / counts[m] if counts[m] else None) for m in MODALITIES}
        loss = (mse["S1"] or 0.0) + w_s2 * (mse["S2"] or 0.0)
        prefix = "" if who == "model" else "baseline_"
        metrics[f"{prefix}mse_s1"] = mse["S1"]
        metrics[f"{prefix}mse_s2"] = mse["S2"]
        metrics[f"{prefix}loss"] = loss
    metrics["counts"] = counts
    return metrics


@torch.no_grad()
def evaluate_segmentation(model: SegmentationModel, samples, max_len: int) -> dict:
    preds, labels = [], []
    modalities = model.backbone.config.modalities
    for window in _eval_windows(samples, max_len, modalities):
        out = model.backbone(window.inputs())
        for j, lab in model.labeled_steps(window, out.order):
            preds.append(model.logits(out.y[j]).argmax(dim=0).numpy())
            labels.append(lab.numpy())
    if not preds:
        return confusion_metrics(np.zeros(0), np.zeros(0))
    return confusion_metrics(np.concatenate([p.ravel() for p in preds]), np.concatenate([l.ravel() for l in labels]))


def evaluate_model(model, samples, max_len: int, train_config: dict | None = None) -> dict:
    cfg = train_config or {}
    model.eval()
    if model.task == "forecast":
        return evaluate_forecast(model, samples, max_len, cfg.get("n_after", 6), cfg.get("w_s2", 0.1))
    return evaluate_segmentation(model, samples, max_len)


def evaluate(checkpoint, manifest=None, split: str = "test") -> dict:
    """Load a checkpoint and evaluate it on one split of a dataset manifest.

    Without ``manifest`` the dataset recorded in the checkpoint is used.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if manifest is None:
        if not ckpt.data:
            raise ConfigurationError("checkpoint records no dataset; pass a manifest")
        manifest = ckpt.data
    manifest = manifest if isinstance(manifest, Manifest) else Manifest.load(manifest)
    channels = {"S1": manifest.spec.c_s1, "S2": manifest.spec.c_s2}
    for m in ckpt.backbone.modalities:
        if ckpt.backbone.in_channels[m] != channels[m]:
            raise ConfigurationError(f"checkpoint expects {ckpt.backbone.in_channels[m]} {m} channels, data has {channels[m]}")
    max_len = ckpt.train_config.get("max_len", 16)
    metrics = evaluate_model(ckpt.model, manifest.load_split(split), max_len, ckpt.train_config)
    metrics["split"] = split
    return metrics


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    metrics: list
    checkpoint: Path | None = None


def _train_window(sample: MultiModalSample, config: TrainConfig, modalities, rng: np.random.Generator) -> Window:
    ref = sample.s2_dates if "S2" in modalities else sample.s1_dates
    hi = max(1, len(ref) - config.max_len // 2)
    start = float(ref[int(rng.integers(0, hi))])
    return make_window(sample, start, config.max_len, modalities)


def _model_loss(model, window: Window, config: TrainConfig):
    if config.task == "forecast":
        return model(window, n_after=config.n_after, w_s2=config.w_s2)[0].loss
    return model(window, alpha=config.alpha, gamma=config.gamma)[0].loss


def _param_norms(model) -> dict:
    return {name: float(p.detach().norm()) for name, p in model.named_parameters()}


def train(config: TrainConfig, manifest, out_dir=None, metrics_path=None) -> TrainResult:
    """Mini-batch Adam on the training split; optional periodic validation.

    Deterministic for a given config in single-threaded mode.
    """
    data_ref = None if isinstance(manifest, Manifest) else str(Path(manifest).resolve())
    manifest = manifest if isinstance(manifest, Manifest) else Manifest.load(manifest)
    channels = {"S1": manifest.spec.c_s1, "S2": manifest.spec.c_s2}
    backbone = config.backbone_config(channels)
    model = build_model(config.task, backbone, config.seed)
    train_samples = manifest.load_split("train")
    val_samples = manifest.load_split("val") if config.eval_every else []
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(config.seed)
    history = []
    sink = open(metrics_path, "w") if metrics_path else None
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = rng.permutation(len(train_samples))
            losses = []
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                batch = order[lo : lo + config.batch_size]
                opt.zero_grad()
                total = 0.0
                for i in batch:
                    window = _train_window(train_samples[i], config, backbone.modalities, rng)
                    loss = _model_loss(model, window, config)
                    if not torch.isfinite(loss):
                        raise TrainingDivergedError(
                            f"non-finite loss at epoch {epoch}, batch {b}",
                            {"epoch": epoch, "batch": b, "param_norms": _param_norms(model)},
                        )
                    if loss.requires_grad:  # windows without any unmasked target carry no signal
                        (loss / len(batch)).backward()
                    total += float(loss.detach())
                opt.step()
                step += 1
                losses.append(total / len(batch))
            record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
                val = evaluate_model(model, val_samples, config.max_len, config.to_dict())
                if config.task == "forecast":
                    record.update(val_loss=val["loss"], val_mse_s1=val["mse_s1"], val_mse_s2=val["mse_s2"])
                else:
                    record.update(val_accuracy=val["accuracy"], val_f1=val["f1"], val_iou=val["iou"])
            history.append(record)
            log.info("epoch %d %s", epoch, record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = save_checkpoint(out_dir, model, config.task, backbone, config.to_dict(), step, config.seed, data_ref)
    model.eval()
    return TrainResult(model, history, ckpt_path)


# -- gradient checks -------------------------------------------------------


def _toy_sample(h: int = 16, n_s1: int = 2, n_s2: int = 2, seed: int = 0) -> MultiModalSample:
    from .synthdata import SyntheticSpec, generate_sample

    spec = SyntheticSpec(height=h, width=h, cloud_prob=0.5, swath_gap_prob=0.5, label_fraction=1.0, seed=seed)
    full = generate_sample(spec, seed)
    s1 = np.arange(min(n_s1, len(full.s1_dates)))
    s2 = np.arange(min(n_s2, len(full.s2_dates)))
    full.s1_dates, full.s1_images, full.s1_valid = full.s1_dates[s1], full.s1_images[s1], full.s1_valid[s1]
    full.s1_angles, full.s1_weather = full.s1_angles[s1], full.s1_weather[s1]
    full.s2_dates, full.s2_images, full.s2_valid = full.s2_dates[s2], full.s2_images[s2], full.s2_valid[s2]
    full.s2_cloud, full.s2_weather = full.s2_cloud[s2], full.s2_weather[s2]
    keep = np.isin(full.label_dates, full.s2_dates)
    full.label_dates, full.labels = full.label_dates[keep], full.labels[keep]
    return full


TOY_BACKBONE = dict(d_model=8, d_k=8, n_heads=2, n_layers=1, sse_widths=(4, 4, 8, 8), pe_dim=8, mod_dim=4, ffn_mult=2)


def _toy_loss_fn(selector: str, seed: int, kind: str = "linear"):
    """Return ``(named parameters, closure)`` for a float64 toy problem."""
    torch.manual_seed(seed)
    if selector == "linear_head":
        from .heads import SegmentationHead, focal_loss

        head = SegmentationHead(8).double()
        y = torch.randn(64, 8, dtype=torch.float64)
        labels = torch.randint(0, 3, (64,))
        return list(head.named_parameters()), lambda: focal_loss(head(y), labels, gamma=0.0).loss
    if selector.startswith("mixer:"):
        from .mixers import MixerConfig, MixerWeights, TokenSequence, mix_parallel

        cfg = MixerConfig.build(selector.split(":", 1)[1], 8, n_heads=2, max_span=2000.0)
        w = MixerWeights(cfg, torch.Generator().manual_seed(seed)).double()
        x = torch.randn(3, 6, 8, dtype=torch.float64)
        pos = torch.cumsum(torch.randint(1, 30, (6,)), 0).double()
        pos = pos - pos[0]
        target = torch.randn(3, 6, 8, dtype=torch.float64)
        return list(w.named_parameters()), lambda: ((mix_parallel(cfg, w, TokenSequence(x, pos)) - target) ** 2).mean()
    if selector not in TASKS:
        raise ConfigurationError(f"unknown gradient-check selector {selector!r}")
    sample = _toy_sample(seed=seed)
    model = build_model(selector, BackboneConfig(kind=kind, **TOY_BACKBONE), seed).double()
    window = make_window(sample, float(min(sample.s1_dates[0], sample.s2_dates[0])), 8, dtype=torch.float64)
    if selector == "forecast":
        return list(model.named_parameters()), lambda: model(window, n_after=1)[0].loss
    return list(model.named_parameters()), lambda: model(window)[0].loss


class BranchRecorder(TorchFunctionMode):
    """Record every data-dependent branch taken in a forward pass.

    Comparison masks (``u > 0`` inside ``psi``) and max-pool winners are
    the only places where the loss is not smooth.  Two passes with equal
    signatures lie on the same smooth piece, where central differences
    are a valid oracle.
    """

    _COMPARE = {torch.gt, torch.lt, torch.ge, torch.le, torch.Tensor.__gt__, torch.Tensor.__lt__, torch.Tensor.__ge__, torch.Tensor.__le__, torch.Tensor.gt, torch.Tensor.lt, torch.Tensor.ge, torch.Tensor.le}

    def __init__(self):
        super().__init__()
        self.branches = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        if func in self._COMPARE and isinstance(out, torch.Tensor):
            self.branches.append(out.detach().clone())
        elif getattr(func, "__name__", "") == "max_pool2d":
            self.branches.append(F.max_pool2d(*args, **{**kwargs, "return_indices": True})[1])
        return out

    def signature(self) -> list:
        return self.branches


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def _evaluate_recorded(closure):
    with torch.no_grad(), BranchRecorder() as rec:
        value = float(closure())
    return value, rec.signature()


MIXER_FD_STEP = 1e-4
MODEL_FD_STEP = 1e-3
HEAD_FD_STEP = 1e-5  # the head alone is smooth, so a small stencil is safe


def grad_check(selector: str = "forecast", tolerance: float = 1e-4, n_coords: int = 100, step: float | None = None, seed: int = 0, kind: str | None = None) -> dict:
    """Compare autograd gradients with central finite differences on random coordinates.

    ``selector`` is ``forecast``, ``segmentation``, ``linear_head`` or
    ``mixer:<kind>``.  ``kind`` overrides the backbone mixer for full models.
    Relative error is ``|g - fd| / max(|g|, |fd|, 1e-8)``.

    A coordinate whose ``+-step`` perturbation flips a branch (a ``psi``
    piece or a max-pool winner) is not smooth over the stencil; it is
    counted in ``n_kink_skipped`` and replaced by a fresh coordinate.
    """
    if step is None:
        if selector == "linear_head":
            step = HEAD_FD_STEP
        else:
            step = MIXER_FD_STEP if selector.startswith("mixer:") else MODEL_FD_STEP
    named, closure = _toy_loss_fn(selector, seed, kind or "linear")
    params = [p for _, p in named]
    for p in params:
        p.grad = None
    loss = closure()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    _, base_sig = _evaluate_recorded(closure)
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    bounds = np.cumsum(sizes)
    candidates = np.random.default_rng(seed).permutation(total)
    per_tensor = {}
    worst = 0.0
    checked = skipped = 0
    with torch.no_grad():
        for f in candidates:
            if checked >= n_coords:
                break
            t = int(np.searchsorted(bounds, f, side="right"))
            local = int(f - (bounds[t - 1] if t else 0))
            name, p = named[t]
            view = p.view(-1)
            orig = view[local].item()
            view[local] = orig + step
            plus, sig_plus = _evaluate_recorded(closure)
            view[local] = orig - step
            minus, sig_minus = _evaluate_recorded(closure)
            view[local] = orig
            if not (_same_branches(base_sig, sig_plus) and _same_branches(base_sig, sig_minus)):
                skipped += 1
                continue
            fd = (plus - minus) / (2 * step)
            g = float(grads[t].reshape(-1)[local])
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
            per_tensor[name] = max(per_tensor.get(name, 0.0), rel)
            worst = max(worst, rel)
            checked += 1
    return {
        "selector": selector,
        "n_coords": checked,
        "n_kink_skipped": skipped,
        "max_rel_err": worst,
        "tolerance": tolerance,
        "step": step,
        "passed": worst < tolerance and checked >= min(n_coords, total),
        "per_tensor": per_tensor,
    }
