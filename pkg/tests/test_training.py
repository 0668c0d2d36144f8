import io
import json
import zipfile

import numpy as np
import pytest
import torch

from dualform import featmaps as fm
from dualform import training as tr
from dualform.errors import ConfigurationError, FormatError, TrainingDivergedError
from dualform.synthdata import SyntheticSpec, generate_dataset

TINY = dict(d_model=8, d_k=8, n_heads=2, n_layers=1, sse_widths=[4, 4, 8, 8], pe_dim=8, mod_dim=4, ffn_mult=2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    spec = SyntheticSpec(height=16, width=16, duration_days=100, label_fraction=0.6)
    return generate_dataset(spec, tmp_path_factory.mktemp("data"), 6)


def _config(task="forecast", kind="linear", **kw):
    base = dict(task=task, kind=kind, epochs=1, batch_size=2, lr=2e-3, max_len=6, n_after=2, model=dict(TINY))
    base.update(kw)
    return tr.TrainConfig(**base)


def test_config_schema_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(task="forecast", kind="nope")
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(task="detect", kind="linear")
    with pytest.raises(ConfigurationError):
        tr.TrainConfig.from_dict({"task": "forecast", "kind": "linear", "lr": -1})
    with pytest.raises(ConfigurationError):
        tr.TrainConfig.from_dict({"task": "forecast", "kind": "linear", "unknown": 1})
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(task="forecast", kind="linear", model={"sse_widths": [4, 4]})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"task": "segmentation", "kind": "retention", "epochs": 3}))
    cfg = tr.TrainConfig.load(path)
    assert cfg.epochs == 3 and cfg.kind == "retention"


@pytest.mark.parametrize("kind", fm.KINDS)
def test_one_epoch_smoke_every_kind(dataset, kind, tmp_path):
    result = tr.train(_config(kind=kind), dataset, out_dir=tmp_path, metrics_path=tmp_path / "m.jsonl")
    assert len(result.metrics) == 1 and np.isfinite(result.metrics[0]["train_loss"])
    assert result.checkpoint.exists()


def test_segmentation_smoke_with_validation(dataset, tmp_path):
    result = tr.train(_config("segmentation", "time_retention", epochs=2, eval_every=1), dataset, metrics_path=tmp_path / "m.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert {"val_accuracy", "val_f1", "val_iou"} <= set(lines[-1])
    assert lines == result.metrics


def test_metrics_stream_is_deterministic(dataset, tmp_path):
    cfg = _config(epochs=2, eval_every=1)
    tr.train(cfg, dataset, metrics_path=tmp_path / "a.jsonl")
    tr.train(cfg, dataset, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_non_finite_loss_aborts_with_diagnostics(dataset, monkeypatch):
    monkeypatch.setattr(tr, "_model_loss", lambda model, window, config: torch.tensor(float("nan")))
    with pytest.raises(TrainingDivergedError) as info:
        tr.train(_config(), dataset)
    diag = info.value.diagnostics
    assert diag["epoch"] == 1 and diag["batch"] == 0
    assert diag["param_norms"] and all(np.isfinite(v) for v in diag["param_norms"].values())


def test_training_reduces_loss(dataset):
    # a fixed seed makes the window draws repeat, so late epochs see comparable batches
    result = tr.train(_config(epochs=12, lr=5e-3), dataset)
    losses = [r["train_loss"] for r in result.metrics]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_confusion_perfect():
    labels = np.array([0, 1, 2, 1, 255])
    m = tr.confusion_metrics(labels.copy(), labels)
    assert (m["accuracy"], m["f1"], m["iou"]) == (1.0, 1.0, 1.0)
    assert m["n"] == 4


def test_confusion_no_true_positive():
    m = tr.confusion_metrics(np.array([0, 0, 1]), np.array([1, 1, 0]))
    assert m["f1"] == 0.0 and m["iou"] == 0.0 and m["accuracy"] == 0.0


def test_confusion_one_of_each():
    # TP, FP, FN, TN once each with the positive class 1
    m = tr.confusion_metrics(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
    assert m["f1"] == pytest.approx(0.5)
    assert m["iou"] == pytest.approx(1 / 3)
    assert m["accuracy"] == pytest.approx(0.5)


def test_confusion_matches_enumeration():
    rng = np.random.default_rng(0)
    pred, lab = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    tp = sum(p == 1 and l == 1 for p, l in zip(pred, lab))
    fp = sum(p == 1 and l != 1 for p, l in zip(pred, lab))
    fn = sum(p != 1 and l == 1 for p, l in zip(pred, lab))
    m = tr.confusion_metrics(pred, lab)
    assert (m["tp"], m["fp"], m["fn"]) == (tp, fp, fn)
    assert m["f1"] == pytest.approx(2 * tp / (2 * tp + fp + fn))


@pytest.mark.parametrize("task", ["forecast", "segmentation"])
def test_checkpoint_roundtrip_is_bit_exact(dataset, task, tmp_path):
    result = tr.train(_config(task, "time_linroformer", epochs=1), dataset, out_dir=tmp_path)
    ckpt = tr.load_checkpoint(tmp_path)
    for (n1, a), (n2, b) in zip(result.model.state_dict().items(), ckpt.model.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    first = tr.evaluate(result.checkpoint, split="val")
    again = tr.evaluate(tr.load_checkpoint(result.checkpoint), dataset, "val")
    assert first == again


def test_checkpoint_file_objects(dataset):
    result = tr.train(_config(epochs=1), dataset)
    buf = io.BytesIO()
    backbone = result.model.backbone.config
    tr.save_checkpoint(buf, result.model, "forecast", backbone, step=5)
    buf.seek(0)
    ckpt = tr.load_checkpoint(buf)
    assert ckpt.step == 5 and ckpt.backbone == backbone


def test_checkpoint_format_errors(dataset, tmp_path):
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"not a zip at all")
    with pytest.raises(FormatError):
        tr.load_checkpoint(bad)
    other = tmp_path / "other.zip"
    with zipfile.ZipFile(other, "w") as zf:
        zf.writestr("manifest.json", json.dumps({"format": "something-else"}))
    with pytest.raises(FormatError):
        tr.load_checkpoint(other)
    result = tr.train(_config(epochs=1), dataset, out_dir=tmp_path / "ok")
    truncated = tmp_path / "trunc.zip"
    with zipfile.ZipFile(result.checkpoint) as src, zipfile.ZipFile(truncated, "w") as dst:
        for item in src.infolist():
            data = src.read(item)
            dst.writestr(item, data[:-4] if item.filename.startswith("params/") else data)
    with pytest.raises(FormatError):
        tr.load_checkpoint(truncated)


def test_evaluate_needs_a_dataset(dataset):
    result = tr.train(_config(epochs=1), tr.Manifest.load(dataset))
    with pytest.raises(ConfigurationError):
        tr.evaluate(tr.Checkpoint("forecast", result.model.backbone.config, result.model))


def test_forecast_evaluation_reports_baseline(dataset):
    result = tr.train(_config(epochs=1), dataset, out_dir=None)
    m = tr.evaluate_model(result.model, tr.Manifest.load(dataset).load_split("val"), 6, {"n_after": 2})
    assert m["counts"]["S2"] > 0 and m["counts"]["S1"] > 0
    assert m["baseline_mse_s2"] > 0 and np.isfinite(m["mse_s2"])


def test_grad_check_linear_head():
    r = tr.grad_check("linear_head", tolerance=1e-6)
    assert r["passed"], r


@pytest.mark.parametrize("selector", ["forecast", "segmentation"])
def test_grad_check_models(selector):
    r = tr.grad_check(selector, tolerance=1e-4, n_coords=60)
    assert r["passed"] and r["n_coords"] == 60, r


@pytest.mark.parametrize("kind", fm.KINDS)
def test_grad_check_mixers(kind):
    r = tr.grad_check(f"mixer:{kind}", tolerance=1e-4)
    assert r["passed"], r


def test_grad_check_catches_a_wrong_gradient(monkeypatch):
    real = torch.autograd.grad

    def corrupted(loss, params, **kw):
        return tuple(g * 1.01 for g in real(loss, params, **kw))

    monkeypatch.setattr(torch.autograd, "grad", corrupted)
    assert not tr.grad_check("linear_head", tolerance=1e-6, n_coords=20)["passed"]


def test_grad_check_unknown_selector():
    with pytest.raises(ConfigurationError):
        tr.grad_check("whole_world")
