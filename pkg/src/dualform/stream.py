"""Incremental inference: one acquisition in, one prediction out, constant memory.

Also hosts the latency benchmark contrasting recurrent steps with full
causal-transformer recomputation.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import random
import statistics
import time
import zipfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import featmaps as fm
from .errors import ConfigurationError, FormatError, NoRecurrentFormError, OutOfOrderError, SpanExceededError
from .heads import ForecastAux
from .mixers import DEFAULT_INDEX_SPAN, MixerConfig, MixerWeights, RecurrentState, TokenSequence, mix_parallel, mix_step, state_init
from .training import Checkpoint, load_checkpoint, save_checkpoint

SESSION_FORMAT = "dualform-session"
SESSION_VERSION = 1


@dataclass
class Acquisition:
    modality: str
    date: float
    image: torch.Tensor  # (C, H, W)
    valid: torch.Tensor | None = None
    cloud: torch.Tensor | None = None
    weather: torch.Tensor | None = None
    angles: tuple[float, float] | None = None

    @classmethod
    def coerce(cls, acq) -> "Acquisition":
        if isinstance(acq, cls):
            return acq
        if isinstance(acq, dict):
            return cls(**{k: acq.get(k) for k in ("modality", "date", "image", "valid", "cloud", "weather", "angles")})
        modality, date, image, *rest = acq
        return cls(modality, date, image, *rest)

    def forecast_aux(self, delta: float) -> ForecastAux:
        return ForecastAux(self.modality, delta, self.weather, self.angles)


@dataclass
class StreamOutput:
    step: int
    date: float
    modality: str
    y: torch.Tensor  # (d_model, H, W) backbone output of this step
    segmentation: torch.Tensor | None = None  # (3, H, W) logits
    forecast: torch.Tensor | None = None  # (C, H, W) prediction of the next acquisition

    def labels(self) -> torch.Tensor:
        if self.segmentation is None:
            raise ConfigurationError("session was not opened for segmentation")
        return self.segmentation.argmax(dim=0)


@dataclass
class StreamSession:
    checkpoint: Checkpoint
    task: str
    states: list  # one RecurrentState per fusion layer, batch = (H/2)*(W/2)
    grid: tuple[int, int] | None = None
    origin: float | None = None
    last_date: float | None = None
    last_modality: str | None = None
    step: int = 0
    last_y: torch.Tensor | None = None
    checkpoint_path: str | None = None
    history: list = field(default_factory=list)  # (date, modality) of everything ingested

    @property
    def model(self):
        return self.checkpoint.model

    @property
    def mixer_config(self) -> MixerConfig:
        return self.model.backbone.mixer_config

    @property
    def state_bytes(self) -> int:
        return sum(s.nbytes for s in self.states)

    def state_bytes_per_pixel(self) -> int:
        return state_bytes_formula(self.mixer_config, len(self.states))


def state_bytes_formula(config: MixerConfig, n_layers: int) -> int:
    """Recurrent memory per pixel: ``n_layers * n_heads * (phi * d_v/n_heads + phi)`` doubles.

    Retention keeps no normalizer, so its ``+ phi`` term vanishes.
    """
    norm = 0 if config.kind in fm.RETENTION_KINDS else config.phi_dim
    return n_layers * config.n_heads * (config.phi_dim * config.head_v + norm) * 8


def session_open(checkpoint, task: str | None = None) -> StreamSession:
    path = None
    if not isinstance(checkpoint, Checkpoint):
        path = str(checkpoint)
        checkpoint = load_checkpoint(checkpoint)
    task = task or checkpoint.task
    if task != checkpoint.task:
        raise ConfigurationError(f"checkpoint holds a {checkpoint.task} model, not {task}")
    config = checkpoint.model.backbone.mixer_config
    if not config.has_recurrent_form:
        raise NoRecurrentFormError(f"{config.kind} has no recurrent form; streaming needs a dual-form kind")
    checkpoint.model.eval()
    return StreamSession(checkpoint, task, [], checkpoint_path=path)


def _validate_order(session: StreamSession, acq: Acquisition) -> None:
    if acq.modality not in session.model.backbone.config.modalities:
        raise ConfigurationError(f"model was not built for modality {acq.modality}")
    if session.last_date is None:
        return
    if acq.date < session.last_date:
        raise OutOfOrderError(f"acquisition dated {acq.date} arrives after {session.last_date}")
    if acq.date == session.last_date:
        # batch order puts S2 before S1 on a shared date, and each modality is strictly increasing
        if acq.modality == session.last_modality or (session.last_modality, acq.modality) == ("S1", "S2"):
            raise OutOfOrderError(
                f"{acq.modality} on {acq.date} cannot follow {session.last_modality} on the same date"
            )


@torch.no_grad()
def ingest(session: StreamSession, acquisition, next_aux: ForecastAux | None = None) -> StreamOutput:
    """Advance the session by one acquisition.

    For a forecast session, ``next_aux`` describes the acquisition to
    predict (its ``delta`` counts from this one); without it no forecast is
    produced.  The session is left untouched when an error is raised.
    """
    acq = Acquisition.coerce(acquisition)
    acq.date = float(acq.date)
    _validate_order(session, acq)
    backbone = session.model.backbone
    config = session.mixer_config
    origin = acq.date if session.origin is None else session.origin
    position = acq.date - origin
    if config.is_time and position > config.max_span * (1 + fm.SPAN_SLACK):
        raise SpanExceededError(f"stream spans {position} days, more than {config.max_span}")
    image = torch.as_tensor(acq.image).to(torch.float32)
    feats = backbone.encode_modality(acq.modality, image[None])  # (1, d, h, w)
    _, d, h, w = feats.shape
    if session.grid is not None and session.grid != (h, w):
        raise ConfigurationError(f"image grid {h}x{w} differs from the session's {session.grid}")
    tokens = backbone.assembler(feats, torch.tensor([acq.date], dtype=torch.float64), (acq.modality,))[:, 0]
    states = session.states or backbone.fusion.init_states(h * w)
    fused, states = backbone.fusion.step(states, tokens, position, session.step)
    grid = fused.reshape(h, w, -1).permute(2, 0, 1)
    y = backbone.upsample(grid[None])[0]
    out = StreamOutput(session.step, acq.date, acq.modality, y)
    if session.task == "segmentation":
        out.segmentation = session.model.logits(y)
    elif next_aux is not None:
        out.forecast = session.model.predict(y, next_aux)
    # commit only after everything succeeded
    session.states = states
    session.grid = (h, w)
    session.origin = origin
    session.last_date = acq.date
    session.last_modality = acq.modality
    session.step += 1
    session.last_y = y
    session.history.append((acq.date, acq.modality))
    return out


@torch.no_grad()
def forecast_next(session: StreamSession, aux: ForecastAux) -> torch.Tensor:
    """Forecast an upcoming acquisition from the latest ingested step."""
    if session.task != "forecast":
        raise ConfigurationError("session was not opened for forecasting")
    if session.last_y is None:
        raise ConfigurationError("nothing ingested yet")
    return session.model.predict(session.last_y, aux)


def fork(session: StreamSession) -> StreamSession:
    """Independent copy sharing the (read-only) model."""
    twin = copy.copy(session)
    twin.states = [s.clone() for s in session.states]
    twin.history = list(session.history)
    twin.last_y = None if session.last_y is None else session.last_y.clone()
    return twin


def save_session(session: StreamSession, path) -> Path:
    """Zip with the embedded checkpoint, per-layer state blobs and session metadata."""
    path = Path(path)
    buf = io.BytesIO()
    ckpt = session.checkpoint
    save_checkpoint(buf, ckpt.model, ckpt.task, ckpt.backbone, ckpt.train_config, ckpt.step, ckpt.seed, ckpt.data)
    meta = {
        "format": SESSION_FORMAT,
        "version": SESSION_VERSION,
        "task": session.task,
        "checkpoint_path": session.checkpoint_path,
        "grid": list(session.grid) if session.grid else None,
        "origin": session.origin,
        "last_date": session.last_date,
        "last_modality": session.last_modality,
        "step": session.step,
        "history": session.history,
        "n_states": len(session.states),
        "last_y": None if session.last_y is None else {"shape": list(session.last_y.shape), "dtype": "<f4"},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("session.json", json.dumps(meta, indent=2))
        zf.writestr("checkpoint.zip", buf.getvalue())
        for i, state in enumerate(session.states):
            zf.writestr(f"states/{i}.bin", state.to_bytes())
        if session.last_y is not None:
            zf.writestr("last_y.bin", session.last_y.numpy().astype("<f4").tobytes())
    return path


def load_session(path) -> StreamSession:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"not a session archive: {exc}", 0) from None
    with zf:
        try:
            meta = json.loads(zf.read("session.json"))
        except KeyError:
            raise FormatError("archive has no session.json", 0) from None
        if meta.get("format") != SESSION_FORMAT:
            raise FormatError("archive is not a dualform session", 0)
        ckpt = load_checkpoint(io.BytesIO(zf.read("checkpoint.zip")))
        session = session_open(ckpt, meta["task"])
        session.checkpoint_path = meta["checkpoint_path"]
        session.states = [RecurrentState.from_bytes(zf.read(f"states/{i}.bin")) for i in range(meta["n_states"])]
        session.grid = tuple(meta["grid"]) if meta["grid"] else None
        session.origin = meta["origin"]
        session.last_date = meta["last_date"]
        session.last_modality = meta["last_modality"]
        session.step = meta["step"]
        session.history = [tuple(h) for h in meta["history"]]
        if meta["last_y"]:
            raw = np.frombuffer(zf.read("last_y.bin"), dtype="<f4").reshape(meta["last_y"]["shape"])
            session.last_y = torch.from_numpy(raw.copy())
    return session


def sample_acquisitions(sample) -> list[Acquisition]:
    """All acquisitions of a sample in batch merge order (S2 first on shared dates)."""
    items = []
    for i, date in enumerate(sample.s2_dates):
        items.append(
            (float(date), 0, Acquisition(
                "S2", float(date), torch.from_numpy(sample.s2_images[i]), torch.from_numpy(sample.s2_valid[i]),
                torch.from_numpy(sample.s2_cloud[i]), torch.from_numpy(sample.s2_weather[i]), None,
            ))
        )
    for i, date in enumerate(sample.s1_dates):
        items.append(
            (float(date), 1, Acquisition(
                "S1", float(date), torch.from_numpy(sample.s1_images[i]), torch.from_numpy(sample.s1_valid[i]),
                None, torch.from_numpy(sample.s1_weather[i]), tuple(float(a) for a in sample.s1_angles[i]),
            ))
        )
    items.sort(key=lambda t: (t[0], t[1]))
    return [a for _, _, a in items]


# -- benchmark -------------------------------------------------------------

BENCH_FIELDS = ("kind", "T", "mode", "median_ns", "state_bytes")


@contextmanager
def single_thread():
    saved = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(saved)


@dataclass
class BenchResult:
    rows: list  # dicts with BENCH_FIELDS
    samples: dict  # (kind, mode, T) -> list of ns

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)
        return path


def _bench_setup(kind: str, d_model: int, n_heads: int, batch: int, t: int, seed: int, longest: int):
    # index CosFormer's M is a token count, so it must cover the longest sequence benchmarked
    span = float(max(longest + 1, DEFAULT_INDEX_SPAN)) if kind == "cosformer" else None
    config = MixerConfig.build(kind, d_model, n_heads=n_heads, max_span=span)
    weights = MixerWeights(config, torch.Generator().manual_seed(seed))
    gen = torch.Generator().manual_seed(seed + 1)
    tokens = torch.randn(batch, t + 1, d_model, generator=gen, dtype=torch.float64)
    positions = torch.arange(t + 1, dtype=torch.float64)
    return config, weights, tokens, positions


def bench(
    kinds,
    lengths,
    reps: int = 50,
    d_model: int = 32,
    n_heads: int = 4,
    batch: int = 64,
    seed: int = 0,
) -> BenchResult:
    """Median wall time of one recurrent step after ``T`` tokens and of a full parallel pass over ``T``.

    Recurrent-capable kinds report both modes; softmax kinds only the
    parallel recompute.  ``transformer_causal`` is always included as the
    quadratic reference.  Measurements are interleaved across ``T`` in a
    shuffled order each round so slow drifts do not masquerade as trends.
    """
    kinds = list(dict.fromkeys(list(kinds) + ["transformer_causal"]))
    for kind in kinds:
        fm.check_kind(kind)
    lengths = sorted(set(int(t) for t in lengths))
    if not lengths or lengths[0] < 1:
        raise ConfigurationError("lengths must be positive integers")
    jobs = []
    with torch.no_grad(), single_thread():
        for kind in kinds:
            for t in lengths:
                config, weights, tokens, positions = _bench_setup(kind, d_model, n_heads, batch, t, seed, lengths[-1])
                seq = TokenSequence(tokens[:, :t], positions[:t])
                jobs.append((kind, "parallel", t, (lambda c=config, w=weights, s=seq: mix_parallel(c, w, s)),
                             _kv_bytes(config, t)))
                if config.has_recurrent_form:
                    state = state_init(config, batch)
                    for i in range(t):
                        _, state = mix_step(config, weights, state, tokens[:, i], float(i))
                    x, pos = tokens[:, t], float(t)
                    jobs.append((kind, "recurrent", t, (lambda c=config, w=weights, st=state, x=x, p=pos: mix_step(c, w, st, x, p)),
                                 state.nbytes // batch))
        rng = random.Random(seed)
        samples = {(k, m, t): [] for k, m, t, _, _ in jobs}
        for job in jobs:  # warm-up
            job[3]()
        for _ in range(reps):
            order = list(jobs)
            rng.shuffle(order)
            for kind, mode, t, fn, _ in order:
                start = time.perf_counter_ns()
                fn()
                samples[(kind, mode, t)].append(time.perf_counter_ns() - start)
    rows = [
        {"kind": k, "T": t, "mode": m, "median_ns": int(statistics.median(samples[(k, m, t)])), "state_bytes": b}
        for k, m, t, _, b in jobs
    ]
    return BenchResult(rows, samples)


def _kv_bytes(config: MixerConfig, t: int) -> int:
    """Per-sequence memory a full recompute must hold: every key and value so far."""
    return t * (config.d_k + config.d_v) * 8


def bootstrap_slope_ci(lengths, samples_by_length, n_boot: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Least-squares slope of median cost against ``T``, with a percentile bootstrap CI.

    Each bootstrap round resamples the raw measurements at every ``T``
    independently and refits the slope of their medians.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(lengths, dtype=np.float64)
    xc = x - x.mean()
    data = [np.asarray(s, dtype=np.float64) for s in samples_by_length]
    medians = np.array([np.median(s) for s in data])
    slope = float(xc @ medians / (xc @ xc))
    boots = np.empty(n_boot)
    for b in range(n_boot):
        m = np.array([np.median(s[rng.integers(0, len(s), len(s))]) for s in data])
        boots[b] = xc @ m / (xc @ xc)
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    return slope, float(lo), float(hi)


def analyze(result: BenchResult, min_ratio_t: int = 64) -> dict:
    """Shape claims: flat recurrent step cost, superlinear parallel transformer cost, constant state."""
    report = {"recurrent": {}, "parallel": {}, "passed": True}
    kinds = sorted({r["kind"] for r in result.rows})
    for kind in kinds:
        rec = sorted((r for r in result.rows if r["kind"] == kind and r["mode"] == "recurrent"), key=lambda r: r["T"])
        if len(rec) >= 2:
            ts = [r["T"] for r in rec]
            slope, lo, hi = bootstrap_slope_ci(ts, [result.samples[(kind, "recurrent", t)] for t in ts])
            flat = lo <= 0.0 <= hi
            constant_state = len({r["state_bytes"] for r in rec}) == 1
            report["recurrent"][kind] = {
                "slope_ns_per_token": slope,
                "ci95": [lo, hi],
                "flat": flat,
                "state_bytes": rec[0]["state_bytes"],
                "state_constant": constant_state,
            }
            report["passed"] &= flat and constant_state
        if kind == "transformer_causal":
            par = {r["T"]: r["median_ns"] for r in result.rows if r["kind"] == kind and r["mode"] == "parallel"}
            ratios = {
                str(t): par[2 * t] / par[t] for t in sorted(par) if 2 * t in par and t >= min_ratio_t
            }
            superlinear = all(v > 2 for v in ratios.values()) if ratios else None
            report["parallel"][kind] = {"ratios_2T_over_T": ratios, "superlinear": superlinear}
            if superlinear is False:
                report["passed"] = False
    return report
