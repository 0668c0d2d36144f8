"""Deterministic synthetic S1/S2 image time series.

Every random quantity is a pure function of ``(dataset seed, site, stream,
date, channel, y, x)`` through a counter-based hash, so a sample can be
regenerated piecewise and does not depend on any platform RNG.

The latent scene per pixel is a seasonal vegetation cycle (phase and
amplitude vary smoothly in space), a slow trend and, inside one
rectangular construction site, a switch from bare soil to solar panels at
a random construction date.  S2 sees the scene with additive noise and
occasional cloud blobs; S1 sees a nonlinear function of the same state with
multiplicative speckle and occasional swath gaps.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidParameterError, SpanExceededError
from .featmaps import DEFAULT_TIME_SPAN

MAGIC = b"MMTS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")  # magic, version, header length

UNLABELED = 255
CLASS_UNCONSTRUCTED, CLASS_SOLAR, CLASS_OUT_OF_SITE = 0, 1, 2

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# stream tags keep independent draws apart
_S_DATES1, _S_DATES2, _S_SITE, _S_NOISE2, _S_NOISE1, _S_CLOUD, _S_SWATH, _S_WEATHER, _S_ANGLE, _S_LABEL, _S_SPECTRA = range(11)


def _mix(h: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return h ^ (h >> np.uint64(31))


def hash_u64(*keys) -> np.ndarray:
    """Hash integer keys (scalars or broadcastable arrays) to uint64."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x243F6A8885A308D3)
        for k in keys:
            k = np.asarray(k).astype(np.int64).astype(np.uint64)
            h = _mix(h ^ (k + _GOLDEN + (h << np.uint64(6)) + (h >> np.uint64(2))))
        return np.asarray(h, dtype=np.uint64)


def uniform(*keys) -> np.ndarray:
    """Uniform draws in ``[0, 1)`` with 53-bit resolution."""
    return (hash_u64(*keys) >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)


def normal(*keys) -> np.ndarray:
    """Standard normal draws (Box-Muller on two hashed uniforms)."""
    u1 = uniform(*keys, 0x51)
    u2 = uniform(*keys, 0xA7)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def randint(lo: int, hi: int, *keys) -> np.ndarray:
    """Integers in ``[lo, hi]`` inclusive."""
    return lo + np.floor(uniform(*keys) * (hi - lo + 1)).astype(np.int64)


@dataclass
class SyntheticSpec:
    height: int = 32
    width: int = 32
    c_s1: int = 2
    c_s2: int = 10
    duration_days: int = 450
    s1_revisit: int = 12
    s2_revisit: int = 10
    jitter: int = 4
    cloud_prob: float = 0.25
    swath_gap_prob: float = 0.1
    season_period: float = 365.0
    s2_noise: float = 0.05
    s1_speckle: float = 0.2
    label_fraction: float = 0.4
    n_weather_days: int = 10
    n_weather_vars: int = 8
    max_span: float = DEFAULT_TIME_SPAN
    seed: int = 0

    def __post_init__(self):
        for name in ("cloud_prob", "swath_gap_prob", "label_fraction"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {p}")
        if self.duration_days > self.max_span:
            raise SpanExceededError(f"duration {self.duration_days} days exceeds maximum span {self.max_span}")
        if self.jitter >= min(self.s1_revisit, self.s2_revisit):
            raise InvalidParameterError("jitter must be smaller than the revisit interval")
        if self.height % 16 or self.width % 16:
            raise InvalidParameterError("image sides must be divisible by 16")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class MultiModalSample:
    """One site.  Dates are absolute days since the dataset epoch."""

    site: int
    s1_dates: np.ndarray  # (T1,) int64
    s1_images: np.ndarray  # (T1, C1, H, W) float32
    s1_valid: np.ndarray  # (T1, H, W) bool
    s1_angles: np.ndarray  # (T1, 2) float32, azimuth and incidence in radians
    s1_weather: np.ndarray  # (T1, n_w, d_w) float32
    s2_dates: np.ndarray
    s2_images: np.ndarray
    s2_valid: np.ndarray
    s2_cloud: np.ndarray
    s2_weather: np.ndarray
    label_dates: np.ndarray
    labels: np.ndarray  # (L, H, W) uint8, UNLABELED where not annotated

    @property
    def s1(self):
        return list(zip(self.s1_dates.tolist(), self.s1_images, self.s1_valid))

    @property
    def s2(self):
        return list(zip(self.s2_dates.tolist(), self.s2_images, self.s2_valid, self.s2_cloud))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiModalSample) or self.site != other.site:
            return False
        return all(
            getattr(self, f.name).dtype == getattr(other, f.name).dtype
            and np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
            if f.name != "site"
        )


def _acquisition_dates(spec: SyntheticSpec, site: int, stream: int, revisit: int) -> np.ndarray:
    dates = [int(randint(0, revisit - 1, spec.seed, stream, site, -1))]
    i = 0
    while True:
        gap = int(randint(revisit - spec.jitter, revisit + spec.jitter, spec.seed, stream, site, i))
        nxt = dates[-1] + gap
        if nxt > spec.duration_days:
            break
        dates.append(nxt)
        i += 1
    return np.asarray(dates, dtype=np.int64)


def _smooth_field(spec: SyntheticSpec, site: int, tag: int, lo: float, hi: float) -> np.ndarray:
    """Sum of three random low-frequency plane waves rescaled to ``[lo, hi]``."""
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    acc = np.zeros((spec.height, spec.width))
    for k in range(3):
        fy, fx, ph = uniform(spec.seed, _S_SITE, site, tag, k, np.arange(3))
        acc += np.sin(2 * np.pi * ((fy - 0.5) * 2 * yy / spec.height + (fx - 0.5) * 2 * xx / spec.width + ph))
    return lo + (hi - lo) * (acc / 6.0 + 0.5)


@dataclass
class _Scene:
    start: int
    phase: np.ndarray
    amplitude: np.ndarray
    base: np.ndarray  # (C2, H, W)
    loading: np.ndarray  # (C2,)
    trend: np.ndarray  # (C2,)
    soil: np.ndarray  # (C2,)
    panel: np.ndarray  # (C2,)
    inside: np.ndarray  # (H, W) bool
    construction: int


def _scene(spec: SyntheticSpec, site: int) -> _Scene:
    u = lambda *k: uniform(spec.seed, _S_SITE, site, *k)
    c = np.arange(spec.c_s2)
    start = int(np.floor(u(0) * 365))
    phase = _smooth_field(spec, site, 1, 0.0, 2.0) * np.pi / 2
    amplitude = _smooth_field(spec, site, 2, 0.3, 1.0)
    # endmember spectra are shared by every site of a dataset; sites rescale them slightly
    g = lambda k: uniform(spec.seed, _S_SPECTRA, k, c)
    jitter = lambda k: 1.0 + 0.2 * (u(k, c) - 0.5)
    base_level = (-0.5 + 1.0 * g(0)) * jitter(3)
    base = base_level[:, None, None] + 0.3 * (_smooth_field(spec, site, 4, -1.0, 1.0))[None]
    # vegetation response: visible bands dim, infrared bands bright
    loading = np.where(c < spec.c_s2 // 3, -0.4, 0.6) * (0.7 + 0.6 * g(1)) * jitter(5)
    trend = 0.2 * (u(6, c) - 0.5)
    soil = (0.4 + 0.3 * g(2)) * jitter(7)
    panel = (-0.6 - 0.4 * g(3)) * jitter(8)
    h0 = int(randint(0, spec.height // 2, spec.seed, _S_SITE, site, 9))
    w0 = int(randint(0, spec.width // 2, spec.seed, _S_SITE, site, 10))
    hh = int(randint(spec.height // 4, spec.height // 2, spec.seed, _S_SITE, site, 11))
    ww = int(randint(spec.width // 4, spec.width // 2, spec.seed, _S_SITE, site, 12))
    inside = np.zeros((spec.height, spec.width), dtype=bool)
    inside[h0 : h0 + hh, w0 : w0 + ww] = True
    construction = int(spec.duration_days * (0.2 + 0.6 * u(13)))
    return _Scene(start, phase, amplitude, base, loading, trend, soil, panel, inside, construction)


def _vegetation(spec: SyntheticSpec, scene: _Scene, day: int) -> np.ndarray:
    season = np.sin(2 * np.pi * (scene.start + day) / spec.season_period + scene.phase)
    veg = scene.amplitude * season
    # the construction site is bare: vegetation strongly damped
    return np.where(scene.inside, 0.2 * veg, veg)


def _label_map(scene: _Scene, day: int) -> np.ndarray:
    labels = np.full(scene.inside.shape, CLASS_OUT_OF_SITE, dtype=np.uint8)
    labels[scene.inside] = CLASS_SOLAR if day >= scene.construction else CLASS_UNCONSTRUCTED
    return labels


def _s2_clean(spec: SyntheticSpec, scene: _Scene, day: int) -> np.ndarray:
    veg = _vegetation(spec, scene, day)
    img = scene.base + scene.loading[:, None, None] * veg[None] + scene.trend[:, None, None] * (day / 365.0)
    site_sig = scene.panel if day >= scene.construction else scene.soil
    return img + scene.inside[None] * site_sig[:, None, None]


def _s1_clean(spec: SyntheticSpec, scene: _Scene, day: int, incidence: float) -> np.ndarray:
    veg = _vegetation(spec, scene, day)
    built = scene.inside & (day >= scene.construction)
    bare = scene.inside & (day < scene.construction)
    angle = 0.5 * (np.cos(incidence) - np.cos(np.deg2rad(37.5)))
    vv = 1.0 + 0.25 * veg + 0.6 * built - 0.2 * bare + angle
    vh = 0.6 + 0.35 * np.tanh(veg) + 0.3 * built - 0.15 * bare + 0.5 * angle
    return np.stack((vv, vh))[: spec.c_s1]


def _weather(spec: SyntheticSpec, site: int, scene: _Scene, day: int) -> np.ndarray:
    days = day - spec.n_weather_days + np.arange(spec.n_weather_days)
    k = np.arange(spec.n_weather_vars)
    phase = 2 * np.pi * (scene.start + days[:, None]) / spec.season_period + k[None] * np.pi / 4
    noise = normal(spec.seed, _S_WEATHER, site, days[:, None], k[None])
    return (np.cos(phase) + 0.1 * noise).astype(np.float32)


def _cloud_mask(spec: SyntheticSpec, site: int, day: int) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    if uniform(spec.seed, _S_CLOUD, site, day, 0) >= spec.cloud_prob:
        return mask
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    n_blobs = int(randint(1, 3, spec.seed, _S_CLOUD, site, day, 1))
    for b in range(n_blobs):
        cy, cx, r = uniform(spec.seed, _S_CLOUD, site, day, 2, b, np.arange(3))
        radius = 3 + r * spec.height / 4
        mask |= (yy - cy * spec.height) ** 2 + (xx - cx * spec.width) ** 2 <= radius**2
    return mask


def _swath_valid(spec: SyntheticSpec, site: int, day: int) -> np.ndarray:
    valid = np.ones((spec.height, spec.width), dtype=bool)
    if uniform(spec.seed, _S_SWATH, site, day, 0) < spec.swath_gap_prob:
        edge = int(randint(spec.width // 4, 3 * spec.width // 4, spec.seed, _S_SWATH, site, day, 1))
        if uniform(spec.seed, _S_SWATH, site, day, 2) < 0.5:
            valid[:, :edge] = False
        else:
            valid[:, edge:] = False
    return valid


def generate_sample(spec: SyntheticSpec, seed: int) -> MultiModalSample:
    """Generate site ``seed`` of the dataset described by ``spec``."""
    site = int(seed)
    scene = _scene(spec, site)
    h, w = spec.height, spec.width
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    s2_dates = _acquisition_dates(spec, site, _S_DATES2, spec.s2_revisit)
    s2_images, s2_cloud, s2_weather = [], [], []
    for day in s2_dates:
        img = _s2_clean(spec, scene, int(day))
        c = np.arange(spec.c_s2)[:, None, None]
        img = img + spec.s2_noise * normal(spec.seed, _S_NOISE2, site, day, c, yy, xx)
        cloud = _cloud_mask(spec, site, int(day))
        cloud_value = 1.5 + 0.1 * normal(spec.seed, _S_CLOUD, site, day, c, yy, xx, 7)
        img = np.where(cloud[None], cloud_value, img)
        s2_images.append(img)
        s2_cloud.append(cloud)
        s2_weather.append(_weather(spec, site, scene, int(day)))

    s1_dates = _acquisition_dates(spec, site, _S_DATES1, spec.s1_revisit)
    s1_images, s1_valid, s1_angles, s1_weather = [], [], [], []
    for day in s1_dates:
        ascending = uniform(spec.seed, _S_ANGLE, site, day, 0) < 0.5
        azimuth = -0.2 if ascending else math.pi + 0.2
        incidence = np.deg2rad(30.0 + 15.0 * float(uniform(spec.seed, _S_ANGLE, site, day, 1)))
        clean = _s1_clean(spec, scene, int(day), incidence)
        c = np.arange(spec.c_s1)[:, None, None]
        speckle = 1.0 + spec.s1_speckle * normal(spec.seed, _S_NOISE1, site, day, c, yy, xx)
        valid = _swath_valid(spec, site, int(day))
        s1_images.append(np.where(valid[None], clean * speckle, 0.0))
        s1_valid.append(valid)
        s1_angles.append((azimuth, incidence))
        s1_weather.append(_weather(spec, site, scene, int(day)))

    labelled = uniform(spec.seed, _S_LABEL, site, s2_dates) < spec.label_fraction
    label_dates = s2_dates[labelled]
    labels = []
    for day, cloud in zip(s2_dates, s2_cloud):
        if day in label_dates:
            lab = _label_map(scene, int(day))
            lab[cloud] = UNLABELED
            labels.append(lab)

    start = scene.start
    return MultiModalSample(
        site=site,
        s1_dates=s1_dates + start,
        s1_images=np.asarray(s1_images, dtype=np.float32).reshape(-1, spec.c_s1, h, w),
        s1_valid=np.asarray(s1_valid, dtype=bool).reshape(-1, h, w),
        s1_angles=np.asarray(s1_angles, dtype=np.float32).reshape(-1, 2),
        s1_weather=np.asarray(s1_weather, dtype=np.float32).reshape(-1, spec.n_weather_days, spec.n_weather_vars),
        s2_dates=s2_dates + start,
        s2_images=np.asarray(s2_images, dtype=np.float32).reshape(-1, spec.c_s2, h, w),
        s2_valid=np.ones((len(s2_dates), h, w), dtype=bool),
        s2_cloud=np.asarray(s2_cloud, dtype=bool).reshape(-1, h, w),
        s2_weather=np.asarray(s2_weather, dtype=np.float32).reshape(-1, spec.n_weather_days, spec.n_weather_vars),
        label_dates=label_dates + start,
        labels=np.asarray(labels, dtype=np.uint8).reshape(-1, h, w),
    )


# -- serialization ---------------------------------------------------------

_ARRAYS = (
    "s1_dates",
    "s1_images",
    "s1_valid",
    "s1_angles",
    "s1_weather",
    "s2_dates",
    "s2_images",
    "s2_valid",
    "s2_cloud",
    "s2_weather",
    "label_dates",
    "labels",
)
# on-disk plane types are all 32-bit little-endian
_DISK_DTYPE = {"f": "<f4", "b": "<u4", "u": "<u4", "i": "<i4"}


def sample_to_bytes(sample: MultiModalSample) -> bytes:
    entries, blobs = [], []
    for name in _ARRAYS:
        arr = getattr(sample, name)
        disk = _DISK_DTYPE[arr.dtype.kind]
        entries.append({"name": name, "shape": list(arr.shape), "dtype": disk, "memory_dtype": arr.dtype.str})
        blobs.append(np.ascontiguousarray(arr).astype(disk).tobytes())
    header = {
        "site": sample.site,
        "dims": {
            "height": int(sample.s2_images.shape[-2]) if sample.s2_images.size else int(sample.s1_images.shape[-2]),
            "width": int(sample.s2_images.shape[-1]) if sample.s2_images.size else int(sample.s1_images.shape[-1]),
        },
        "counts": {"s1": len(sample.s1_dates), "s2": len(sample.s2_dates), "labels": len(sample.label_dates)},
        "dates": {"s1": sample.s1_dates.tolist(), "s2": sample.s2_dates.tolist()},
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    return b"".join([_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)), raw, *blobs])


def sample_from_bytes(data: bytes) -> MultiModalSample:
    if len(data) < _PREFIX.size:
        raise FormatError("file shorter than the MMTS prefix", len(data))
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    offset = _PREFIX.size
    if len(data) < offset + hlen:
        raise FormatError("truncated JSON header", len(data))
    try:
        header = json.loads(data[offset : offset + hlen])
        entries = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}", offset) from None
    offset += hlen
    arrays = {}
    for entry in entries:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if len(data) < offset + nbytes:
            raise FormatError(f"truncated payload in array {entry['name']!r}", len(data))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.dtype(entry["memory_dtype"]))
        offset += nbytes
    if offset != len(data):
        raise FormatError("trailing bytes after payload", offset)
    missing = set(_ARRAYS) - arrays.keys()
    if missing:
        raise FormatError(f"header lacks arrays {sorted(missing)}", _PREFIX.size)
    return MultiModalSample(site=int(header["site"]), **arrays)


def write_sample(sample: MultiModalSample, path) -> None:
    Path(path).write_bytes(sample_to_bytes(sample))


def read_sample(path) -> MultiModalSample:
    return sample_from_bytes(Path(path).read_bytes())


# -- datasets --------------------------------------------------------------

SPLITS = ("train", "val", "test")


def split_counts(n: int) -> dict:
    """Two thirds train, the rest shared by validation and test (8/2/2 for 12)."""
    n_val = max(1, n // 6) if n >= 3 else 0
    n_test = n_val
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def generate_dataset(spec: SyntheticSpec, out_dir, n: int, counts: dict | None = None) -> Path:
    """Write ``n`` samples plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = counts or split_counts(n)
    splits = [s for s in SPLITS for _ in range(counts[s])]
    if len(splits) != n:
        raise InvalidParameterError("split counts must add up to n")
    entries = []
    for site, split in enumerate(splits):
        name = f"site_{site:04d}.mmts"
        write_sample(generate_sample(spec, site), out / name)
        entries.append({"path": name, "split": split, "site": site})
    manifest = {"version": 1, "spec": spec.to_dict(), "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


@dataclass
class Manifest:
    root: Path
    spec: SyntheticSpec
    samples: list = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        return cls(path.parent, SyntheticSpec.from_dict(raw["spec"]), raw["samples"])

    def paths(self, split: str) -> list[Path]:
        return [self.root / s["path"] for s in self.samples if s["split"] == split]

    def load_split(self, split: str) -> list[MultiModalSample]:
        return [read_sample(p) for p in self.paths(split)]


# -- baselines -------------------------------------------------------------


def copy_last_baseline(sample: MultiModalSample, modality: str = "S2", min_index: int = 1):
    """Squared-error sum and count of predicting each acquisition by the last valid observation.

    Works per pixel: the prediction is the most recent earlier acquisition of
    the same modality where the pixel was valid (and cloud-free for S2).
    Targets with index ``< min_index`` or no earlier valid observation are skipped.
    """
    if modality == "S2":
        images, ok = sample.s2_images, sample.s2_valid & ~sample.s2_cloud
    else:
        images, ok = sample.s1_images, sample.s1_valid
    last = np.zeros_like(images[0]) if len(images) else None
    seen = np.zeros(images.shape[-2:], dtype=bool) if len(images) else None
    sq, count = 0.0, 0
    for i in range(len(images)):
        if i >= min_index:
            m = ok[i] & seen
            sq += float((((images[i] - last) ** 2) * m[None]).sum())
            count += int(m.sum()) * images.shape[1]
        last = np.where(ok[i][None], images[i], last)
        seen |= ok[i]
    return sq, count
