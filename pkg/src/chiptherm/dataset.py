"""Dataset build, on-disk formats, splitting and training-pair assembly.

Sequence file (``.thm``), all little-endian::

    magic        4s   b"THM1"
    version      u32  1
    width        u32
    height       u32
    frame_count  u32
    frame_dt     f64  seconds
    pitch        f64  meters
    frames       f32[frame_count][height][width]  degrees C, row-major

The manifest is JSON (sorted keys, two-space indent) holding the grid, the
simulation config and its hash, the range profile and normalization, one
record per sample (layout, file path relative to the manifest, frame count,
frame spacing) and the 75/25 train/validation split.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import FieldKind, FieldSequence, GridSpec, ScalarField
from .layout import CellClass, Layout, LayoutCongestion, generate_layout
from .model.network import Normalization
from .model.training import PairSet
from .solver import SimConfig, SolverError, simulate

log = logging.getLogger(__name__)

SEQ_MAGIC = b"THM1"
SEQ_VERSION = 1
SEQ_HEADER = struct.Struct("<4sIIIIdd")
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
MAX_SKIP_FRACTION = 0.10


class DatasetError(RuntimeError):
    pass


class RangeProfile(enum.Enum):
    Nominal25to55 = "Nominal25to55"
    Extended25to95 = "Extended25to95"

    @property
    def bounds(self) -> tuple[float, float]:
        return (25.0, 55.0) if self is RangeProfile.Nominal25to55 else (25.0, 95.0)

    @property
    def power_budget(self) -> tuple[float, float]:
        """Layout budget range in watts; the lumped rise P * r_th stays inside the band."""
        return (1.0e-3, 2.8e-3) if self is RangeProfile.Nominal25to55 else (3.0e-3, 6.8e-3)

    @classmethod
    def parse(cls, name: str) -> RangeProfile:
        key = name.lower()
        if key in ("nominal", "nominal25to55"):
            return cls.Nominal25to55
        if key in ("extended", "extended25to95"):
            return cls.Extended25to95
        raise ValueError(f"unknown range profile {name!r}")


@dataclass(frozen=True)
class FrameSchedule:
    frame_dt: float = 1e-3
    n_frames: int = 101


# inclusive count ranges per class at 32x32; scale with area for other grids
DEFAULT_CLASS_MIX = {
    CellClass.BasicGate: (3, 8),
    CellClass.Sequential: (1, 4),
    CellClass.CombinationalBlock: (0, 1),
}


# --- sequence files -----------------------------------------------------

def sequence_to_bytes(seq: FieldSequence) -> bytes:
    spec = seq.spec
    header = SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, spec.width, spec.height, len(seq),
                             seq.dt, spec.pitch)
    return header + seq.array().astype("<f4").tobytes()


def sequence_from_bytes(data: bytes) -> FieldSequence:
    if len(data) < SEQ_HEADER.size:
        raise DatasetError("truncated sequence file")
    magic, version, w, h, n, dt, pitch = SEQ_HEADER.unpack_from(data)
    if magic != SEQ_MAGIC:
        raise DatasetError("not a sequence file (bad magic)")
    if version != SEQ_VERSION:
        raise DatasetError(f"unsupported sequence version {version}")
    expected = SEQ_HEADER.size + 4 * w * h * n
    if len(data) != expected:
        raise DatasetError(f"sequence file has {len(data)} bytes, expected {expected}")
    frames = np.frombuffer(data, dtype="<f4", offset=SEQ_HEADER.size).astype(np.float64)
    frames = frames.reshape(n, h, w)
    spec = GridSpec(w, h, pitch)
    return FieldSequence(tuple(ScalarField(spec, FieldKind.TemperatureC, f) for f in frames), dt)


def write_sequence(path, seq: FieldSequence) -> None:
    Path(path).write_bytes(sequence_to_bytes(seq))


def read_sequence(path) -> FieldSequence:
    return sequence_from_bytes(Path(path).read_bytes())


def config_hash(record: dict) -> str:
    return hashlib.sha256(json.dumps(record, sort_keys=True).encode()).hexdigest()[:16]


# --- manifest -----------------------------------------------------------

@dataclass
class SampleRecord:
    id: str
    layout: dict
    sim_config_hash: str
    path: str
    n_frames: int
    frame_dt: float

    def to_record(self) -> dict:
        return {"id": self.id, "layout": self.layout, "sim_config_hash": self.sim_config_hash,
                "path": self.path, "n_frames": self.n_frames, "frame_dt": self.frame_dt}


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    split: dict[str, list[str]]
    normalization: Normalization
    range_profile: RangeProfile
    sim_config: dict
    seed: int
    skipped: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    root: Path | None = None

    def sample(self, sid: str) -> SampleRecord:
        for s in self.samples:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def load(self, sid: str) -> FieldSequence:
        return read_sequence(self.root / self.sample(sid).path)

    @property
    def grid(self) -> GridSpec:
        lay = self.samples[0].layout
        return GridSpec(lay["width"], lay["height"], lay["pitch"])

    @property
    def frame_dt(self) -> float:
        return self.samples[0].frame_dt

    def kappa(self) -> float:
        """Diffusion number alpha * dt / pitch^2 per frame."""
        g = self.grid
        return self.sim_config["alpha"] * self.frame_dt / (g.pitch * g.pitch)

    def to_record(self) -> dict:
        return {
            "format_version": self.format_version,
            "range_profile": self.range_profile.value,
            "normalization": {"t_floor": self.normalization.t_floor, "max_i": self.normalization.max_i},
            "sim_config": self.sim_config,
            "sim_config_hash": config_hash(self.sim_config),
            "seed": self.seed,
            "samples": [s.to_record() for s in self.samples],
            "split": self.split,
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_record(cls, rec: dict, root=None) -> DatasetManifest:
        if rec.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported manifest version {rec.get('format_version')}")
        return cls(
            samples=[SampleRecord(**s) for s in rec["samples"]],
            split={k: list(v) for k, v in rec["split"].items()},
            normalization=Normalization(**rec["normalization"]),
            range_profile=RangeProfile(rec["range_profile"]),
            sim_config=rec["sim_config"],
            seed=rec["seed"],
            skipped=rec.get("skipped", []),
            root=Path(root) if root is not None else None,
        )

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(self.to_json())
        return path

    def validate(self) -> None:
        ids = [s.id for s in self.samples]
        train, val = set(self.split["train"]), set(self.split["val"])
        if train & val or train | val != set(ids):
            raise DatasetError("split is not a disjoint cover of the samples")
        if not self.normalization.max_i > self.normalization.t_floor:
            raise DatasetError("max_i must exceed t_floor")
        for s in self.samples:
            p = self.root / s.path
            if not p.exists():
                raise DatasetError(f"missing sequence file {p}")
            with open(p, "rb") as fh:
                head = fh.read(SEQ_HEADER.size)
            if SEQ_HEADER.unpack(head)[4] != s.n_frames:
                raise DatasetError(f"{p} frame count differs from manifest")


def load_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    return DatasetManifest.from_record(json.loads(path.read_text()), path.parent)


def split_ids(ids: list[str], seed: int, train_fraction: float = 0.75) -> dict[str, list[str]]:
    """Seeded shuffle, then the first round(0.75 n) ids train and the rest validate."""
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(ids))
    n_train = int(math.floor(train_fraction * len(ids) + 0.5))
    shuffled = [ids[i] for i in order]
    return {"train": sorted(shuffled[:n_train]), "val": sorted(shuffled[n_train:])}


# --- build --------------------------------------------------------------

def _scaled_mix(mix: dict, spec: GridSpec, rng: np.random.Generator) -> dict:
    scale = spec.n_pixels / 1024.0
    out = {}
    for cls in (CellClass.BasicGate, CellClass.Sequential, CellClass.CombinationalBlock):
        lo, hi = mix.get(cls, mix.get(cls.value, (0, 0)))
        lo, hi = int(round(lo * scale)), int(round(hi * scale))
        out[cls] = int(rng.integers(lo, hi + 1))
    return out


def _build_one(job):
    idx, sample_seed, spec, mix, cfg_rec, schedule, profile_name, out_dir = job
    profile = RangeProfile(profile_name)
    cfg = SimConfig.from_record(cfg_rec)
    rng = np.random.default_rng(sample_seed)
    sid = f"s{idx:04d}"
    counts = _scaled_mix(mix, spec, rng)
    budget = float(rng.uniform(*profile.power_budget))
    try:
        layout = generate_layout(int(rng.integers(2 ** 31)), spec, counts, budget)
        T0 = ScalarField.constant(spec, cfg.t_ambient)
        seq = simulate(layout, cfg, T0, schedule.frame_dt, schedule.n_frames)
    except (LayoutCongestion, SolverError) as exc:
        return sid, None, str(exc)
    data = sequence_to_bytes(seq)
    stored = np.frombuffer(data, dtype="<f4", offset=SEQ_HEADER.size)
    lo, hi = profile.bounds
    if stored.min() < lo or stored.max() > hi:
        return sid, None, (f"frames span [{stored.min():.3f}, {stored.max():.3f}] C, "
                           f"outside the {profile.value} band")
    path = f"samples/{sid}.thm"
    (Path(out_dir) / path).write_bytes(data)
    rec = SampleRecord(sid, layout.to_record(), config_hash(cfg_rec), path, len(seq), seq.dt)
    return sid, rec, None


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("THERMAL_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(out_dir, n_layouts: int, class_mix=None, cfg: SimConfig | None = None,
                  schedule: FrameSchedule = FrameSchedule(), seed: int = 0,
                  profile: RangeProfile = RangeProfile.Nominal25to55,
                  grid: GridSpec = GridSpec(32, 32), workers: int | None = None) -> DatasetManifest:
    """Generate layouts, simulate them and write sequences plus the manifest to ``out_dir``.

    Samples whose layout cannot be placed, whose simulation fails or whose
    frames leave the profile's temperature band are skipped and logged; more
    than 10% skips fails the build.
    """
    if n_layouts < 4:
        raise ValueError("need at least 4 layouts for a 75/25 split")
    cfg = cfg or SimConfig()
    mix = class_mix or DEFAULT_CLASS_MIX
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n_layouts)
    jobs = [(i, int(seeds[i]), grid, mix, cfg.to_record(), schedule, profile.value, str(out))
            for i in range(n_layouts)]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_build_one, jobs))
    else:
        results = [_build_one(j) for j in jobs]

    samples, skipped = [], []
    for sid, rec, reason in results:
        if rec is None:
            log.warning("skipping %s: %s", sid, reason)
            skipped.append({"id": sid, "reason": reason})
        else:
            samples.append(rec)
    if len(skipped) > MAX_SKIP_FRACTION * n_layouts:
        raise DatasetError(f"{len(skipped)} of {n_layouts} samples failed: "
                           + "; ".join(s["reason"] for s in skipped[:3]))
    lo, hi = profile.bounds
    manifest = DatasetManifest(
        samples=samples,
        split=split_ids([s.id for s in samples], seed),
        normalization=Normalization(lo, hi),
        range_profile=profile,
        sim_config=cfg.to_record(),
        seed=seed,
        skipped=skipped,
        root=out,
    )
    manifest.write(out)
    return manifest


def scan_range(manifest: DatasetManifest) -> dict:
    """Count stored values outside the declared band (the range contract)."""
    lo, hi = manifest.range_profile.bounds
    out = {"min": math.inf, "max": -math.inf, "violations": 0, "values": 0}
    for s in manifest.samples:
        data = (manifest.root / s.path).read_bytes()
        v = np.frombuffer(data, dtype="<f4", offset=SEQ_HEADER.size)
        out["min"] = min(out["min"], float(v.min()))
        out["max"] = max(out["max"], float(v.max()))
        out["violations"] += int(np.count_nonzero((v < lo) | (v > hi)))
        out["values"] += v.size
    return out


# --- training records ---------------------------------------------------

@dataclass(frozen=True)
class TrainingRecord:
    """Query map, reference pair (source, target_ref) and the true next map; degrees C unless normalized."""
    sample_id: str
    cond_id: str
    frame: int
    query: np.ndarray
    source: np.ndarray
    target_ref: np.ndarray
    truth: np.ndarray


def make_pairs(manifest: DatasetManifest, split: str = "train", seed: int | None = None,
               cache: dict | None = None) -> list[TrainingRecord]:
    """One record per consecutive frame pair (t, t + dt) of every sample in ``split``.

    The reference pair comes from another sample of the same split at the same
    frame indices; with a single-sample split the sample is paired with itself.
    """
    ids = manifest.split[split]
    seed = manifest.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0xC0DE])
    cache = {} if cache is None else cache
    seqs = {}
    for sid in ids:
        if sid not in cache:
            cache[sid] = manifest.load(sid).array()
        seqs[sid] = cache[sid]
    if len(ids) == 1:
        log.warning("split %r has a single sample; conditioning on itself", split)
    records = []
    for sid in ids:
        q = seqs[sid]
        for k in range(len(q) - 1):
            others = [o for o in ids if o != sid and len(seqs[o]) > k + 1] or [sid]
            cid = others[int(rng.integers(len(others)))]
            c = seqs[cid]
            records.append(TrainingRecord(sid, cid, k, q[k], c[k], c[k + 1], q[k + 1]))
    return records


def to_pairset(records: list[TrainingRecord], norm: Normalization, kappa: float) -> PairSet:
    def stack(attr):
        return norm.forward(np.stack([getattr(r, attr) for r in records]))

    return PairSet(stack("query"), stack("source"), stack("target_ref"), stack("truth"), kappa)


def normalize_record(rec: TrainingRecord, norm: Normalization) -> TrainingRecord:
    return TrainingRecord(rec.sample_id, rec.cond_id, rec.frame, *(
        norm.forward(a) for a in (rec.query, rec.source, rec.target_ref, rec.truth)))


def augment(rec: TrainingRecord, sigma: float, seed) -> TrainingRecord:
    """Add seeded Gaussian noise to the normalized query and reference pair and clamp to [0, 1].

    The target is never perturbed.
    """
    if sigma == 0:
        return rec
    rng = np.random.default_rng(seed)

    def noisy(a):
        return np.clip(a + rng.normal(0.0, sigma, a.shape), 0.0, 1.0)

    return TrainingRecord(rec.sample_id, rec.cond_id, rec.frame, noisy(rec.query),
                          noisy(rec.source), noisy(rec.target_ref), rec.truth)


def dominant_class(layout: dict) -> str | None:
    area: dict[str, int] = {}
    for c in layout["cells"]:
        area[c["class"]] = area.get(c["class"], 0) + c["rect"][2] * c["rect"][3]
    return max(sorted(area), key=area.get) if area else None


def select_conditioning(manifest: DatasetManifest, frame_dt: float, layout_class: str | None = None,
                        seed: int = 0, exclude: str | None = None) -> str:
    """Training sample to use as the reference pair at inference.

    Candidates are training samples with the frame spacing closest to
    ``frame_dt``, narrowed to the requested dominant cell class when any match;
    the pick among them is seeded.
    """
    cands = [manifest.sample(s) for s in manifest.split["train"] if s != exclude]
    if not cands:
        raise DatasetError("no training samples to condition on")
    best = min(abs(s.frame_dt - frame_dt) for s in cands)
    cands = [s for s in cands if abs(s.frame_dt - frame_dt) == best]
    if layout_class is not None:
        same = [s for s in cands if dominant_class(s.layout) == layout_class]
        cands = same or cands
    rng = np.random.default_rng([seed, 0xE1])
    return cands[int(rng.integers(len(cands)))].id


def layout_of(manifest: DatasetManifest, sid: str) -> Layout:
    return Layout.from_record(manifest.sample(sid).layout)
