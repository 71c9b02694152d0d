"""Rollout evaluation, timing comparison, ablation runs and the extended-range harness."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from threadpoolctl import threadpool_limits

from .dataset import (DatasetManifest, config_hash, dominant_class, layout_of, make_pairs,
                      select_conditioning, to_pairset)
from .fields import FieldSequence, ScalarField
from .metrics import STAGE_BUCKETS, SsimConfig, aggregate, bucket_reports, evaluate, stage_of
from .model import (ArchConfig, ConcatMode, PairSet, SurrogateModel, TrainConfig, evaluate_losses,
                    rollout, train)
from .model.checkpoint import to_bytes
from .solver import Scheme, SimConfig, simulate, with_scheme

log = logging.getLogger(__name__)

SNAPSHOT_STAGES = (1, 5, 10, 20, 50, 100)
ABLATIONS = ("none", "pair", "physics", "concat")
LAMBDA_SWEEP = (0.0, 0.01, 0.1, 1.0)

# predictor(truth, pair, n_steps) -> sequence of n_steps + 1 frames starting at truth[0]
Predictor = Callable[[FieldSequence, tuple[ScalarField, ScalarField], int], FieldSequence]


def surrogate_predictor(model: SurrogateModel) -> Predictor:
    def predict(truth, pair, n_steps):
        return rollout(model, truth.frames[0], pair, n_steps, truth.dt)
    return predict


def oracle_predictor(truth, pair, n_steps) -> FieldSequence:
    """Returns the ground truth itself; an end-to-end check of the report plumbing."""
    return FieldSequence(truth.frames[:n_steps + 1], truth.dt)


def conditioning_pair(manifest: DatasetManifest, sid: str, seed: int = 0):
    """Reference pair for rolling out ``sid``: the first two frames of a matched training sample."""
    cls = dominant_class(manifest.sample(sid).layout)
    cid = select_conditioning(manifest, manifest.sample(sid).frame_dt, cls, seed, exclude=sid)
    cond = manifest.load(cid)
    return cid, (cond.frames[0], cond.frames[1])


@dataclass
class EvalReport:
    buckets: list[dict] | None
    aggregate: dict | None
    config: dict
    samples: list[dict] = field(default_factory=list)
    timing: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_record(self, include_timing: bool = False) -> dict:
        rec = {"stages": [list(b) for b in STAGE_BUCKETS], "buckets": self.buckets,
               "aggregate": self.aggregate, "config": self.config, "samples": self.samples}
        rec.update(self.extra)
        if include_timing and self.timing is not None:
            rec["timing"] = self.timing
        return rec


def evaluate_rollouts(predict: Predictor, manifest: DatasetManifest, split: str = "val",
                      n_steps: int = 100, seed: int = 0, config: dict | None = None) -> EvalReport:
    """Free-running rollouts from frame 0 of every sample in ``split`` scored per transient stage.

    Samples whose sequence file is missing are skipped with a warning; when
    none remain the metric sections are None.
    """
    norm = manifest.normalization
    ssim_cfg = SsimConfig(dynamic_range=norm.span)
    ids = [s.id for s in manifest.samples] if split == "all" else manifest.split[split]
    items, samples = [], []
    for sid in ids:
        path = manifest.root / manifest.sample(sid).path
        if not path.exists():
            log.warning("no ground truth for %s (%s); skipped", sid, path)
            continue
        truth = manifest.load(sid)
        steps = min(n_steps, len(truth) - 1)
        cid, pair = conditioning_pair(manifest, sid, seed)
        pred = predict(truth, pair, steps)
        per_step = {}
        for k in range(1, steps + 1):
            per_step[k] = evaluate(pred.frames[k].values, truth.frames[k].values, norm.max_i, ssim_cfg)
            items.append((k, per_step[k]))
        arr = truth.array()[:steps + 1]
        row = {"id": sid, "cond_id": cid, "steps": steps,
               "dynamic_range": float(arr.max() - arr.min())}
        for b in bucket_reports(per_step):
            row[f"rmse_{b['start']}_{b['end']}"] = b["rmse"]
        samples.append(row)
    cfg = dict(config or {})
    cfg.update({"manifest_hash": manifest_hash(manifest), "split": split, "n_steps": n_steps,
                "seed": seed})
    if not items:
        log.warning("no ground truth available; metrics omitted")
        return EvalReport(None, None, cfg, samples)
    reports = [r for k, r in items if stage_of(k) is not None]
    return EvalReport(bucket_reports(items), aggregate(reports), cfg, samples)


def manifest_hash(manifest: DatasetManifest) -> str:
    return hashlib.sha256(manifest.to_json().encode()).hexdigest()[:16]


def model_hash(model: SurrogateModel) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()[:16]


def model_config(model: SurrogateModel, train_cfg: dict | None = None) -> dict:
    out = {"arch": model.arch.to_record(), "model_hash": model_hash(model),
           "normalization": {"t_floor": model.norm.t_floor, "max_i": model.norm.max_i}}
    if train_cfg is not None:
        out["train"] = train_cfg
        out["train_hash"] = config_hash(train_cfg)
    return out


# --- timing -------------------------------------------------------------

def _median_time(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def benchmark(model: SurrogateModel, manifest: DatasetManifest, sid: str | None = None,
              n_steps: int = 100, runs: int = 5) -> dict:
    """Median wall time of a surrogate rollout vs the implicit solver over the same horizon.

    Both run single-threaded from the same initial map; the solver uses the
    dataset's own configuration with the implicit scheme.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    sid = sid or (manifest.split["val"] or manifest.split["train"])[0]
    truth = manifest.load(sid)
    _, pair = conditioning_pair(manifest, sid)
    layout = layout_of(manifest, sid)
    cfg = with_scheme(SimConfig.from_record(manifest.sim_config), Scheme.ImplicitBackwardEuler)
    start = truth.frames[0]
    with threadpool_limits(limits=1):
        rollout(model, start, pair, 2, truth.dt)  # warm caches
        sur = _median_time(lambda: rollout(model, start, pair, n_steps, truth.dt), runs)
        sol = _median_time(lambda: simulate(layout, cfg, start, truth.dt, n_steps + 1), runs)
    return {
        "sample": sid,
        "grid": [manifest.grid.height, manifest.grid.width],
        "horizon_s": n_steps * truth.dt,
        "runs": runs,
        "solver_substeps_per_frame": cfg.substeps_per_frame,
        "surrogate_ms_per_map": 1e3 * sur / n_steps,
        "surrogate_ms_per_horizon": 1e3 * sur,
        "solver_ms_per_equivalent_horizon": 1e3 * sol,
        "speedup_ratio": sol / sur,
    }


# --- training helpers and ablations ---------------------------------------

def pairsets(manifest: DatasetManifest, seed: int | None = None) -> tuple[PairSet, PairSet]:
    cache: dict = {}
    kappa = manifest.kappa()
    tr = to_pairset(make_pairs(manifest, "train", seed, cache), manifest.normalization, kappa)
    va = to_pairset(make_pairs(manifest, "val", seed, cache), manifest.normalization, kappa)
    return tr, va


def apply_ablation(kind: str, arch: ArchConfig, cfg: TrainConfig) -> tuple[ArchConfig, TrainConfig]:
    """``pair`` drops the reference pair, ``physics`` sets lambda to 0,
    ``concat`` switches to pixel-level stacking, ``none`` keeps everything."""
    if kind == "none":
        return arch, cfg
    if kind == "pair":
        return replace(arch, use_pair_conditioning=False), cfg
    if kind == "physics":
        return arch, replace(cfg, lam=0.0)
    if kind == "concat":
        return replace(arch, concat_mode=ConcatMode.PixelLevel), cfg
    raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")


def ablation_row(name: str, model: SurrogateModel, history: list[dict], cfg: TrainConfig,
                 val: PairSet) -> dict:
    """One comparison-table row: held-out teacher-forced losses of the returned model."""
    span = model.norm.span
    vals = evaluate_losses(model, val, cfg)
    best = min(history, key=lambda h: h.get("val_total", h["train_total"])) if history else {}
    return {
        "config": name,
        "lambda": cfg.lam,
        "concat_mode": model.arch.concat_mode.value,
        "pair_conditioning": model.arch.use_pair_conditioning,
        "epochs": len(history),
        "steps": history[-1]["steps"] if history else 0,
        "best_epoch": best.get("epoch", -1),
        "initial_train_total": history[0]["train_total"] if history else float("nan"),
        "final_train_total": history[-1]["train_total"] if history else float("nan"),
        "val_l_rmse": vals["l_rmse"],
        "val_l_physics": vals["l_physics"],
        "val_rmse_c": vals["l_rmse"] * span,
        "model_hash": model_hash(model),
    }


def run_ablation(manifest: DatasetManifest, kind: str, arch: ArchConfig, cfg: TrainConfig,
                 data: tuple[PairSet, PairSet] | None = None):
    tr, va = data or pairsets(manifest)
    arch, cfg = apply_ablation(kind, arch, cfg)
    model, history = train(tr, arch, cfg, va, manifest.normalization)
    return model, history, cfg


# --- extended range -------------------------------------------------------

def full_scale_report(predict: Predictor, manifest: DatasetManifest, split: str = "all",
                      n_steps: int = 100, seed: int = 0, config: dict | None = None) -> EvalReport:
    """Stage report with RMSE expressed as a percentage of the dataset's full temperature span."""
    rep = evaluate_rollouts(predict, manifest, split, n_steps, seed, config)
    lo, hi = manifest.range_profile.bounds
    span = hi - lo
    fs = {"range_profile": manifest.range_profile.value, "span_c": span}
    if rep.aggregate is not None:
        fs["rmse_c"] = rep.aggregate["rmse"]
        fs["rmse_pct_full_scale"] = 100.0 * rep.aggregate["rmse"] / span
        for b in rep.buckets:
            b["rmse_pct_full_scale"] = 100.0 * b["rmse"] / span if b["n_frames"] else float("nan")
    rep.extra["full_scale"] = fs
    return rep


def load_train_record(model_path) -> dict | None:
    p = Path(str(model_path) + ".train.json")
    if not p.exists():
        return None
    return json.loads(p.read_text()).get("train")
