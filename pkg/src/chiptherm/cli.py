"""Command-line entry point: ``chiptherm <command> ...``.

Exit codes: 0 success, 1 input error (bad flags, unreadable files), 2 runtime
failure (build thresholds, divergence, non-finite rollout).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import report
from .dataset import (DatasetError, FrameSchedule, RangeProfile, build_dataset, load_manifest,
                      read_sequence, scan_range, select_conditioning, write_sequence)
from .fields import FieldSequence, GridSpec, ScalarField
from .layout import generate_layout
from .model import ArchConfig, RolloutError, TrainConfig, TrainingDiverged, rollout
from .model.checkpoint import CheckpointError, load, save
from .solver import SimConfig, SolverError, simulate

log = logging.getLogger("chiptherm")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    pass


def _manifest(path):
    try:
        return load_manifest(path)
    except (OSError, DatasetError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO,HI") from None
    return lo, hi


# --- commands -------------------------------------------------------------

def cmd_gen(args) -> int:
    profile = RangeProfile.parse(args.profile)
    grid = GridSpec(args.grid, args.grid)
    cfg = SimConfig(substeps_per_frame=args.substeps)
    m = build_dataset(args.out, args.layouts, cfg=cfg, schedule=FrameSchedule(args.frame_dt, args.frames),
                      seed=args.seed, profile=profile, grid=grid)
    rng = scan_range(m)
    print(f"samples\t{len(m.samples)}\ntrain\t{len(m.split['train'])}\nval\t{len(m.split['val'])}\n"
          f"skipped\t{len(m.skipped)}\nmin_c\t{rng['min']:.4f}\nmax_c\t{rng['max']:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    grid = GridSpec(args.grid, args.grid)
    layout = generate_layout(args.seed, grid, {"BasicGate": 4, "Sequential": 2}, args.budget_mw * 1e-3)
    cfg = SimConfig(substeps_per_frame=args.substeps)
    seq = simulate(layout, cfg, ScalarField.constant(grid, cfg.t_ambient), args.frame_dt, args.frames)
    write_sequence(args.out, seq)
    if args.render:
        lo, hi = args.range or (cfg.t_ambient, float(seq.array().max()) + 1e-9)
        for k in ev.SNAPSHOT_STAGES:
            if k < len(seq):
                report.render_heatmap(seq.frames[k], lo, hi, Path(args.render) / f"solver_t{k:03d}",
                                      png=args.png)
    print(f"frames\t{len(seq)}\nmax_c\t{seq.array().max():.6f}")
    return EXIT_OK


def _write_train_outputs(out: Path, model, history, cfg: TrainConfig, row: dict, manifest, ablate: str):
    save(model, out)
    meta = {"ablate": ablate, "arch": model.arch.to_record(), "train": cfg.to_record(),
            "manifest_hash": ev.manifest_hash(manifest), "history": history, "summary": row}
    report.write_json(str(out) + ".train.json", meta)
    if history:
        report.write_tsv(str(out) + ".history.tsv", history)
        report.plot_history(history, str(out) + ".history.png")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(lam=args.lam, lr=args.lr, batch=args.batch, epochs=args.epochs,
                      max_steps=args.max_steps, seed=args.seed)
    if args.noise is not None:
        cfg = replace(cfg, noise_sigma=args.noise)
    return cfg


def _arch(args) -> ArchConfig:
    return ArchConfig(base_channels=args.base_channels, dropout_rate=args.dropout,
                      bilinear_decoder=args.decoder == "bilinear")


def cmd_train(args) -> int:
    manifest = _manifest(args.data)
    data = ev.pairsets(manifest)
    arch, cfg = ev.apply_ablation(args.ablate, _arch(args), _train_config(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        model, history, cfg = ev.run_ablation(manifest, "none", arch, cfg, data)
    except TrainingDiverged as exc:
        row = ev.ablation_row(args.ablate, exc.model, exc.history, cfg, data[1])
        _write_train_outputs(out, exc.model, exc.history, cfg, row, manifest, args.ablate)
        print(f"error: {exc}; best checkpoint kept at {out}", file=sys.stderr)
        return EXIT_RUNTIME
    row = ev.ablation_row(args.ablate, model, history, cfg, data[1])
    _write_train_outputs(out, model, history, cfg, row, manifest, args.ablate)
    print(report.tsv_text([row]), end="")
    return EXIT_OK


def _train_many(runs, manifest, data, out: Path) -> tuple[list[dict], int]:
    """Train each (name, arch, cfg) into ``out/<name>.thmw``; returns the table rows and exit status."""
    out.mkdir(parents=True, exist_ok=True)
    paths, status = [], EXIT_OK
    for name, arch, cfg in runs:
        path = out / f"{name}.thmw"
        try:
            model, history, cfg = ev.run_ablation(manifest, "none", arch, cfg, data)
        except TrainingDiverged as exc:
            log.error("%s: %s", name, exc)
            model, history, status = exc.model, exc.history, EXIT_RUNTIME
        row = ev.ablation_row(name, model, history, cfg, data[1])
        _write_train_outputs(path, model, history, cfg, row, manifest, name)
        paths.append(str(path) + ".train.json")
    return assemble_table(paths), status


def cmd_ablate(args) -> int:
    manifest = _manifest(args.data)
    runs = [(kind, *ev.apply_ablation(kind, _arch(args), _train_config(args))) for kind in ev.ABLATIONS]
    out = Path(args.out)
    rows, status = _train_many(runs, manifest, ev.pairsets(manifest), out)
    report.write_tsv(out / "ablation.tsv", rows)
    report.plot_ablation(rows, out / "ablation.png")
    print(report.tsv_text(rows), end="")
    return status


def _lambdas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma-separated list of numbers") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("lambda values must be non-negative")
    return vals


def cmd_sweep(args) -> int:
    manifest = _manifest(args.data)
    base = _train_config(args)
    runs = [(f"lambda_{lam:g}", _arch(args), replace(base, lam=lam)) for lam in args.lambdas]
    out = Path(args.out)
    rows, status = _train_many(runs, manifest, ev.pairsets(manifest), out)
    report.write_tsv(out / "sweep.tsv", rows)
    report.plot_sweep(rows, out / "sweep.png")
    print(report.tsv_text(rows), end="")
    return status


def assemble_table(train_files) -> list[dict]:
    """One comparison row per training run, read back from its ``.train.json``."""
    rows = []
    for p in train_files:
        try:
            rows.append(json.loads(Path(p).read_text())["summary"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read training summary {p}: {exc}") from exc
    return rows


def cmd_table(args) -> int:
    rows = assemble_table(args.runs)
    report.write_tsv(args.out, rows)
    print(report.tsv_text(rows), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load(args.model)
    seq = read_sequence(args.input)
    if args.data:
        manifest = _manifest(args.data)
        cid = select_conditioning(manifest, seq.dt)
        cond = manifest.load(cid)
        pair = (cond.frames[0], cond.frames[1])
        log.info("conditioning on training sample %s", cid)
    else:
        log.warning("no --data given; conditioning on the input's own first two frames")
        pair = (seq.frames[0], seq.frames[1])
    try:
        pred = rollout(model, seq.frames[0], pair, args.steps, seq.dt)
    except RolloutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".pred.thm")
    write_sequence(out, pred)
    if args.render:
        render_rollout(pred, seq, Path(args.render), args.range or (model.norm.t_floor, model.norm.max_i),
                       args.png)
    print(f"frames\t{len(pred)}\nout\t{out}")
    return EXIT_OK


def render_rollout(pred: FieldSequence, truth: FieldSequence | None, out: Path, rng, png=False):
    """Snapshot heatmaps, |error| maps where ground truth exists, a stage table and a panel figure."""
    lo, hi = rng
    stages = [k for k in ev.SNAPSHOT_STAGES if k < len(pred)]
    rows = []
    for k in stages:
        report.render_heatmap(pred.frames[k], lo, hi, out / f"pred_t{k:03d}", png=png)
        row = {"step": k, "pred_max_c": float(pred.frames[k].values.max())}
        if truth is not None and k < len(truth):
            err = np.abs(pred.frames[k].values - truth.frames[k].values)
            emax = float(err.max())
            report.render_heatmap(err, 0.0, emax if emax > 0 else 1.0, out / f"error_t{k:03d}", png=png)
            iy, ix = np.unravel_index(int(np.argmax(err)), err.shape)
            row.update({"rmse_c": float(np.sqrt(np.mean(err ** 2))), "max_abs_err_c": emax,
                        "argmax_row": int(iy), "argmax_col": int(ix)})
        rows.append(row)
    if rows:
        report.write_tsv(out / "stages.tsv", rows, sorted({c for r in rows for c in r},
                                                         key=lambda c: (c != "step", c)))
        tarr = truth.array() if truth is not None and len(truth) > stages[-1] else None
        report.plot_rollout_panel(pred.array(), tarr, stages, out / "rollout.png", lo, hi)


def cmd_eval(args) -> int:
    model = load(args.model)
    manifest = _manifest(args.data)
    cfg = ev.model_config(model, ev.load_train_record(args.model))
    rep = ev.evaluate_rollouts(ev.surrogate_predictor(model), manifest, args.split, args.steps,
                               args.seed, cfg)
    out = Path(args.out)
    _write_eval(rep, out, "report")
    if args.bench:
        rep.timing = ev.benchmark(model, manifest, n_steps=args.steps, runs=args.runs)
        report.write_json(out / "timing.json", rep.timing)
        report.write_tsv(out / "timing.tsv", [rep.timing])
        print(report.tsv_text([rep.timing]), end="")
    return EXIT_OK


def _write_eval(rep, out: Path, stem: str):
    report.write_json(out / f"{stem}.json", rep.to_record())
    if rep.buckets is not None:
        report.write_tsv(out / f"{stem}_stages.tsv", rep.buckets)
        report.write_tsv(out / f"{stem}_samples.tsv", rep.samples)
        report.plot_stage_metrics(rep.buckets, out / f"{stem}_stages.png")
        print(report.tsv_text(rep.buckets), end="")
        agg = rep.aggregate
        print(f"aggregate\trmse={agg['rmse']:.6g}±{agg['rmse_std']:.3g}\tnpd={agg['npd']:.6g}"
              f"\tssim={agg['ssim']:.6g}")


def cmd_crossval(args) -> int:
    model = load(args.model)
    manifest = _manifest(args.data)
    cfg = ev.model_config(model, ev.load_train_record(args.model))
    rep = ev.full_scale_report(ev.surrogate_predictor(model), manifest, args.split, args.steps,
                               args.seed, cfg)
    out = Path(args.out)
    _write_eval(rep, out, "fullscale")
    fs = rep.extra["full_scale"]
    report.write_tsv(out / "fullscale_summary.tsv", [fs])
    print(report.tsv_text([fs]), end="")
    return EXIT_OK


def cmd_render(args) -> int:
    seq = read_sequence(args.input)
    if not -len(seq) <= args.frame < len(seq):
        raise InputError(f"frame {args.frame} outside 0..{len(seq) - 1}")
    f = seq.frames[args.frame]
    lo, hi = args.range or (float(f.values.min()), float(f.values.max()))
    paths = report.render_heatmap(f, lo, hi, args.out, png=args.png)
    print("\n".join(f"{k}\t{v}" for k, v in sorted(paths.items())))
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="physics weight")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--noise", type=float, default=None, help="input noise sigma (normalized units)")
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decoder", choices=("transposed", "bilinear"), default="transposed",
                   help="upsampling path of the decoder")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chiptherm", description="Transient on-chip thermal maps: "
                     "solver, dataset builder and learned surrogate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a dataset")
    p.add_argument("--layouts", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", default="nominal", help="nominal | extended")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--frames", type=int, default=101)
    p.add_argument("--frame-dt", type=float, default=1e-3)
    p.add_argument("--substeps", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="simulate one random layout to a sequence file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--budget-mw", type=float, default=2.0)
    p.add_argument("--frames", type=int, default=101)
    p.add_argument("--frame-dt", type=float, default=1e-3)
    p.add_argument("--substeps", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--render", default=None)
    p.add_argument("--range", type=_range, default=None)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one model")
    _train_flags(p)
    p.add_argument("--ablate", choices=ev.ABLATIONS, default="none")
    p.add_argument("--out", required=True, help="checkpoint path (.thmw)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train the four ablation configs and tabulate them")
    _train_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train one model per physics weight and tabulate them")
    _train_flags(p)
    p.add_argument("--lambdas", type=_lambdas, default=ev.LAMBDA_SWEEP,
                   help="comma-separated physics weights (default 0,0.01,0.1,1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("table", help="assemble a comparison table from .train.json files")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("infer", help="free-running rollout from a sequence's first frame")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--data", default=None, help="dataset to draw the reference pair from")
    p.add_argument("--out", default=None)
    p.add_argument("--render", default=None)
    p.add_argument("--range", type=_range, default=None)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="stage-bucketed rollout report, optional timing comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bench", action="store_true")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="full-scale RMSE report on another (e.g. extended) dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=("train", "val", "all"))
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="crossval")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("render", help="render one frame of a sequence file")
    p.add_argument("--input", required=True)
    p.add_argument("--frame", type=int, default=-1, help="frame index; negative counts from the end")
    p.add_argument("--range", type=_range, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, CheckpointError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DatasetError, SolverError, TrainingDiverged, RolloutError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
