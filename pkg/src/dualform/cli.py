"""Command-line entry point; every report is JSON (stdout or JSONL) or CSV."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import featmaps as fm
from .errors import DualFormError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED = 2


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")


def _cmd_gen_data(args) -> int:
    from .synthdata import SyntheticSpec, generate_dataset

    spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SyntheticSpec()
    manifest = generate_dataset(spec, args.out, args.n)
    _emit({"manifest": str(manifest), "n": args.n, "spec": spec.to_dict()})
    return EXIT_OK


def _cmd_train(args) -> int:
    from .plotting import plot_training
    from .training import TrainConfig, train

    config = TrainConfig.load(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    start = time.perf_counter()
    result = train(config, args.data, out_dir=out, metrics_path=metrics_path)
    figure = plot_training(result.metrics, out / "training_curve.png", f"{config.task} / {config.kind}")
    _emit(
        {
            "checkpoint": str(result.checkpoint),
            "metrics": str(metrics_path),
            "figure": str(figure),
            "final": result.metrics[-1],
            "seconds": round(time.perf_counter() - start, 2),
        }
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .training import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    metrics = evaluate(ckpt, args.data, args.split)
    metrics.update(task=ckpt.task, kind=ckpt.backbone.kind)
    _emit(metrics)
    return EXIT_OK


def _acquisition_record(path: Path, site: int, out, acq, next_acq, full: bool) -> dict:
    rec = {"file": path.name, "site": site, "step": out.step, "date": out.date, "modality": out.modality}
    if out.segmentation is not None:
        labels = out.labels()
        rec["class_fraction"] = [float((labels == c).float().mean()) for c in range(out.segmentation.shape[0])]
        if full:
            rec["labels"] = labels.tolist()
    if out.forecast is not None:
        rec["forecast_for"] = {"date": next_acq.date, "modality": next_acq.modality}
        rec["forecast_channel_mean"] = [float(v) for v in out.forecast.mean(dim=(1, 2))]
        keep = next_acq.valid.bool() if next_acq.valid is not None else torch.ones(out.forecast.shape[1:], dtype=torch.bool)
        if next_acq.cloud is not None:
            keep = keep & ~next_acq.cloud.bool()
        if bool(keep.any()):
            err = ((out.forecast - next_acq.image.to(out.forecast.dtype)) ** 2)[:, keep]
            rec["forecast_mse"] = float(err.mean())
        if full:
            rec["forecast"] = out.forecast.tolist()
    return rec


def _cmd_stream(args) -> int:
    from .stream import ingest, load_session, save_session, sample_acquisitions, session_open
    from .synthdata import read_sample

    watch = Path(args.watch)
    emit = open(args.emit, "a" if args.append else "w")
    seen: set[str] = set()
    n_records = 0
    deadline = time.monotonic() + args.timeout if args.follow else None
    resume = load_session(args.resume) if args.resume else None
    try:
        while True:
            fresh = sorted(p for p in watch.glob("*.mmts") if p.name not in seen)
            for path in fresh:
                seen.add(path.name)
                sample = read_sample(path)
                session = resume if resume is not None else session_open(args.ckpt)
                resume = None
                acqs = [a for a in sample_acquisitions(sample) if a.modality in session.model.backbone.config.modalities]
                acqs = [a for a in acqs if session.last_date is None or a.date > session.last_date]
                for i, acq in enumerate(acqs):
                    nxt = acqs[i + 1] if i + 1 < len(acqs) else None
                    aux = None
                    if session.task == "forecast" and nxt is not None and nxt.date > acq.date:
                        aux = nxt.forecast_aux(nxt.date - acq.date)
                    out = ingest(session, acq, aux)
                    emit.write(json.dumps(_acquisition_record(path, sample.site, out, acq, nxt, args.full)) + "\n")
                    n_records += 1
                emit.flush()
                if args.save_session:
                    save_session(session, Path(args.save_session))
            if deadline is None or time.monotonic() > deadline:
                break
            time.sleep(args.poll)
    finally:
        emit.close()
    _emit({"files": sorted(seen), "records": n_records, "emit": args.emit})
    return EXIT_OK


def _cmd_equiv_check(args) -> int:
    from .checks import run_equivalence

    kinds = fm.RECURRENT_KINDS if args.kind == "all" else tuple(args.kind.split(","))
    for kind in kinds:
        fm.check_kind(kind)
        if kind not in fm.RECURRENT_KINDS:
            raise DualFormError(f"{kind} has no recurrent form to compare against")
    report = run_equivalence(kinds, args.trials, args.tol, args.seed)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def _cmd_bench(args) -> int:
    from .plotting import plot_bench
    from .stream import analyze, bench

    kinds = [k for k in args.kinds.split(",") if k]
    lengths = [int(t) for t in args.lengths.split(",") if t]
    result = bench(kinds, lengths, reps=args.reps, batch=args.batch, d_model=args.d_model)
    out = Path(args.out)
    result.write_csv(out)
    report = analyze(result)
    figure = plot_bench(result.rows, out.with_suffix(".png"))
    report.update(csv=str(out), figure=str(figure))
    out.with_suffix(".json").write_text(json.dumps(report, indent=2))
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def _cmd_grad_check(args) -> int:
    from .training import grad_check

    report = grad_check(args.selector, args.tol, args.coords, seed=args.seed, kind=args.kind)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_FAILED


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; exit code 2 is reserved for failed checks."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualform", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    p.add_argument("--spec", help="JSON generator spec (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=12)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes checkpoint.zip, metrics.jsonl and a curve")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset manifest.json (defaults to the one recorded at training)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stream", help="ingest acquisitions of *.mmts files one at a time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--watch", required=True, help="directory scanned for *.mmts files")
    p.add_argument("--emit", required=True, help="JSONL output, one record per ingested acquisition")
    p.add_argument("--follow", action="store_true", help="keep polling for new files until --timeout")
    p.add_argument("--poll", type=float, default=1.0)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--append", action="store_true")
    p.add_argument("--full", action="store_true", help="include full maps in each record")
    p.add_argument("--save-session", help="write the session after each file")
    p.add_argument("--resume", help="continue a saved session for the first file")
    p.set_defaults(func=_cmd_stream)

    p = sub.add_parser("equiv-check", help="parallel vs recurrent equivalence over random trials")
    p.add_argument("--kind", default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_equiv_check)

    p = sub.add_parser("bench", help="recurrent step vs full recompute timing; CSV, JSON and PNG")
    p.add_argument("--kinds", default="linear,retention")
    p.add_argument("--lengths", default="16,64,256")
    p.add_argument("--out", required=True)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--d-model", type=int, default=32)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("grad-check", help="autograd vs central finite differences at toy size")
    p.add_argument("--selector", default="forecast", help="forecast, segmentation, linear_head or mixer:<kind>")
    p.add_argument("--kind", help="mixer kind of the toy backbone")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (DualFormError, OSError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
