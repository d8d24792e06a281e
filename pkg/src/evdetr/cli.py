"""Command-line entry points: simulate, train, eval, infer.

Every command resolves its configuration (desk defaults < config file <
``--set`` overrides), writes a RunManifest into the output directory
before any artifact, and maps failures to stable exit codes:
0 success, 1 validation/config error, 2 missing input, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import RunConfig
from .data import DatasetIndex, SequenceData
from .errors import ConfigError, MissingInputError, NumericalAbort, ValidationError
from .evaluate import ablation_suite, evaluate
from .model import StreamingDetector, infer_sequence
from .simulator import write_dataset
from .suites import available_suites, suite_sequences

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    version: str
    seed: int
    started_at: str
    outputs: list[str]

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)


def _manifest(command: str, config: RunConfig, out_dir: Path, outputs: list[str], path: Path | None = None) -> None:
    RunManifest(
        command=command,
        config=config.to_dict(),
        version=__version__,
        seed=config.training.seed,
        started_at=datetime.now(timezone.utc).isoformat(),
        outputs=outputs,
    ).write(path if path is not None else out_dir / "run_manifest.json")


def _finish(out_dir: Path) -> None:
    with open(out_dir / "run_status.json", "w") as fh:
        json.dump({"ended_at": datetime.now(timezone.utc).isoformat(), "ok": True}, fh)


def _load_config(args) -> RunConfig:
    config = RunConfig.desk()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInputError(f"config file {path} not found")
        config = RunConfig.from_file(path)
    if args.set:
        config = config.with_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, training=dataclasses.replace(config.training, seed=args.seed))
    return config


def cmd_simulate(args) -> int:
    config = _load_config(args)
    camera = config.sensor.camera()
    sequences = suite_sequences(args.suite, camera, config.training.seed)
    out_dir = Path(args.out)
    _manifest("simulate", config, out_dir, [f"{s.name}/" for s in sequences])
    index = write_dataset(sequences, camera, out_dir, config.training.seed)
    _finish(out_dir)
    print(f"wrote {len(index)} sequences to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    config = _load_config(args)
    if args.steps:
        config = dataclasses.replace(config, training=dataclasses.replace(config.training, steps=args.steps))
    out_dir = Path(args.out)
    if args.gradcheck:
        from .audit import run_gradient_audit

        report_rows = run_gradient_audit(seeds=range(2))
        bad = [r for r in report_rows if not r["ok"]]
        for r in report_rows:
            print(f"{r['name']}: {'ok' if r['ok'] else 'FAILED'} (max rel err {r['max_rel_err']:.2e})")
        return EXIT_OK if not bad else EXIT_NUMERIC
    dataset = Path(args.dataset)
    if not dataset.exists():
        raise MissingInputError(f"dataset {dataset} not found")
    if args.resume and not Path(args.resume).exists():
        raise MissingInputError(f"resume checkpoint {args.resume} not found")
    _manifest("train", config, out_dir, ["model.ckpt", "loss.csv"])
    result = train(config, dataset, out_dir, resume=args.resume, quiet=not args.verbose)
    _finish(out_dir)
    print(f"trained {result.steps} steps; final loss {result.final_loss:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _load_model(checkpoint: Path, config: RunConfig) -> tuple[StreamingDetector, RunConfig]:
    from .train import load_model_checkpoint

    if not checkpoint.exists():
        raise MissingInputError(f"checkpoint {checkpoint} not found")
    model = StreamingDetector(config.model, seed=config.training.seed)
    extra = load_model_checkpoint(checkpoint, model)
    if "config" in extra:
        config = RunConfig.from_dict(extra["config"])
        model_check = StreamingDetector(config.model, seed=config.training.seed)
        model_check.load_state_dict({k: v for k, v in model.state_dict().items()})
        model = model_check
    return model, config


def cmd_eval(args) -> int:
    config = _load_config(args)
    ckpt = Path(args.checkpoint)
    model, config = _load_model(ckpt, config)
    dataset = DatasetIndex(args.dataset)
    out_dir = Path(args.out)
    _manifest("eval", config, out_dir, ["metrics.json"])
    if args.ablation:
        rows = ablation_suite(config, args.dataset, out_dir)
        print(f"wrote {len(rows)} ablation rows to {out_dir / 'ablation.csv'}")
        _finish(out_dir)
        return EXIT_OK
    if args.frame_rate_sweep:
        rates = [float(r) for r in args.frame_rate_sweep.split(",")]
        rows = []
        for rate in rates:
            report = evaluate(model, dataset, config.eval, split=args.split, scenario=args.scenario, frame_rate=rate, cadence_hz=args.cadence)
            rows.append({"frame_rate": rate, "map50": report.map50, "runtime_ms": report.runtime_ms})
        with open(out_dir / "frame_rate_sweep.csv", "w") as fh:
            fh.write("frame_rate,map50,runtime_ms\n")
            for row in rows:
                fh.write(f"{row['frame_rate']},{row['map50']},{row['runtime_ms']}\n")
        print(json.dumps(rows, indent=1))
        _finish(out_dir)
        return EXIT_OK
    report = evaluate(model, dataset, config.eval, split=args.split, scenario=args.scenario, frame_rate=args.frame_rate, cadence_hz=args.cadence)
    (out_dir / "metrics.json").write_text(report.to_json())
    print(report.to_json())
    _finish(out_dir)
    return EXIT_OK


def cmd_infer(args) -> int:
    config = _load_config(args)
    model, config = _load_model(Path(args.checkpoint), config)
    seq_dir = Path(args.sequence)
    if not seq_dir.exists():
        raise MissingInputError(f"sequence {seq_dir} not found")
    seq = SequenceData(seq_dir)
    out_path = Path(args.out)
    _manifest("infer", config, out_path.parent, [out_path.name], path=Path(str(out_path) + ".manifest.json"))
    if args.at is not None:
        times = [int(args.at * 1e6)]
    else:
        stride = int(round(1e6 / args.cadence))
        window = seq.frame_period_us
        times = list(range(window, seq.duration_us + 1, stride))
    results, _ = infer_sequence(model, seq, times, confidence_threshold=config.eval.confidence_threshold)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for t_q, dets in results:
        for d in dets:
            x, y, w, h = d.to_pixels(seq.geometry)
            rows.append({"t_us": t_q, "x": x, "y": y, "w": w, "h": h, "class": d.cls, "confidence": d.confidence})
    if args.format == "json":
        out_path.write_text(json.dumps(rows, indent=1))
    else:
        with open(out_path, "w") as fh:
            fh.write("t_us,x,y,w,h,class,confidence\n")
            for r in rows:
                fh.write(f"{r['t_us']},{r['x']:.2f},{r['y']:.2f},{r['w']:.2f},{r['h']:.2f},{r['class']},{r['confidence']:.4f}\n")
    print(f"wrote {len(rows)} detections over {len(results)} query times to {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evdetr", description="Asynchronous event+frame streaming object detector")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (desk defaults otherwise)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. model.d=32")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("simulate", help="generate a simulated dataset suite")
    common(p)
    p.add_argument("--suite", default="desk-small", choices=available_suites())
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train a detector on a simulated dataset")
    common(p)
    p.add_argument("--dataset", help="dataset root (from simulate)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--gradcheck", action="store_true", help="run the gradient audit instead of training")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scenario", default=None, choices=[None, "normal", "motion_blur", "low_light"])
    p.add_argument("--frame-rate", type=float, default=None, dest="frame_rate")
    p.add_argument("--frame-rate-sweep", default=None, dest="frame_rate_sweep", metavar="R1,R2,...")
    p.add_argument("--cadence", type=float, default=None, help="asynchronous query cadence in Hz")
    p.add_argument("--ablation", action="store_true", help="run the ablation table instead of one eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="detections for one sequence")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--at", type=float, default=None, help="single query time in seconds")
    p.add_argument("--cadence", type=float, default=25.0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
