import argparse
import sys
from pathlib import Path
from typing import List, Optional

from app import __version__
from app.cli.commands import (
    EXIT_OK,
    ExperimentConfig,
    cmd_compare,
    cmd_convert,
    cmd_preprocess,
    cmd_probe,
    cmd_sweep,
    cmd_synthcorpus,
    cmd_train,
    exit_code_for,
)
from app.services.probe.evaluation import DEFAULT_BOTTLENECKS, SweepGrid
from utils.logger import logger


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON experiment config (audio/corpus/model/train/probe sections)")
    parser.add_argument("--seed", type=int, help="Seed for corpus split, model init, batching and probes")
    parser.add_argument("--out", help="Output directory (or output WAV for `convert`)")


def _add_model(parser: argparse.ArgumentParser):
    parser.add_argument("--steps", type=int, help="Training steps")
    parser.add_argument("--activation", help="Bottleneck activation, kind[:alpha] (e.g. sigmoid:0.1, relu, none)")
    parser.add_argument("--bottleneck", type=int, help="Bottleneck channels C_b")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="One-shot voice conversion with activation-guided instance normalization")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthcorpus", help="Generate a synthetic multi-speaker corpus")
    _add_common(p)
    p.add_argument("--kind", choices=["mel", "wav"], default="mel", help="Mel cache with index (mel) or WAV files (wav)")
    p.add_argument("--speakers", type=int, default=4, help="Number of speakers (default: 4)")
    p.add_argument("--utterances", type=int, default=24, help="Utterances per speaker (default: 24)")

    p = sub.add_parser("preprocess", help="WAV corpus to log-mel cache and corpus index")
    _add_common(p)
    p.add_argument("corpus_dir", help="Directory laid out as <speaker>/<utterance>.wav")

    p = sub.add_parser("train", help="Train a model on a preprocessed corpus")
    _add_common(p)
    _add_model(p)
    p.add_argument("--index", help="Corpus index JSON (default: <cache>/mels/index.json)")

    p = sub.add_parser("convert", help="Convert a source utterance to the voice of a target utterance")
    _add_common(p)
    p.add_argument("checkpoint", help="Trained checkpoint (.safetensors)")
    p.add_argument("source", help="Source WAV (content)")
    p.add_argument("target", help="Target WAV (voice)")

    p = sub.add_parser("probe", help="Speaker probes on content and style for one checkpoint")
    _add_common(p)
    p.add_argument("checkpoint", help="Trained checkpoint (.safetensors)")
    p.add_argument("--index", help="Corpus index JSON")

    p = sub.add_parser("sweep", help="Train and probe over activations x bottleneck sizes")
    _add_common(p)
    _add_model(p)
    p.add_argument("--index", help="Corpus index JSON")
    p.add_argument("--activations", nargs="+", help="Activations to sweep, comma or space separated (default: none,sigmoid:0.1)")
    p.add_argument("--bottlenecks", nargs="+", help=f"Bottleneck sizes, comma or space separated (default: {DEFAULT_BOTTLENECKS})")
    p.add_argument("--table", action="store_true", help="Sweep the activation table at one bottleneck size instead")
    p.add_argument("--seeds", type=int, nargs="+", help="Seeds to repeat every grid point with")
    p.add_argument("--jobs", type=int, default=1, help="Parallel grid points (default: 1)")

    p = sub.add_parser("compare", help="Single vs dual encoder, with and without sigmoid guidance")
    _add_common(p)
    _add_model(p)
    p.add_argument("--index", help="Corpus index JSON")
    p.add_argument("--seeds", type=int, nargs="+", help="Seeds to repeat every variant with")
    p.add_argument("--jobs", type=int, default=1, help="Parallel runs (default: 1)")
    return parser


def _split_list(values: Optional[List[str]]) -> List[str]:
    return [item for value in values or [] for item in value.split(",") if item]


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    return config.with_overrides(
        seed=args.seed,
        steps=getattr(args, "steps", None),
        activation=getattr(args, "activation", None),
        bottleneck=getattr(args, "bottleneck", None),
    )


def run(args: argparse.Namespace):
    config = _resolve_config(args)
    seeds = getattr(args, "seeds", None) or [config.train.seed]

    if args.command == "synthcorpus":
        out = args.out or str(Path("corpus") / args.kind)
        cmd_synthcorpus(out, kind=args.kind, speakers=args.speakers, utterances=args.utterances,
                        seed=config.corpus.seed, config=config)
    elif args.command == "preprocess":
        result = cmd_preprocess(args.corpus_dir, args.out, config)
        print(f"Processed {len(result.processed)}, skipped {len(result.skipped)}, failed {len(result.failures)}")
    elif args.command == "train":
        result = cmd_train(args.index, args.out, config)
        print(f"Final checkpoint: {result.checkpoint_path}")
    elif args.command == "convert":
        out = args.out or str(Path("output") / "converted.wav")
        result = cmd_convert(args.checkpoint, args.source, args.target, out, config)
        print(f"Converted audio: {result.wav_path}")
    elif args.command == "probe":
        report = cmd_probe(args.checkpoint, args.index, args.out, config)
        print(f"acc_C {report.acc_content:.1f}%  acc_S {report.acc_style:.1f}%  rec {report.rec_error:.4f}  chance {report.chance:.1f}%")
    elif args.command == "sweep":
        if args.table:
            grid = SweepGrid.activation_table(config.model.bottleneck_channels)
            activations = [spec.label for spec in grid.activations]
            bottlenecks = grid.bottlenecks
        else:
            activations = _split_list(args.activations)
            bottlenecks = [int(b) for b in _split_list(args.bottlenecks)] or None
        reports = cmd_sweep(args.index, args.out, config, activations, bottlenecks, seeds, args.jobs)
        diverged = sum(r.status != "ok" for r in reports)
        print(f"Sweep finished: {len(reports)} runs, {diverged} diverged")
    elif args.command == "compare":
        print(cmd_compare(args.index, args.out, config, seeds, args.jobs).to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed ({type(e).__name__}): {str(e)}", exc_info=code == 1)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
