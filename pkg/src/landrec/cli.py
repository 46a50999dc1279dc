"""Batch command-line surface: gen, distractors, predict, eval.

Commands are offline jobs over files named by a manifest; every run prints
its resolved configuration to standard error, outputs are written
atomically (temp file + rename), and error classes map to stable exit
codes: 1 I/O, 2 validation, 3 dimension/alignment, 4 missing distractor
entry.
"""

import argparse
import sys

from . import kernels
from .errors import DimMismatch, IdMismatch, LandrecError, MissingDistractor
from .metrics import gap, read_ground_truth, read_predictions, top1_accuracy, write_predictions
from .rerank import (
    PipelineConfig,
    build_distractor_map,
    ensembled_set,
    predict_all,
    read_distractor_map,
    write_distractor_map,
)
from .store import read_manifest
from .synth import SyntheticSpec, generate_synthetic

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_DIMENSION = 3
EXIT_MISSING_DISTRACTOR = 4

_DEFAULT_SPEC = SyntheticSpec()
_DEFAULT_CONFIG = PipelineConfig()


def _log(message: str):
    print(message, file=sys.stderr)


def cmd_gen(args) -> int:
    spec = SyntheticSpec(
        seed=args.seed,
        dim=args.dim,
        n_landmarks=args.landmarks,
        index_per_landmark=args.index_per_landmark,
        n_queries_landmark=args.queries_landmark,
        n_queries_junk=args.queries_junk,
        n_distractors=args.distractors,
        n_junk_index=args.junk_index,
        intra_class_noise=args.noise,
        n_models=args.models,
        model_disagreement=args.model_disagreement,
    )
    _log(f"gen: {spec}")
    _log(f"gen: writing fixture to {args.out}")
    generate_synthetic(spec, args.out)
    return EXIT_OK


def cmd_distractors(args) -> int:
    _log(f"distractors: manifest={args.manifest} n={args.distractor_n} "
         f"threads={args.threads} chunk_size={args.chunk_size} "
         f"kernel={kernels.backend_name()}")
    manifest = read_manifest(args.manifest)
    index = ensembled_set(manifest.load_per_model("index"))
    pool = ensembled_set(manifest.load_per_model("distractor"))
    dmap = build_distractor_map(index, pool, args.distractor_n,
                                chunk_size=args.chunk_size, threads=args.threads)
    write_distractor_map(dmap, args.out)
    _log(f"distractors: wrote {len(dmap)} scores to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    config = PipelineConfig(
        k=args.k,
        distractor_top_n=args.distractor_n,
        logit_mode=f"{args.logit_mode}_logit",
        inject_top1=not args.no_top1,
        use_logit=not args.no_logit,
        use_distractor=not args.no_distractor,
    )
    _log(f"predict: manifest={args.manifest} {config} threads={args.threads} "
         f"chunk_size={args.chunk_size} kernel={kernels.backend_name()}")
    manifest = read_manifest(args.manifest)
    dmap = None
    if config.use_distractor:
        if args.distractors is None:
            raise MissingDistractor(
                "distractor stage enabled: pass --distractors TSV or --no-distractor"
            )
        dmap = read_distractor_map(args.distractors)
    predictions = predict_all(manifest, config, dmap,
                              threads=args.threads, chunk_size=args.chunk_size)
    write_predictions(predictions, args.out)
    _log(f"predict: wrote {len(predictions)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _log(f"eval: predictions={args.predictions} truth={args.truth}")
    predictions = read_predictions(args.predictions)
    truth = read_ground_truth(args.truth)
    print(f"GAP {gap(predictions, truth):.6f}")
    print(f"top1 {top1_accuracy(predictions, truth):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="landrec",
        description="landmark-recognition re-ranking pipeline over precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic fixture")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=_DEFAULT_SPEC.seed)
    gen.add_argument("--dim", type=int, default=_DEFAULT_SPEC.dim)
    gen.add_argument("--landmarks", type=int, default=_DEFAULT_SPEC.n_landmarks)
    gen.add_argument("--index-per-landmark", type=int,
                     default=_DEFAULT_SPEC.index_per_landmark)
    gen.add_argument("--queries-landmark", type=int,
                     default=_DEFAULT_SPEC.n_queries_landmark)
    gen.add_argument("--queries-junk", type=int, default=_DEFAULT_SPEC.n_queries_junk)
    gen.add_argument("--distractors", type=int, default=_DEFAULT_SPEC.n_distractors)
    gen.add_argument("--junk-index", type=int, default=_DEFAULT_SPEC.n_junk_index)
    gen.add_argument("--noise", type=float, default=_DEFAULT_SPEC.intra_class_noise)
    gen.add_argument("--models", type=int, default=_DEFAULT_SPEC.n_models)
    gen.add_argument("--model-disagreement", type=float,
                     default=_DEFAULT_SPEC.model_disagreement)
    gen.set_defaults(func=cmd_gen)

    dis = sub.add_parser("distractors", help="build the distractor-score map")
    dis.add_argument("--manifest", required=True)
    dis.add_argument("--out", required=True, help="output TSV")
    dis.add_argument("--distractor-n", type=int,
                     default=_DEFAULT_CONFIG.distractor_top_n,
                     help="how many top matches to average")
    dis.add_argument("--threads", type=int, default=1)
    dis.add_argument("--chunk-size", type=int, default=kernels.DEFAULT_CHUNK_SIZE)
    dis.set_defaults(func=cmd_distractors)

    pred = sub.add_parser("predict", help="predict landmarks for all queries")
    pred.add_argument("--manifest", required=True)
    pred.add_argument("--out", required=True, help="output predictions TSV")
    pred.add_argument("--distractors", help="distractor-score TSV from 'distractors'")
    pred.add_argument("--k", type=int, default=_DEFAULT_CONFIG.k)
    pred.add_argument("--distractor-n", type=int,
                      default=_DEFAULT_CONFIG.distractor_top_n)
    pred.add_argument("--logit-mode", choices=["query", "index"], default="query")
    pred.add_argument("--no-top1", action="store_true",
                      help="disable top-1 classification injection")
    pred.add_argument("--no-logit", action="store_true",
                      help="disable classification-logit adjustment")
    pred.add_argument("--no-distractor", action="store_true",
                      help="disable distractor-score penalization")
    pred.add_argument("--threads", type=int, default=1)
    pred.add_argument("--chunk-size", type=int, default=kernels.DEFAULT_CHUNK_SIZE)
    pred.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="score a predictions file against ground truth")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--truth", required=True)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DimMismatch, IdMismatch) as exc:
        _log(f"error: {exc}")
        return EXIT_DIMENSION
    except MissingDistractor as exc:
        _log(f"error: {exc}")
        return EXIT_MISSING_DISTRACTOR
    except (LandrecError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except OSError as exc:
        _log(f"error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
