"""Command-line entry point.

Subcommands: datagen, tokenize, train, infer, eval, gradcheck. Configs are
JSON files; explicit flags override file values, and the environment
variable AVO_SEED fills in any seed not set by either. Every run writes a
manifest with the resolved configuration next to (or inside) its output.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    load_corpus,
    read_features,
    read_phonemes,
    save_corpus,
    split_corpus,
    write_features,
    write_units,
    VideoFeatureSequence,
)
from .errors import ValidationError
from .evaluation import evaluate
from .inference import ExternalCommandVocoder, OracleVocoder, infer_units, synthesize, write_wav
from .model import ModelConfig, load_checkpoint
from .synth import SynthSpec, make_corpus
from .tokenizer import encode_units, fit_kmeans, load_codebook, save_codebook
from .training import TrainConfig, grad_check, train

RUN_MANIFEST_NAME = "run_manifest.json"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse parser that reports usage problems instead of exiting(2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility record written for every CLI run."""

    command: str
    argv: list[str]
    config: dict
    seeds: dict
    artifacts: dict
    version: str
    created_utc: str

    def write(self, path) -> None:
        payload = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "version": self.version,
            "created_utc": self.created_utc,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _manifest(args, config: dict, seeds: dict, artifacts: dict) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(getattr(args, "_argv", [])),
        config=config,
        seeds=seeds,
        artifacts={k: str(v) for k, v in artifacts.items()},
        version=__version__,
        created_utc=datetime.now(timezone.utc).isoformat(),
    )


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return payload


def _env_seed() -> int | None:
    raw = os.environ.get("AVO_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"AVO_SEED must be an integer, got {raw!r}") from exc


def _merge(file_payload: dict, overrides: dict, seeded: bool = True) -> dict:
    """File values, overridden by explicit flags, with the AVO_SEED fallback."""
    merged = dict(file_payload)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    if seeded and "seed" not in merged:
        env = _env_seed()
        if env is not None:
            merged["seed"] = env
    return merged


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_datagen(args) -> int:
    payload = _merge(_load_json_config(args.spec), {
        "num_utterances": args.num_utterances,
        "vocab_size": args.vocab_size,
        "codebook_size": args.codebook_size,
        "feature_dim": args.feature_dim,
        "units_per_frame": args.units_per_frame,
        "feature_noise_std": args.feature_noise_std,
        "unit_corruption_prob": args.unit_corruption_prob,
        "seed": args.seed,
    })
    spec = SynthSpec.from_dict(payload)
    corpus = make_corpus(spec)
    out = Path(args.out)
    save_corpus(corpus, out)
    _manifest(args, {"synth_spec": spec.to_dict()}, {"seed": spec.seed},
              {"corpus": out}).write(out / RUN_MANIFEST_NAME)
    print(f"wrote {len(corpus)} utterances to {out}")
    return 0


def _cmd_tokenize(args) -> int:
    if args.fit == args.encode:
        raise ValidationError("tokenize needs exactly one of --fit or --encode")
    if args.fit:
        if args.corpus:
            corpus = load_corpus(args.corpus)
            if not corpus.utterances:
                raise ValidationError("corpus has no utterances to fit on")
            frames = np.concatenate([u.video.frames for u in corpus.utterances])
        elif args.features:
            frames = read_features(args.features)
        else:
            raise ValidationError("tokenize --fit needs --corpus or --features")
        seed = args.seed if args.seed is not None else (_env_seed() or 0)
        codebook = fit_kmeans(frames, args.clusters, seed=seed,
                              max_iters=args.max_iters, tol=args.tol)
        save_codebook(codebook, args.out)
        config = {"clusters": args.clusters, "max_iters": args.max_iters, "tol": args.tol}
        _manifest(args, config, {"seed": seed},
                  {"codebook": args.out}).write(str(args.out) + ".manifest.json")
        print(f"fitted {codebook.num_units} centroids on {len(frames)} frames, "
              f"distortion {codebook.fit_distortions[-1]:.6f}")
        return 0
    if not args.codebook or not args.features:
        raise ValidationError("tokenize --encode needs --codebook and --features")
    codebook = load_codebook(args.codebook)
    units = encode_units(codebook, read_features(args.features), unit_rate_hz=args.unit_rate)
    write_units(units, args.out)
    _manifest(args, {"unit_rate_hz": args.unit_rate}, {},
              {"units": args.out, "codebook": args.codebook}).write(str(args.out) + ".manifest.json")
    print(f"encoded {len(units)} units to {args.out}")
    return 0


def _build_model_config(args, metadata) -> ModelConfig:
    payload = _load_json_config(args.model_config)
    for key, value in (("vocab_size", metadata.vocab_size),
                       ("codebook_size", metadata.codebook_size),
                       ("feature_dim", metadata.feature_dim)):
        if key in payload and payload[key] != value:
            raise ValidationError(
                f"model config {key}={payload[key]} conflicts with corpus metadata {value}")
        payload[key] = value
    if args.hidden_dim is not None:
        payload["hidden_dim"] = args.hidden_dim
    return ModelConfig.from_dict(payload)


def _cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    model_config = _build_model_config(args, corpus.metadata)
    payload = _merge(_load_json_config(args.train_config), {
        "max_steps": args.max_steps,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "diag_weight": args.diag_weight,
        "diag_bandwidth": args.diag_bandwidth,
        "checkpoint_every": args.checkpoint_every,
    })
    payload.setdefault("max_steps", 1000)
    train_config = TrainConfig.from_dict(payload)

    train_utts = split_corpus(corpus, args.split)
    if not train_utts:
        raise ValidationError(f"split {args.split!r} selected no utterances")
    eval_utts = () if args.eval_split == "none" else split_corpus(corpus, args.eval_split)

    out = Path(args.out)
    _, summary = train(train_utts, model_config, train_config, out,
                       eval_utterances=eval_utts, resume_from=args.resume)
    _manifest(args,
              {"model_config": model_config.to_dict(), "train_config": train_config.to_dict(),
               "split": args.split, "eval_split": args.eval_split},
              {"seed": train_config.seed},
              {"checkpoint": out / "final", "metrics": out / "metrics.jsonl"},
              ).write(out / RUN_MANIFEST_NAME)
    shown = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in summary.items()}
    print(f"trained {train_config.max_steps} steps: {json.dumps(shown)}")
    return 0


def _cmd_infer(args) -> int:
    model, manifest, _ = load_checkpoint(args.ckpt)
    phonemes = read_phonemes(args.phonemes, model.config.vocab_size)
    video = VideoFeatureSequence(frames=read_features(args.video))
    units, trace = infer_units(model, phonemes, video, args.units_per_frame,
                               unit_rate_hz=args.unit_rate)
    write_units(units, args.out)
    artifacts = {"units": args.out, "checkpoint": args.ckpt}

    if args.attention_out:
        write_features(trace.attention[0].numpy(), args.attention_out)
        artifacts["attention"] = args.attention_out
    if args.vocoder:
        if args.vocoder in ("oracle-features", "oracle-sine"):
            if not args.codebook:
                raise ValidationError("--codebook is required for oracle vocoders")
            vocoder = OracleVocoder(load_codebook(args.codebook),
                                    mode=args.vocoder.removeprefix("oracle-"))
        else:
            vocoder = ExternalCommandVocoder(args.vocoder)
        rendered = synthesize(vocoder, units)
        if vocoder.produces_waveform:
            if not args.wav:
                raise ValidationError("--wav is required for waveform vocoders")
            write_wav(rendered, args.wav)
            artifacts["wav"] = args.wav
        else:
            if not args.synth_out:
                raise ValidationError("--synth-out is required for feature vocoders")
            write_features(rendered, args.synth_out)
            artifacts["features"] = args.synth_out

    config = {"units_per_frame": args.units_per_frame, "unit_rate_hz": args.unit_rate,
              "vocoder": args.vocoder, "model_config": manifest["model_config"]}
    _manifest(args, config, {"checkpoint_seed": manifest.get("seed")},
              artifacts).write(str(args.out) + ".manifest.json")
    print(f"inferred {len(units)} units to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    utterances = split_corpus(corpus, args.split)
    if not utterances:
        raise ValidationError(f"split {args.split!r} selected no utterances")
    codebook = load_codebook(args.codebook) if args.codebook else None
    model, manifest, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, utterances, codebook=codebook)
    report["checkpoint"] = str(args.ckpt)
    report["split"] = args.split
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    _manifest(args, {"split": args.split, "model_config": manifest["model_config"]},
              {"checkpoint_seed": manifest.get("seed")},
              {"report": args.out}).write(str(args.out) + ".manifest.json")
    aggregate = {k: round(v, 4) for k, v in report["aggregate"].items()}
    print(f"evaluated {report['num_utterances']} utterances: {json.dumps(aggregate)}")
    return 0


def _cmd_gradcheck(args) -> int:
    payload = _load_json_config(args.model_config)
    payload.setdefault("vocab_size", 10)
    payload.setdefault("codebook_size", 7)
    payload.setdefault("feature_dim", 5)
    payload.setdefault("hidden_dim", 8)
    payload.setdefault("attention_heads", 1)
    config = ModelConfig.from_dict(payload)
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    report = grad_check(config, args.tolerance, epsilon=args.epsilon, seed=seed)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
        _manifest(args, {"model_config": config.to_dict(), "tolerance": args.tolerance,
                         "epsilon": args.epsilon},
                  {"seed": seed}, {"report": args.out}).write(str(args.out) + ".manifest.json")
    status = "passed" if report["passed"] else "FAILED"
    print(f"gradient check {status}: max relative error {report['max_rel_err']:.3g} "
          f"(tolerance {args.tolerance:g})")
    if not report["passed"]:
        print("failing tensors: " + ", ".join(report["failed_tensors"]))
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="avo",
                     description="Desk-scale automatic voice over: align phonemes "
                                 "with video features and predict speech units.")
    parser.add_argument("--version", action="version", version=f"avo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic corpus")
    p.add_argument("--spec", help="synth spec JSON file")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--num-utterances", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--codebook-size", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--units-per-frame", type=int)
    p.add_argument("--feature-noise-std", type=float)
    p.add_argument("--unit-corruption-prob", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=_cmd_datagen)

    p = sub.add_parser("tokenize", help="fit a unit codebook or encode features")
    p.add_argument("--fit", action="store_true")
    p.add_argument("--encode", action="store_true")
    p.add_argument("--corpus", help="corpus directory (fit)")
    p.add_argument("--features", help="DSUF feature file (fit or encode)")
    p.add_argument("--codebook", help="codebook file (encode)")
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--unit-rate", type=float, default=50.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_tokenize)

    p = sub.add_parser("train", help="train the aligner and unit predictor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model-config", help="model config JSON")
    p.add_argument("--train-config", help="train config JSON")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--eval-split", default="test", choices=["train", "test", "all", "none"])
    p.add_argument("--max-steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--diag-weight", type=float)
    p.add_argument("--diag-bandwidth", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("infer", help="predict units for one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--phonemes", required=True, help="phoneme id text file")
    p.add_argument("--video", required=True, help="DSUF video feature file")
    p.add_argument("--n", "--units-per-frame", dest="units_per_frame",
                   type=int, required=True, help="units per video frame")
    p.add_argument("--out", required=True, help="output unit file")
    p.add_argument("--unit-rate", type=float, default=50.0)
    p.add_argument("--attention-out", help="write the alignment matrix as DSUF")
    p.add_argument("--vocoder",
                   help="oracle-features, oracle-sine, or an external command")
    p.add_argument("--codebook", help="codebook for oracle vocoders")
    p.add_argument("--wav", help="waveform output path")
    p.add_argument("--synth-out", help="feature output path (oracle-features)")
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("eval", help="compute metrics over a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--codebook", help="codebook for frame-disturbance features")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients against finite differences")
    p.add_argument("--model-config", help="model config JSON (tiny default otherwise)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(handler=_cmd_gradcheck)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version print and exit 0
        return int(exc.code or 0)
    args._argv = list(argv)
    try:
        return args.handler(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # the exit-code contract maps any runtime failure to 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
