"""Command-line surface tying the pipeline together.

Commands: gen-data, tokenizer-train, features-extract, train, avg-ckpt,
decode, eval, probe. All paths are relative to ``--workspace``. Every
command is deterministic given identical inputs and seeds; decoding never
applies augmentation. Exit codes: 0 ok, 1 usage, 2 data/config error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .audio import logmel, read_wav
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .dataio import (
    Transcriber,
    evaluate_transcriber,
    load_manifest,
    prepare_examples,
    prepare_probe_items,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MmasrError,
    NumericsError,
    UndefinedMetricError,
)
from .metrics import grounding_probe, wer
from .model import Model
from .synthetic import SyntheticSpec, generate, generate_visual_pretrain
from .tensorio import write_tensor
from .tokenizer import Vocabulary, normalize, train_unigram
from .training import CheckpointStore, average_checkpoints, train as run_training
from . import visual_pretrain


class UsageError(MmasrError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_experiment(args) -> tuple[ExperimentConfig, Path]:
    root = Path(args.workspace)
    return load_config(root / args.config), root


def _build_model_from_checkpoint(cfg: ExperimentConfig, root: Path, ckpt_path):
    ckpt = load_checkpoint(root / ckpt_path)
    vocab = Vocabulary.load(root / cfg.tokenizer)
    model = Model(cfg.model_config(vocab.size), seed=cfg.init_seed)
    model.load_all(ckpt)
    if ckpt.feature_stats is None:
        raise CheckpointError(f"{ckpt_path}: no feature statistics stored")
    return model, vocab, ckpt


def cmd_gen_data(args) -> int:
    root = Path(args.workspace)
    spec = SyntheticSpec(
        n_words=args.n_words,
        n_homophone_pairs=args.n_homophone_pairs,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        min_words=args.min_words,
        max_words=args.max_words,
        snr_db=args.snr_db,
        image_size=args.image_size,
        seed=args.seed,
    )
    paths = generate(spec, root / args.out, manifest_prefix=args.out)
    if args.visual_pretrain:
        paths["visual_pretrain"] = generate_visual_pretrain(
            spec, args.visual_pretrain, root / args.out, manifest_prefix=args.out
        )
    for name, path in sorted(paths.items()):
        print(f"{name}\t{path}")
    return 0


def cmd_tokenizer_train(args) -> int:
    root = Path(args.workspace)
    entries = load_manifest(root / args.manifest, root)
    vocab = train_unigram(
        [e.text for e in entries],
        target_size=args.target_size,
        seed_max_len=args.seed_max_len,
        em_iters=args.em_iters,
        prune_fraction=args.prune_fraction,
    )
    out = root / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    print(f"vocabulary of {vocab.size} ids written to {out}")
    return 0


def cmd_features_extract(args) -> int:
    cfg, root = _load_experiment(args)
    entries = load_manifest(root / args.manifest, root)
    out_dir = root / args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    frontend = cfg.frontend_config()
    lines = []
    for entry in entries:
        if entry.audio is None:
            raise DataError(f"{entry.utt_id}: manifest entry has no audio")
        feats = logmel(read_wav(root / entry.audio), frontend).values
        rel = f"{args.out_dir}/{entry.utt_id}.mmt"
        write_tensor(root / rel, feats.astype(np.float32))
        record = {"utt_id": entry.utt_id, "audio": rel, "text": entry.text}
        if entry.image is not None:
            record["image"] = entry.image
        if entry.visual_embedding is not None:
            record["visual_embedding"] = entry.visual_embedding
        import json

        lines.append(json.dumps(record, sort_keys=True))
    (root / args.out_manifest).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} feature files under {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg, root = _load_experiment(args)
    out_dir = root / args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    # idempotent rerun: clear previous checkpoints and log
    for old in out_dir.glob("*.ckpt"):
        old.unlink()
    for old in (out_dir / CheckpointStore.INDEX, out_dir / "train.log"):
        old.unlink(missing_ok=True)

    if cfg.task == "visual-pretrain":
        entries = load_manifest(root / args.train, root)
        store = visual_pretrain.train_classifier(cfg, entries, root, out_dir)
        print(f"visual pretraining done; best {store.best_path()}")
        return 0

    vocab = Vocabulary.load(root / cfg.tokenizer)
    train_entries = load_manifest(root / args.train, root)
    val_entries = load_manifest(root / args.val, root)
    frontend = cfg.frontend_config()
    visual_cfg = cfg.visual_config() if cfg.fusion_mode != "none" else None
    train_examples, stats = prepare_examples(train_entries, root, frontend, vocab,
                                             visual_cfg=visual_cfg)
    val_examples, _ = prepare_examples(val_entries, root, frontend, vocab, stats=stats,
                                       visual_cfg=visual_cfg)

    model = Model(cfg.model_config(vocab.size), seed=cfg.init_seed)
    model.configure_components(cfg.component_plans(root, model.components))
    for component in model.components:
        print(
            f"{component}: {model.parameter_count(component)} params, "
            f"{model.parameter_count(component, trainable_only=True)} trainable"
        )
    print(f"total trainable: {model.parameter_count(trainable_only=True)}")

    store = run_training(model, train_examples, val_examples, cfg.train_config(),
                         out_dir, feature_stats=stats)
    print(f"trained {cfg.epochs} epochs; best checkpoint {store.best_path()}")
    return 0


def cmd_avg_ckpt(args) -> int:
    root = Path(args.workspace)
    store = CheckpointStore(root / args.store)
    ckpt = average_checkpoints(store, n=args.n)  # warns when the store is smaller
    save_checkpoint(root / args.out, ckpt)
    print(f"averaged {ckpt.metadata['averaged_over']} checkpoints into {root / args.out}")
    return 0


def cmd_decode(args) -> int:
    cfg, root = _load_experiment(args)
    model, vocab, ckpt = _build_model_from_checkpoint(cfg, root, args.checkpoint)
    entries = load_manifest(root / args.manifest, root)
    visual_cfg = cfg.visual_config() if cfg.fusion_mode != "none" else None
    items = prepare_probe_items(entries, root, cfg.frontend_config(),
                                ckpt.feature_stats, visual_cfg)
    transcriber = Transcriber(model, vocab, beam_size=args.beam_size or cfg.beam_size,
                              length_penalty=cfg.length_penalty, max_len=cfg.max_decode_len)
    lines = []
    for item in items:
        lines.append(f"{item.utt_id}\t{transcriber.transcribe(item.features, item.visual)}")
    (root / args.out).write_text("\n".join(lines) + "\n")
    print(f"decoded {len(lines)} utterances into {root / args.out}")
    return 0


def cmd_eval(args) -> int:
    root = Path(args.workspace)
    entries = load_manifest(root / args.manifest, root)
    refs = {e.utt_id: normalize(e.text).split() for e in entries}
    hyps = {}
    for lineno, line in enumerate((root / args.hyps).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            utt_id, text = line.split("\t", 1)
        except ValueError:
            utt_id, text = line.strip(), ""
        hyps[utt_id] = text.split()
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise DataError(f"{args.hyps}: no hypotheses for {missing[:5]}")
    ids = sorted(refs)
    report = wer([refs[u] for u in ids], [hyps[u] for u in ids], ids)
    out_lines = report.machine_lines()
    (root / args.out).write_text("\n".join(out_lines) + "\n")
    print(report.table())
    print(f"corpus WER {report.wer:.4f}")
    return 0


def cmd_probe(args) -> int:
    cfg, root = _load_experiment(args)
    model, vocab, ckpt = _build_model_from_checkpoint(cfg, root, args.checkpoint)
    if not model.is_multimodal:
        raise ConfigError("grounding probe needs a multimodal experiment config")
    entries = load_manifest(root / args.manifest, root)
    items = prepare_probe_items(entries, root, cfg.frontend_config(),
                                ckpt.feature_stats, cfg.visual_config())
    transcriber = Transcriber(model, vocab, beam_size=args.beam_size or cfg.beam_size,
                              length_penalty=cfg.length_penalty, max_len=cfg.max_decode_len)
    report = grounding_probe(transcriber, items, args.pairing, seed=args.probe_seed)
    (root / args.out).write_text(
        f"# pairing {args.pairing}\n" + "\n".join(report.machine_lines()) + "\n"
    )
    print(f"pairing={args.pairing} WER {report.wer:.4f} over {report.n_ref} ref words")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="mmasr", description=__doc__)
    parser.add_argument("--workspace", default=".", help="root for all relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic audio-visual corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-words", type=int, default=40)
    p.add_argument("--n-homophone-pairs", type=int, default=4)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--min-words", type=int, default=5)
    p.add_argument("--max-words", type=int, default=9)
    p.add_argument("--snr-db", type=float, default=30.0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--visual-pretrain", type=int, default=0, metavar="N_PER_CLASS")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("tokenizer-train", help="train the unigram subword vocabulary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-size", type=int, default=200)
    p.add_argument("--seed-max-len", type=int, default=6)
    p.add_argument("--em-iters", type=int, default=2)
    p.add_argument("--prune-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("features-extract", help="precompute log-mel feature files")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-manifest", required=True)
    p.set_defaults(func=cmd_features_extract)

    p = sub.add_parser("train", help="train a model per the experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", default=None)
    p.set_defaults(func=cmd_train)
    p.add_argument("--out", required=True)

    p = sub.add_parser("avg-ckpt", help="average the n best checkpoints")
    p.add_argument("--store", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_avg_ckpt)

    p = sub.add_parser("decode", help="beam-decode a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam-size", type=int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="matched/mismatched/none grounding probe")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairing", choices=("matched", "mismatched", "none"), required=True)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--beam-size", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train" and args.func is cmd_train:
            cfg, _ = _load_experiment(args)
            if cfg.task == "asr" and args.val is None:
                raise UsageError("train task asr requires --val")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, ConfigError, CheckpointError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
