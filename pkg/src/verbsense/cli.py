"""Command-line entry point.

Subcommands: ``validate``, ``train``, ``evaluate``, ``predict``, ``decode``,
``score``, ``baseline``, plus ``decode-eval`` for the three-condition
(baseline / predicted verb / oracle verb) translation evaluation.

Heavy imports stay inside functions so the ``MSK_THREADS`` cap can be
applied to the numeric libraries before they load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

MODALITY_TO_KIND = {"text": "textual", "image": "visual", "mm": "multimodal"}


class ConfigError(ValueError):
    """Raised for missing or inconsistent run configuration."""


def _apply_thread_cap() -> None:
    cap = os.environ.get("MSK_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def load_config(path, overrides=None) -> dict:
    """Read the sidecar JSON config; paths resolve relative to the file."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})")
    base = path.parent
    for key in ("manifest", "features", "embeddings", "checkpoint"):
        if cfg.get(key):
            cfg[key] = str((base / cfg[key]).resolve())
    if cfg.get("checkpoints"):
        cfg["checkpoints"] = {
            m: str((base / p).resolve()) for m, p in cfg["checkpoints"].items()
        }
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    cfg.setdefault("language", "de")
    return cfg


def _require(cfg: dict, *keys):
    for key in keys:
        if not cfg.get(key):
            raise ConfigError(f"config is missing required key {key!r}")


def _emit(report: dict, out_path=None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    sys.stdout.write(text)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")


def _load_dataset(cfg, need_features=True, need_embeddings=True):
    from . import corpus, features

    _require(cfg, "manifest")
    manifest = corpus.load_manifest(cfg["manifest"], language=cfg["language"])
    manifest = corpus.with_sidecar(manifest, feature_file=cfg.get("features"),
                                   embedding_file=cfg.get("embeddings"))
    store = None
    table = None
    if need_features:
        _require(cfg, "features")
        store = features.load_feature_store(cfg["features"])
    if need_embeddings:
        _require(cfg, "embeddings")
        table = features.load_embedding_table(cfg["embeddings"])
    return manifest, store, table


def cmd_validate(args) -> int:
    from . import corpus

    cfg = load_config(args.config, {"language": args.lang})
    manifest, store, table = _load_dataset(
        cfg, need_features=bool(cfg.get("features")),
        need_embeddings=bool(cfg.get("embeddings")),
    )
    if not manifest.samples:
        raise corpus.ManifestError(f"{cfg['manifest']}: manifest has no samples")
    vocab = corpus.build_label_vocab(manifest.samples)
    splits = {s: len(corpus.filter_split(manifest, s)) for s in corpus.SPLITS}
    if store is not None:
        for sample in manifest.samples:
            if sample.feature_row >= store.count:
                raise corpus.ManifestError(
                    f"sample {sample.id!r}: feature_row {sample.feature_row} out of "
                    f"range (feature store has {store.count} rows)"
                )
    report = {
        "ok": True,
        "samples": len(manifest.samples),
        "labels": vocab.size,
        "splits": splits,
        "feature_rows": store.count if store is not None else None,
        "feature_dim": store.dim if store is not None else None,
        "embedding_tokens": len(table) if table is not None else None,
        "embedding_dim": table.dim if table is not None else None,
    }
    _emit(report, args.out)
    return 0


def _train_config(cfg, seed_override=None):
    from .training import TrainConfig

    section = dict(cfg.get("train", {}))
    if seed_override is not None:
        section["seed"] = seed_override
    elif "seed" in cfg and "seed" not in section:
        section["seed"] = cfg["seed"]
    return TrainConfig(**section)


def cmd_train(args) -> int:
    from . import models, training

    cfg = load_config(args.config, {"language": args.lang, "modality": args.modality})
    _require(cfg, "modality")
    kind = MODALITY_TO_KIND.get(cfg["modality"])
    if kind is None:
        raise ConfigError(f"unknown modality {cfg['modality']!r}")
    manifest, store, table = _load_dataset(
        cfg, need_features=kind in ("visual", "multimodal"),
        need_embeddings=kind in ("textual", "multimodal"),
    )
    train_cfg = _train_config(cfg, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    params, history, vocab = training.train(
        manifest, store, table, kind, train_cfg,
        hidden_size=cfg.get("hidden_size", 128),
    )
    ckpt_path = out_dir / f"{cfg['modality']}.ckpt"
    history_path = out_dir / f"{cfg['modality']}_history.csv"
    models.save_checkpoint(params, ckpt_path)
    training.write_history(history, history_path)
    best = max(history, key=lambda r: (r.val_accuracy, -r.epoch))
    report = {
        "checkpoint": str(ckpt_path),
        "history": str(history_path),
        "modality": cfg["modality"],
        "language": cfg["language"],
        "labels": vocab.size,
        "epochs_run": len(history),
        "best_epoch": best.epoch,
        "best_val_accuracy": best.val_accuracy,
    }
    _emit(report, args.out)
    return 0


def _predict_labels(params, samples, store, table, vocab):
    """Predicted label index per sample, using the model's modality inputs."""
    from .training import build_inputs
    import numpy as np

    from .models import forward

    x_img, phrases, _ = build_inputs(samples, store, table, vocab, params.kind)
    logits = forward(params, x_img=x_img, q=phrases)
    return [int(i) for i in np.argmax(logits, axis=1)]


def cmd_evaluate(args) -> int:
    from . import corpus, metrics, models

    cfg = load_config(args.config, {"language": args.lang})
    checkpoints = dict(cfg.get("checkpoints") or {})
    if cfg.get("checkpoint"):
        modality = cfg.get("modality") or args.modality
        if not modality:
            raise ConfigError("config has 'checkpoint' but no 'modality'")
        checkpoints[modality] = cfg["checkpoint"]
    if not checkpoints:
        raise ConfigError("no checkpoints configured for evaluation")

    needs_img = any(m in ("image", "mm") for m in checkpoints)
    needs_txt = any(m in ("text", "mm") for m in checkpoints)
    manifest, store, table = _load_dataset(cfg, need_features=needs_img,
                                           need_embeddings=needs_txt)
    vocab = corpus.build_label_vocab(manifest.samples)
    train_samples = corpus.filter_split(manifest, "train")
    split = args.split
    eval_samples = corpus.filter_split(manifest, split)
    if not eval_samples:
        raise corpus.ManifestError(f"split {split!r} is empty")
    golds = [vocab.index[s.target_verb] for s in eval_samples]

    rows = {"text": None, "image": None, "mm": None}
    for modality, path in sorted(checkpoints.items()):
        params = models.load_checkpoint(path)
        expected = MODALITY_TO_KIND.get(modality)
        if params.kind != expected:
            raise ConfigError(
                f"checkpoint {path} holds a {params.kind} model, expected {expected}"
            )
        preds = _predict_labels(params, eval_samples, store, table, vocab)
        rows[modality] = metrics.accuracy(preds, golds).accuracy

    report = {
        "language": cfg["language"],
        "split": split,
        "n": len(eval_samples),
        "n_labels": vocab.size,
        "chance": metrics.chance_baseline(vocab.size),
        "majority": metrics.majority_baseline_accuracy(train_samples, eval_samples),
        "text": rows["text"],
        "image": rows["image"],
        "mm": rows["mm"],
    }
    _emit(report, args.out)
    return 0


def cmd_predict(args) -> int:
    from . import corpus, models

    cfg = load_config(args.config, {"language": args.lang})
    _require(cfg, "checkpoint")
    params = models.load_checkpoint(cfg["checkpoint"])
    manifest, store, table = _load_dataset(
        cfg, need_features=params.kind in ("visual", "multimodal"),
        need_embeddings=params.kind in ("textual", "multimodal"),
    )
    vocab = corpus.build_label_vocab(manifest.samples)
    samples = corpus.filter_split(manifest, args.split)
    if not samples:
        raise corpus.ManifestError(f"split {args.split!r} is empty")
    preds = _predict_labels(params, samples, store, table, vocab)
    report = {
        "split": args.split,
        "kind": params.kind,
        "predictions": [
            {"id": s.id, "gold": s.target_verb, "predicted": vocab.labels[p]}
            for s, p in zip(samples, preds)
        ],
    }
    _emit(report, args.out)
    return 0


def cmd_baseline(args) -> int:
    from . import corpus, metrics

    cfg = load_config(args.config, {"language": args.lang})
    manifest, _, _ = _load_dataset(cfg, need_features=False, need_embeddings=False)
    vocab = corpus.build_label_vocab(manifest.samples)
    train_samples = corpus.filter_split(manifest, "train")
    eval_samples = corpus.filter_split(manifest, args.split)
    if not eval_samples:
        raise corpus.ManifestError(f"split {args.split!r} is empty")
    report = {
        "language": cfg["language"],
        "split": args.split,
        "n": len(eval_samples),
        "n_labels": vocab.size,
        "chance": metrics.chance_baseline(vocab.size),
        "majority_label": corpus.majority_label(train_samples),
        "majority": metrics.majority_baseline_accuracy(train_samples, eval_samples),
    }
    _emit(report, args.out)
    return 0


def cmd_score(args) -> int:
    hyps = _read_token_lines(args.hyp)
    refs = _read_token_lines(args.ref)
    report = _score_report(hyps, refs,
                           _read_lines(args.verbs) if args.verbs else None)
    _emit(report, args.out)
    return 0


def _read_lines(path):
    return [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def _read_token_lines(path):
    return [line.split() for line in _read_lines(path)]


def _score_report(hyps, refs, verbs=None) -> dict:
    from . import metrics

    bleu = metrics.bleu_corpus(hyps, refs)
    report = {
        "bleu": bleu.bleu,
        "precisions": list(bleu.precisions),
        "brevity_penalty": bleu.brevity_penalty,
        "hyp_len": bleu.hyp_len,
        "ref_len": bleu.ref_len,
        "meteor": None,
        "verb_accuracy": None,
        "n": len(hyps),
    }
    if verbs is not None:
        report["verb_accuracy"] = metrics.verb_accuracy(hyps, verbs)
    return report


def _scorer_from_args(args):
    from . import decoding

    vocab = decoding.load_token_vocab(args.vocab)
    if args.eos not in vocab:
        raise ConfigError(f"eos token {args.eos!r} not in vocabulary {args.vocab}")
    eos = vocab[args.eos]
    scorer = decoding.load_replay_scorer(args.scorer, eos=eos)
    inverse = {i: t for t, i in vocab.items()}
    return scorer, vocab, inverse


def cmd_decode(args) -> int:
    from . import decoding

    scorer, vocab, inverse = _scorer_from_args(args)
    sequences = []
    if args.constraints:
        for line in _read_lines(args.constraints):
            sequences.append(decoding.tokenize_constraint(line, vocab))
    constraint = decoding.Constraint(sequences=tuple(sequences))
    hyp = decoding.decode(scorer, constraint, beam=args.beam, max_len=args.max_len)
    report = {
        "token_ids": list(hyp.tokens),
        "tokens": [inverse.get(t, f"<{t}>") for t in hyp.tokens],
        "logprob": hyp.logprob,
        "finished": hyp.finished,
        "constraint_tokens_met": hyp.state.met,
        "constraint_tokens_total": hyp.state.total,
    }
    _emit(report, args.out)
    return 0


def _surface_tokens(hyp, inverse, eos) -> list:
    return [inverse.get(t, f"<{t}>") for t in hyp.tokens if t != eos]


def cmd_decode_eval(args) -> int:
    from . import corpus, decoding, models

    cfg = load_config(args.config, {"language": args.lang})
    _require(cfg, "checkpoint")
    params = models.load_checkpoint(cfg["checkpoint"])
    manifest, store, table = _load_dataset(
        cfg, need_features=params.kind in ("visual", "multimodal"),
        need_embeddings=params.kind in ("textual", "multimodal"),
    )
    vocab = corpus.build_label_vocab(manifest.samples)
    scorer, tok_vocab, inverse = _scorer_from_args(args)

    sentences = []
    path = Path(args.sentences)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sentences.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: malformed JSON ({exc.msg})")
    if not sentences:
        raise ConfigError(f"{path}: no sentences to evaluate")

    conditions = ("baseline", "predicted_verb", "oracle_verb")
    outputs = {c: [] for c in conditions}
    details = []
    for sent in sentences:
        for key in ("id", "reference", "gold_verb", "row", "query"):
            if key not in sent:
                raise ConfigError(f"sentence {sent.get('id', '?')!r}: missing key {key!r}")
        x_img = store.row(sent["row"]) if store is not None else None
        phrase = None
        if table is not None:
            from .features import embed_phrase
            phrase = embed_phrase(sent["query"], table)
        pred_idx, _ = models.predict(params, x_img=x_img, q=phrase)
        predicted_verb = vocab.labels[pred_idx]

        baseline_hyp = decoding.beam_search(scorer, beam=args.beam, max_len=args.max_len)
        detail = {
            "id": sent["id"],
            "gold_verb": sent["gold_verb"],
            "predicted_verb": predicted_verb,
            "infeasible": {},
        }
        per_condition = {"baseline": baseline_hyp}
        for cond, verb in (("predicted_verb", predicted_verb),
                           ("oracle_verb", sent["gold_verb"])):
            try:
                constraint = decoding.verb_constraint(verb, tok_vocab)
                per_condition[cond] = decoding.decode(
                    scorer, constraint, beam=args.beam, max_len=args.max_len)
            except decoding.InfeasibleConstraintError as exc:
                # fall back to the unconstrained output, but say so
                per_condition[cond] = baseline_hyp
                detail["infeasible"][cond] = str(exc)
        for cond in conditions:
            tokens = _surface_tokens(per_condition[cond], inverse, scorer.eos)
            outputs[cond].append(tokens)
            detail[cond] = " ".join(tokens)
        details.append(detail)

    refs = [str(s["reference"]).split() for s in sentences]
    gold_verbs = [s["gold_verb"] for s in sentences]
    report = {
        "language": cfg["language"],
        "n": len(sentences),
        "conditions": {
            cond: _score_report(outputs[cond], refs, gold_verbs) for cond in conditions
        },
        "sentences": details,
    }
    _emit(report, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="verbsense",
        description="Cross-lingual visual verb sense disambiguation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="sidecar JSON config")
            p.add_argument("--lang", choices=("de", "es"), default=None)
        p.add_argument("--out", default=None, help="also write the JSON report here")

    p = sub.add_parser("validate", help="check manifest/features/embeddings consistency")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train one classifier and write a checkpoint")
    common(p)
    p.add_argument("--modality", choices=tuple(MODALITY_TO_KIND), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-split accuracy plus chance/majority rows")
    common(p)
    p.add_argument("--modality", choices=tuple(MODALITY_TO_KIND), default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-sample predictions of a checkpoint")
    common(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="chance and majority baselines only")
    common(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("score", help="BLEU and verb accuracy for tokenized files")
    common(p, config=False)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--verbs", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("decode", help="constrained beam search over a replay scorer")
    common(p, config=False)
    p.add_argument("--scorer", required=True, help="JSON-lines replay table")
    p.add_argument("--vocab", required=True, help="token<TAB>id vocabulary")
    p.add_argument("--constraints", default=None, help="one constraint phrase per line")
    p.add_argument("--eos", default="</s>")
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--max-len", type=int, default=20)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("decode-eval",
                       help="decode each sentence unconstrained / predicted / oracle")
    common(p)
    p.add_argument("--scorer", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--sentences", required=True, help="JSON-lines sentence set")
    p.add_argument("--eos", default="</s>")
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--max-len", type=int, default=20)
    p.set_defaults(func=cmd_decode_eval)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from . import corpus, decoding, features, models

    try:
        return args.func(args)
    except (ConfigError, corpus.ManifestError, features.FeatureFileError,
            features.EmbeddingFileError, models.CheckpointError,
            decoding.ScorerError, decoding.InfeasibleConstraintError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
