"""Command-line pipeline: synth | train | predict | eval | compare.

Configuration precedence is defaults < --config JSON file < explicit flags;
the effective configuration is written to the output directory for
provenance.  Exit codes: 0 success, 1 runtime failure, 2 usage or
validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import data, evaluation, training
from .encoder import EncoderConfig
from .model import Hyperparams
from .training import NonFiniteLossError, TrainerConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _err(message: str) -> None:
    if os.environ.get("NO_COLOR") or not sys.stderr.isatty():
        sys.stderr.write(f"error: {message}\n")
    else:
        sys.stderr.write(f"\x1b[31merror:\x1b[0m {message}\n")


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicitly passed flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _write_effective_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")


SYNTH_DEFAULTS = {f.name: f.default for f in dataclasses.fields(data.SynthSpec)}


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    try:
        spec = data.SynthSpec(**cfg)
    except (TypeError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    corpus = data.generate_synthetic(spec)
    _write_effective_config(cfg, args.out)
    corpus_path = os.path.join(args.out, "corpus.jsonl")
    data.save_corpus(corpus, corpus_path)
    with open(os.path.join(args.out, "true_facts.json"), "w", encoding="utf-8") as fh:
        json.dump({k: list(v) for k, v in sorted(corpus.true_facts.items())},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    observed = sum(sum(b.observed_d) for b in corpus.bags)
    true_count = sum(len(v) for v in corpus.true_facts.values())
    print(f"bags={len(corpus.bags)}")
    print(f"positive_bags={sum(1 for v in corpus.true_facts.values() if v)}")
    print(f"sentences={corpus.num_sentences}")
    print(f"true_facts={true_count}")
    print(f"observed_facts={observed}")
    print(f"dropped_facts={true_count - observed}")
    print(f"corpus={corpus_path}")
    return EXIT_OK


TRAIN_DEFAULTS = {
    **{f.name: f.default for f in dataclasses.fields(Hyperparams)},
    **{f.name: f.default for f in dataclasses.fields(TrainerConfig)},
    **{f.name: f.default for f in dataclasses.fields(EncoderConfig)},
}


def cmd_train(args) -> int:
    try:
        cfg = _resolve(args, TRAIN_DEFAULTS)
        hp = Hyperparams(**{f.name: cfg[f.name]
                            for f in dataclasses.fields(Hyperparams)})
        tc = TrainerConfig(**{f.name: cfg[f.name]
                              for f in dataclasses.fields(TrainerConfig)})
        ec = EncoderConfig(**{f.name: cfg[f.name]
                              for f in dataclasses.fields(EncoderConfig)})
    except (TypeError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE

    try:
        corpus = data.load_corpus(args.corpus)
        dev = None
        if args.dev:
            dev = data.load_corpus(args.dev, relation_names=corpus.relation_names,
                                   token_list=corpus.id_to_token)
    except data.CorpusFormatError as exc:
        _err(str(exc))
        return EXIT_USAGE

    fixed = None
    if args.fixed_vectors:
        try:
            fixed = data.load_fixed_vectors(args.fixed_vectors, corpus)
        except (data.CorpusFormatError, ValueError) as exc:
            _err(str(exc))
            return EXIT_USAGE

    _write_effective_config(cfg, args.out)
    log_lines = []

    def tee(line: str) -> None:
        print(line)
        log_lines.append(line)

    try:
        result = training.train(corpus, tc, hp, dev=dev, fixed_vectors=fixed,
                                encoder_config=ec, log=tee)
    except NonFiniteLossError as exc:
        _err(f"{exc} (epoch={exc.epoch}, bag={exc.pair_id})")
        return EXIT_RUNTIME
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE

    with open(os.path.join(args.out, "train_log.txt"), "w", encoding="utf-8") as fh:
        for line in log_lines:
            fh.write(line + "\n")

    if result.params is not None:
        ckpt_path = os.path.join(args.out, "checkpoint.json")
        data.save_checkpoint(result.params, ckpt_path, vocab=corpus.id_to_token,
                             relation_names=corpus.relation_names,
                             hyperparams=cfg)
    else:
        ckpt_path = os.path.join(args.out, "theta.json")
        with open(ckpt_path, "w", encoding="utf-8") as fh:
            json.dump({"shape": list(result.theta.shape),
                       "data": result.theta.reshape(-1).tolist()},
                      fh, sort_keys=True)
            fh.write("\n")
    print(f"checkpoint={ckpt_path}")
    return EXIT_OK


def _load_for_eval(args):
    ckpt = data.load_checkpoint(args.checkpoint)
    corpus = data.load_corpus(args.corpus, relation_names=ckpt.relation_names,
                              token_list=ckpt.vocab)
    if ckpt.params.vocab_size != len(ckpt.vocab):
        raise data.CheckpointError(
            f"checkpoint vocab length {len(ckpt.vocab)} != embedding rows "
            f"{ckpt.params.vocab_size}")
    return ckpt, corpus


def cmd_predict(args) -> int:
    try:
        cfg = _resolve(args, {"seed": 0})
        ckpt, corpus = _load_for_eval(args)
    except (data.CorpusFormatError, data.CheckpointError, ValueError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    preds = evaluation.predict_mentions(corpus, ckpt.params)
    _write_effective_config(cfg, args.out)
    path = os.path.join(args.out, "predictions.jsonl")
    evaluation.save_predictions(preds, path, ckpt.relation_names)
    print(f"predictions={path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = _resolve(args, {"seed": 0})
        ckpt, corpus = _load_for_eval(args)
    except (data.CorpusFormatError, data.CheckpointError, ValueError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    _write_effective_config(cfg, args.out)
    preds = evaluation.predict_mentions(corpus, ckpt.params)

    metrics: dict = {"num_predictions": len(preds)}
    held = evaluation.heldout_pr(preds, corpus)
    evaluation.write_pr_csv(held, os.path.join(args.out, "heldout.csv"))
    metrics["auc_heldout"] = held.auc

    gold = corpus.gold_mention_map()
    if gold:
        curve = evaluation.sentential_pr(preds, gold, corpus.na_id)
        evaluation.write_pr_csv(curve, os.path.join(args.out, "sentential.csv"))
        metrics["auc_sentential"] = curve.auc
        p_at = {}
        for j, name in enumerate(ckpt.relation_names):
            per_rel = {}
            for n in (100, 500):
                prec, used = evaluation.p_at_n(preds, gold, j, n, corpus.na_id)
                per_rel[str(n)] = {"precision": prec, "n_used": used}
            p_at[name] = per_rel
        metrics["p_at_n"] = p_at
        in_curve, out_curve = evaluation.in_out_kb_split(
            preds, gold, corpus.kb_facts(), corpus.na_id)
        metrics["auc_in_kb"] = None if in_curve is None else in_curve.auc
        metrics["auc_out_kb"] = None if out_curve is None else out_curve.auc
    else:
        metrics["auc_sentential"] = None
        metrics["note"] = "no gold labels in corpus; sentential metrics omitted"

    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"metrics={os.path.join(args.out, 'metrics.json')}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        cfg = _resolve(args, {"seed": 0, "iterations": 10_000})
        gold_corpus = data.load_corpus(args.gold)
        preds_a = evaluation.load_predictions(args.preds_a, gold_corpus.relation_names)
        preds_b = evaluation.load_predictions(args.preds_b, gold_corpus.relation_names)
    except (data.CorpusFormatError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    if args.out:
        _write_effective_config(cfg, args.out)
    keys_a = {p.key for p in preds_a}
    keys_b = {p.key for p in preds_b}
    if keys_a != keys_b:
        _err(f"prediction files cover different sentences "
             f"({len(keys_a ^ keys_b)} differ)")
        return EXIT_USAGE
    gold = gold_corpus.gold_mention_map()
    if not gold:
        _err("gold corpus has no gold labels")
        return EXIT_USAGE
    na = gold_corpus.na_id
    auc_a = evaluation.sentential_pr(preds_a, gold, na).auc
    auc_b = evaluation.sentential_pr(preds_b, gold, na).auc
    p = evaluation.paired_bootstrap(preds_a, preds_b, gold, na,
                                    iterations=cfg["iterations"], seed=cfg["seed"])
    print(f"auc_a={auc_a}")
    print(f"auc_b={auc_b}")
    print(f"p_value={p}")
    print(f"iterations={cfg['iterations']}")
    return EXIT_OK


def _add_common(sub, out_required=True):
    sub.add_argument("--config", help="JSON file overriding defaults")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relex",
                                     description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic corpus")
    _add_common(synth)
    for name, default in SYNTH_DEFAULTS.items():
        if name == "seed":
            continue
        kind = type(default)
        synth.add_argument(f"--{name.replace('_', '-')}", dest=name,
                           type=float if kind is float else int, default=None)
    synth.set_defaults(func=cmd_synth)

    tr = subs.add_parser("train", help="train a model")
    _add_common(tr)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--dev", help="gold-labeled dev corpus for checkpoint selection")
    tr.add_argument("--fixed-vectors", dest="fixed_vectors",
                    help="JSON table for fixed_vectors representations")
    for name, default in TRAIN_DEFAULTS.items():
        if name == "seed":
            continue
        flag = f"--{name.replace('_', '-')}"
        if isinstance(default, bool):
            group = tr.add_mutually_exclusive_group()
            group.add_argument(flag, dest=name, action="store_true", default=None)
            group.add_argument(f"--no-{name.replace('_', '-')}", dest=name,
                               action="store_false", default=None)
        elif isinstance(default, str):
            tr.add_argument(flag, dest=name, default=None)
        else:
            tr.add_argument(flag, dest=name,
                            type=type(default), default=None)
    tr.set_defaults(func=cmd_train)

    pred = subs.add_parser("predict", help="write mention predictions")
    _add_common(pred)
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--corpus", required=True)
    pred.set_defaults(func=cmd_predict)

    ev = subs.add_parser("eval", help="evaluate a checkpoint on a corpus")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.set_defaults(func=cmd_eval)

    cmp_ = subs.add_parser("compare", help="paired bootstrap between two systems")
    _add_common(cmp_, out_required=False)
    cmp_.add_argument("--preds-a", dest="preds_a", required=True)
    cmp_.add_argument("--preds-b", dest="preds_b", required=True)
    cmp_.add_argument("--gold", required=True, help="gold-labeled corpus")
    cmp_.add_argument("--iterations", type=int, default=None)
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit 1
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
