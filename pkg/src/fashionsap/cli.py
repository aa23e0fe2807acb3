"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 runtime error. A pre-training run
writes `config.json`, `vocab.txt`, `loss_log.jsonl` and checkpoints into its
output directory; downstream commands locate the config and vocabulary next
to the given checkpoint unless overridden.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data_io, pretrain as pretrain_mod
from .downstream import classify as classify_mod
from .downstream import gradcam as gradcam_mod
from .downstream import retrieval as retrieval_mod
from .downstream import tmir as tmir_mod
from .errors import FashionSAPError, InvalidInputError, UsageError
from .model.config import ModelConfig, TrainConfig, configs_from_dict
from .model.network import FashionSAPModel
from .taxonomy import default_table, map_category
from .textpipe import LexicalResource, Vocabulary, synonym_substitute


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    if getattr(args, "config", None):
        mc, tc = data_io.parse_config(args.config)
    else:
        mc, tc = configs_from_dict({})
    if getattr(args, "seed", None) is not None:
        tc.seed = args.seed
    import os

    env_seed = os.environ.get(data_io.SEED_ENV_VAR)
    if env_seed is not None:
        tc.seed = int(env_seed)
    return mc, tc


def _sibling(path, name: str, override) -> Path:
    if override:
        return Path(override)
    candidate = Path(path).parent / name
    if not candidate.exists():
        raise InvalidInputError(f"{name} not found next to {path}; pass it explicitly")
    return candidate


def _restore_model(args) -> tuple[FashionSAPModel, Vocabulary, TrainConfig]:
    config_path = _sibling(args.ckpt, "config.json", getattr(args, "config", None))
    mc, tc = data_io.parse_config(config_path)
    vocab = Vocabulary.load(_sibling(args.ckpt, "vocab.txt", getattr(args, "vocab", None)))
    mc = dataclasses.replace(mc, vocab_size=len(vocab))
    model = FashionSAPModel(mc, seed=tc.seed)
    model.load(args.ckpt)
    if getattr(args, "seed", None) is not None:
        tc.seed = args.seed
    return model, vocab, tc


def _write_config(out_dir: Path, mc: ModelConfig, tc: TrainConfig) -> None:
    merged = {**dataclasses.asdict(mc), **dataclasses.asdict(tc)}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(merged, indent=1, sort_keys=True), encoding="utf-8")


# -- subcommand handlers -----------------------------------------------------


def _cmd_taxonomy(args) -> None:
    if args.action != "lookup":
        raise UsageError("taxonomy supports: lookup <category>")
    print(map_category(args.category, default_table()).name)


def _cmd_synth(args) -> None:
    spec = data_io.SynthSpec(n_items=args.items, seed=args.seed, image_size=args.image_size)
    corpus = data_io.generate_synthetic(spec, args.out)
    print(corpus)


def _cmd_preprocess(args) -> None:
    records = data_io.load_corpus(args.input, check_images=False)
    lex = LexicalResource.load(args.lex)
    rng = np.random.default_rng(np.random.SeedSequence([0x9E9, args.seed]))
    for rec in records:
        pools = [a.name for a in rec.enum_attrs] + [a.value for a in rec.enum_attrs]
        pools += [a.label for a in rec.binary_attrs]
        if not pools:
            continue
        pick = int(rng.integers(len(pools)))
        replaced = synonym_substitute(pools[pick], lex, rng)
        n_enum = len(rec.enum_attrs)
        if pick < n_enum:
            rec.enum_attrs[pick] = dataclasses.replace(rec.enum_attrs[pick], name=replaced)
        elif pick < 2 * n_enum:
            rec.enum_attrs[pick - n_enum] = dataclasses.replace(
                rec.enum_attrs[pick - n_enum], value=replaced
            )
        else:
            rec.binary_attrs[pick - 2 * n_enum] = dataclasses.replace(
                rec.binary_attrs[pick - 2 * n_enum], label=replaced
            )
    data_io.write_corpus(records, args.out)
    vocab = pretrain_mod.corpus_vocabulary(records)
    vocab.save(args.vocab)
    print(args.out)


def _cmd_pretrain(args) -> None:
    mc, tc = _load_configs(args)
    records = data_io.load_corpus(args.corpus, images_dir=args.images)
    if not records:
        raise InvalidInputError(f"{args.corpus}: corpus is empty")
    extra_texts = []
    if args.triples:
        extra_texts = [t.text for t in tmir_mod.load_triples(args.triples)]
    lex = LexicalResource.load(args.lex) if args.lex else LexicalResource()
    images_dir = args.images if args.images else Path(args.corpus).parent
    trainer = pretrain_mod.Pretrainer(
        mc, tc, records, images_dir, lex=lex, extra_vocab_texts=extra_texts
    )
    out = Path(args.out)
    _write_config(out, trainer.cfg, tc)
    if args.resume:
        trainer.resume(args.resume)
    final = trainer.run(out)
    print(final)


def _finetune_common(args):
    model, vocab, tc = _restore_model(args)
    if args.lr is not None:
        tc.lr = args.lr
    if args.steps is not None:
        tc.steps = args.steps
    records = data_io.load_corpus(args.corpus, images_dir=args.images)
    images_dir = args.images if args.images else Path(args.corpus).parent
    out = Path(args.out)
    _write_config(out, model.cfg, tc)
    vocab.save(out / "vocab.txt")
    return model, vocab, tc, records, images_dir, out


def _cmd_finetune(args) -> None:
    model, vocab, tc, records, images_dir, out = _finetune_common(args)
    if args.task == "retrieval":
        final = retrieval_mod.finetune_retrieval(model, tc, records, images_dir, vocab, out)
    elif args.task == "classify":
        final, _, _, _ = classify_mod.finetune_classify(model, tc, records, images_dir, vocab, out)
    elif args.task == "tmir":
        if not args.triples:
            raise UsageError("finetune tmir requires --triples")
        triples = tmir_mod.load_triples(args.triples)
        final = tmir_mod.finetune_tmir(model, tc, records, triples, images_dir, vocab, out)
    else:
        raise UsageError(f"unknown finetune task {args.task!r}")
    print(final)


def _eval_records(args, records):
    if args.split == "all":
        return records
    return [r for r in records if r.split == args.split]


def _cmd_eval(args) -> None:
    model, vocab, _ = _restore_model(args)
    records = data_io.load_corpus(args.corpus, images_dir=args.images)
    images_dir = args.images if args.images else Path(args.corpus).parent
    if args.task == "retrieval":
        rows = _eval_records(args, records)
        index = retrieval_mod.encode_corpus(model, rows, images_dir, vocab)
        ks = tuple(int(k) for k in args.k.split(","))
        if args.protocol == "subset":
            report = retrieval_mod.subset_protocol_eval(
                index, rows, n_queries=args.queries, n_negatives=args.negatives,
                n_sets=args.sets, seed=args.seed or 0, ks=ks,
            )
        else:
            report = retrieval_mod.full_protocol_eval(index, ks=ks)
    elif args.task == "classify":
        labels_path = _sibling(args.ckpt, "labels.json", args.labels)
        cat_map, sub_map = classify_mod.load_label_maps(labels_path)
        heads, cat_map, sub_map = classify_mod.load_classifier(model, args.ckpt, labels_path)
        rows = _eval_records(args, records)
        report = classify_mod.evaluate_classifier(
            model, heads, rows, images_dir, vocab, cat_map, sub_map
        )
    elif args.task == "tmir":
        if not args.triples:
            raise UsageError("eval tmir requires --triples")
        triples = [t for t in tmir_mod.load_triples(args.triples)
                   if args.split == "all" or t.split == args.split]
        task = tmir_mod.TmirTask(model, records, images_dir, vocab)
        rng = np.random.default_rng(np.random.SeedSequence([0xA11, args.seed or 0]))
        targets = sorted({t.target for t in triples})
        pool = sorted({r.item_id for r in records} - set(targets))
        extra = max(0, args.gallery - len(targets))
        gallery = targets + [pool[i] for i in rng.permutation(len(pool))[:extra].tolist()]
        gallery = sorted(gallery[: max(args.gallery, len(targets))])
        ks = tuple(int(k) for k in args.k.split(","))
        report = tmir_mod.evaluate_tmir(task, triples, gallery, ks=ks)
    else:
        raise UsageError(f"unknown eval task {args.task!r}")
    print(json.dumps(report, indent=1, sort_keys=True))


def _cmd_gradcam(args) -> None:
    model, vocab, _ = _restore_model(args)
    records = data_io.load_corpus(args.corpus, images_dir=args.images)
    images_dir = Path(args.images) if args.images else Path(args.corpus).parent
    by_id = {r.item_id: r for r in records}
    if args.item not in by_id:
        raise InvalidInputError(f"item {args.item!r} not in corpus")
    rec = by_id[args.item]
    amap = gradcam_mod.grad_cam_for_word(
        model, rec.caption, images_dir / rec.image_ref, args.word, vocab, layer=args.layer
    )
    gradcam_mod.save_pgm(args.out, amap)
    print(args.out)


# -- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="fashionsap", description="Desk-scale fashion vision-language pre-training")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("taxonomy", help="fashion-symbol lookups")
    t.add_argument("action", choices=["lookup"])
    t.add_argument("category")
    t.set_defaults(func=_cmd_taxonomy)

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--image-size", type=int, default=32)
    s.set_defaults(func=_cmd_synth)

    pre = sub.add_parser("preprocess", help="synonym substitution + vocabulary build")
    pre.add_argument("--input", required=True)
    pre.add_argument("--vocab", required=True)
    pre.add_argument("--lex", required=True)
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--out", required=True)
    pre.set_defaults(func=_cmd_preprocess)

    tr = sub.add_parser("pretrain", help="run the pre-training loop")
    tr.add_argument("--config")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--images")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--resume")
    tr.add_argument("--lex")
    tr.add_argument("--triples", help="optional modification sidecar, folded into the vocabulary")
    tr.set_defaults(func=_cmd_pretrain)

    ft = sub.add_parser("finetune", help="fine-tune a downstream task")
    ft.add_argument("task", choices=["retrieval", "classify", "tmir"])
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--corpus", required=True)
    ft.add_argument("--images")
    ft.add_argument("--out", required=True)
    ft.add_argument("--config")
    ft.add_argument("--vocab")
    ft.add_argument("--triples")
    ft.add_argument("--seed", type=int)
    ft.add_argument("--lr", type=float)
    ft.add_argument("--steps", type=int)
    ft.set_defaults(func=_cmd_finetune)

    ev = sub.add_parser("eval", help="evaluate a downstream task")
    ev.add_argument("task", choices=["retrieval", "classify", "tmir"])
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--images")
    ev.add_argument("--config")
    ev.add_argument("--vocab")
    ev.add_argument("--protocol", choices=["subset", "full"], default="subset")
    ev.add_argument("--queries", type=int, default=100)
    ev.add_argument("--negatives", type=int, default=7)
    ev.add_argument("--sets", type=int, default=5)
    ev.add_argument("--k", default="1,5,10")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--split", default="test", help="test|val|train|all")
    ev.add_argument("--labels")
    ev.add_argument("--triples")
    ev.add_argument("--gallery", type=int, default=50)
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("gradcam", help="write a word's cross-attention map as PGM")
    gc.add_argument("--ckpt", required=True)
    gc.add_argument("--corpus", required=True)
    gc.add_argument("--images")
    gc.add_argument("--config")
    gc.add_argument("--vocab")
    gc.add_argument("--item", required=True)
    gc.add_argument("--word", required=True)
    gc.add_argument("--layer", type=int, default=1)
    gc.add_argument("--out", required=True)
    gc.set_defaults(func=_cmd_gradcam)

    return p


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FashionSAPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
