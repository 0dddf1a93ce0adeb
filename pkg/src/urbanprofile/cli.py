"""Command-line entry point driving every pipeline stage.

Exit codes: 0 success, 1 pipeline/module error, 2 usage error. All outputs
land under --out; --seed threads through every stage; JSON config files carry
anything with more than a handful of parameters, and flags override them.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus, downstream, textpipe, train
from .model import ModelConfig, estimate_cost, load_checkpoint


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must look like 10x10, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanprofile",
        description="Synthetic region corpora, contrastive+captioning pretraining, "
        "indicator regression, and a read-only inference service.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic city corpus")
    p.add_argument("--city", required=True)
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--grid", type=_parse_grid, required=True, metavar="RxC")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--captions-per-image", type=float, default=4.5)
    p.add_argument("--inject-bad-prob", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--rules", help="refinement rules JSON")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("build-vocab", help="build the caption vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=2048)

    p = sub.add_parser("refine", help="re-run caption refinement over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rules")
    p.add_argument("--keep-threshold", type=float, default=0.5)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("pretrain", help="pretrain the joint model")
    p.add_argument("--config", help="train.json")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="splits.json (defaults to <corpus>/splits.json)")

    p = sub.add_parser("grid", help="grid search over lr and batch size")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget-steps", type=int, default=60)
    p.add_argument("--split")

    p = sub.add_parser("ablate", help="run the named ablation suite")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True, help="refined corpus dir")
    p.add_argument("--corpus-unrefined", help="raw-caption corpus dir")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--arms", default=",".join(train.ABLATION_SUITE))
    p.add_argument("--split")

    p = sub.add_parser("embed", help="extract frozen embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output .f32 path")

    p = sub.add_parser("finetune", help="fit the indicator head on frozen embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output head file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--split")

    p = sub.add_parser("eval", help="evaluate a head on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="metrics.csv path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split")

    p = sub.add_parser("transfer", help="cross-city transfer grid")
    p.add_argument("--checkpoints", required=True, help="comma-separated source checkpoints")
    p.add_argument("--heads", required=True, help="comma-separated source heads")
    p.add_argument("--corpora", required=True, help="comma-separated corpus dirs")
    p.add_argument("--out", required=True)
    p.add_argument("--refit-head", action="store_true")

    p = sub.add_parser("similar", help="rank regions by embedding similarity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpora", required=True, help="comma-separated corpus dirs")
    p.add_argument("--query", required=True, help="query region id")
    p.add_argument("--target-city", required=True)
    p.add_argument("-k", type=int, default=5)

    p = sub.add_parser("caption", help="greedy caption for a region image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--image", help=".imgf32 file")
    p.add_argument("--corpus")
    p.add_argument("--region")
    p.add_argument("--max-len", type=int, default=None)

    p = sub.add_parser("cost", help="term-wise op-count estimate")
    p.add_argument("--L", type=int, required=True, dest="n_layers")
    p.add_argument("--d", type=int, required=True, dest="dim")
    p.add_argument("--m1", type=int, required=True)
    p.add_argument("--m2", type=int, required=True)

    p = sub.add_parser("report", help="pivot metrics.csv and render charts")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", help="directory for SVG charts")

    p = sub.add_parser("serve", help="run the read-only inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--corpora", required=True, help="comma-separated corpus dirs")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--cors-origin", default="*")
    return parser


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _load_split(args, corpus_dir: Path) -> corpus.CorpusSplit:
    path = Path(args.split) if getattr(args, "split", None) else corpus_dir / "splits.json"
    return corpus.load_split(path)


def cmd_gen_corpus(args) -> int:
    config = corpus.CorpusConfig(
        height=args.height,
        width=args.width,
        patch_size=args.patch_size,
        noise_sigma_frac=args.noise_sigma,
        captions_per_image=args.captions_per_image,
        inject_bad_prob=args.inject_bad_prob,
        refine=not args.no_refine,
    )
    rules = textpipe.RefineRules.from_json(args.rules) if args.rules else None
    records = corpus.build_corpus(
        args.city,
        args.regions,
        args.grid,
        config,
        city_seed=args.seed,
        out_dir=args.out,
        overwrite=args.overwrite,
        rules=rules,
    )
    split = corpus.split_corpus([r.region_id for r in records], seed=args.seed)
    corpus.save_split(split, Path(args.out) / "splits.json")
    print(f"wrote {len(records)} regions to {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    records = corpus.load_corpus(args.corpus)
    vocab = textpipe.build_vocab(
        [c for r in records for c in r.captions], max_size=args.max_size
    )
    vocab.save(args.out)
    print(f"wrote vocabulary of {len(vocab)} tokens to {args.out}")
    return 0


def cmd_refine(args) -> int:
    out = Path(args.out)
    if (out / "manifest.jsonl").exists() and not args.overwrite:
        raise FileExistsError(f"{out / 'manifest.jsonl'} exists; pass --overwrite")
    rules = textpipe.RefineRules.from_json(args.rules) if args.rules else textpipe.RefineRules.default()
    records = corpus.load_corpus(args.corpus)
    removed = 0
    for record in records:
        before = sum(len(textpipe.split_sentences(c)) for c in record.captions)
        record.captions = textpipe.refine_captions(
            record.captions, record.scene, rules, keep_threshold=args.keep_threshold
        )
        after = sum(len(textpipe.split_sentences(c)) for c in record.captions)
        removed += before - after
    corpus.write_corpus(records, out)
    print(f"refined {len(records)} regions; dropped {removed} sentences")
    return 0


def _train_config(args) -> train.TrainConfig:
    config = train.TrainConfig.from_json(args.config) if args.config else train.TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def cmd_pretrain(args) -> int:
    records = corpus.load_corpus(args.corpus)
    split = _load_split(args, Path(args.corpus))
    vocab = textpipe.Vocab.load(args.vocab)
    config = _train_config(args)
    record, _ = train.pretrain(records, split, vocab, config, out_dir=args.out)
    print(
        f"pretrained {record.steps} steps in {record.wall_time:.1f}s; "
        f"best validation loss {record.best_val:.4f}; checkpoint {record.checkpoint_path}"
    )
    return 0


def cmd_grid(args) -> int:
    records = corpus.load_corpus(args.corpus)
    split = _load_split(args, Path(args.corpus))
    vocab = textpipe.Vocab.load(args.vocab)
    config = _train_config(args)
    best, table = train.grid_search(records, split, vocab, config, budget_steps=args.budget_steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.json", "w", encoding="utf-8") as fh:
        json.dump({"best": {"lr": best.lr, "batch_size": best.batch_size}, "table": table}, fh, indent=2)
    for row in table:
        print(f"lr={row['lr']:<8g} batch={row['batch_size']:<3d} val={row['val_loss']:.4f}")
    print(f"best: lr={best.lr} batch_size={best.batch_size}")
    return 0


def cmd_ablate(args) -> int:
    refined = corpus.load_corpus(args.corpus)
    corpora = {"refined": refined}
    corpora["unrefined"] = (
        corpus.load_corpus(args.corpus_unrefined) if args.corpus_unrefined else refined
    )
    split = _load_split(args, Path(args.corpus))
    vocab = textpipe.Vocab.load(args.vocab)
    config = _train_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    arms = tuple(a for a in args.arms.split(",") if a)
    _, summary = train.run_ablation_suite(
        corpora, split, vocab, seeds, config, arms=arms, out_dir=args.out
    )
    for row in summary:
        print(
            f"{row['ablation']:<16} {row['indicator']:<11} "
            f"r2={row['r2_mean']:.3f} +/- {row['r2_std']:.3f}"
        )
    return 0


def cmd_embed(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    records = corpus.load_corpus(args.corpus)
    embeddings = downstream.extract_embeddings(model, records)
    ids = [r.region_id for r in records]
    downstream.save_embeddings(args.out, ids, np.stack([embeddings[i] for i in ids]))
    print(f"wrote {len(ids)} embeddings to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    records = corpus.load_corpus(args.corpus)
    split = _load_split(args, Path(args.corpus))
    embeddings = downstream.extract_embeddings(model, records)
    head = downstream.fit_head(
        embeddings,
        {r.region_id: [r.indicators_log[k] for k in corpus.INDICATORS] for r in records},
        split,
        downstream.HeadConfig(seed=args.seed, epochs=args.epochs),
    )
    downstream.save_head(args.out, head)
    print(f"wrote indicator head to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    head = downstream.load_head(args.head)
    records = corpus.load_corpus(args.corpus)
    split = _load_split(args, Path(args.corpus))
    embeddings = downstream.extract_embeddings(model, records)
    city = records[0].city
    reports = downstream.evaluate_head(
        head, embeddings, records, split.test_ids, city, city, args.seed
    )
    for r in reports:
        print(f"{r.indicator:<11} r2={r.r2:.4f} rmse={r.rmse:.4f} mae={r.mae:.4f}")
    if args.out:
        downstream.write_metrics_csv(
            args.out, downstream.reports_to_rows(reports, "region_vlm", "full")
        )
    return 0


def cmd_transfer(args) -> int:
    checkpoints = args.checkpoints.split(",")
    heads = args.heads.split(",")
    corpora_dirs = args.corpora.split(",")
    if not (len(checkpoints) == len(heads) == len(corpora_dirs)):
        raise ValueError("need one checkpoint and head per corpus")
    rows = []
    loaded = []
    for ckpt, head_path, corpus_dir in zip(checkpoints, heads, corpora_dirs):
        model, _, _ = load_checkpoint(ckpt)
        head = downstream.load_head(head_path)
        records = corpus.load_corpus(corpus_dir)
        split = corpus.load_split(Path(corpus_dir) / "splits.json")
        loaded.append((model, head, records, split))
    for model, head, source_records, _ in loaded:
        source_city = source_records[0].city
        for _, _, target_records, target_split in loaded:
            target_city = target_records[0].city
            eval_ids = target_split.test_ids if source_city == target_city else None
            refit = target_split if args.refit_head and source_city != target_city else None
            reports = downstream.transfer_eval(
                model, head, target_records, source_city, eval_ids=eval_ids, refit_split=refit
            )
            rows.extend(downstream.reports_to_rows(reports, "region_vlm", "full"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    downstream.write_metrics_csv(out / "metrics.csv", rows)
    print(f"wrote {len(rows)} transfer cells to {out / 'metrics.csv'}")
    return 0


def cmd_similar(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    index = {}
    query_city = None
    for corpus_dir in args.corpora.split(","):
        records = corpus.load_corpus(corpus_dir)
        city = records[0].city
        index[city] = downstream.extract_embeddings(model, records)
        if args.query in index[city]:
            query_city = city
    if query_city is None:
        raise KeyError(f"query region {args.query!r} not found in the loaded corpora")
    results = downstream.find_similar(index, args.query, query_city, args.target_city, args.k)
    for region_id, cosine in results:
        print(f"{region_id}\t{cosine:.6f}")
    return 0


def cmd_caption(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    vocab = textpipe.Vocab.load(args.vocab)
    if args.image:
        image = corpus.read_imgf32(args.image)
    elif args.corpus and args.region:
        records = {r.region_id: r for r in corpus.load_corpus(args.corpus)}
        image = records[args.region].image
    else:
        raise ValueError("need either --image or --corpus with --region")
    print(downstream.greedy_caption(model, vocab, image, max_len=args.max_len))
    return 0


def cmd_cost(args) -> int:
    terms = estimate_cost(args.n_layers, args.dim, args.m1, args.m2)
    for name, value in terms.items():
        print(f"{name}: {value}")
    return 0


def cmd_report(args) -> int:
    rows = downstream.read_metrics_csv(args.metrics)
    table, rendered = render_report(rows, args.out)
    print(table)
    for path in rendered:
        print(f"wrote {path}")
    return 0


def render_report(rows: list[dict], out_dir: str | None) -> tuple[str, list[str]]:
    """Pivot metric rows to (model x indicator x city) and render bar charts."""
    indicators = sorted({r["indicator"] for r in rows})
    cities = sorted({r["target_city"] for r in rows})
    models = sorted({(r["model"], r["ablation"]) for r in rows})

    def cell(model, ablation, indicator, city):
        vals = [
            r["r2"]
            for r in rows
            if r["model"] == model
            and r["ablation"] == ablation
            and r["indicator"] == indicator
            and r["target_city"] == city
        ]
        return float(np.mean(vals)) if vals else None

    lines = []
    header = ["model/ablation"] + [f"{i}@{c}" for i in indicators for c in cities]
    lines.append("  ".join(f"{h:<18}" for h in header))
    best: dict[str, float] = {}
    grid = {}
    for model, ablation in models:
        for indicator in indicators:
            for city in cities:
                v = cell(model, ablation, indicator, city)
                grid[(model, ablation, indicator, city)] = v
                key = f"{indicator}@{city}"
                if v is not None and (key not in best or v > best[key]):
                    best[key] = v
    for model, ablation in models:
        row = [f"{model}/{ablation}"]
        for indicator in indicators:
            for city in cities:
                v = grid[(model, ablation, indicator, city)]
                if v is None:
                    row.append("-")
                else:
                    mark = "*" if v == best[f"{indicator}@{city}"] else " "
                    row.append(f"{v:.3f}{mark}")
        lines.append("  ".join(f"{c:<18}" for c in row))
    table = "\n".join(lines)

    rendered = []
    if out_dir:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for indicator in indicators:
            fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(cities), 3.2))
            width = 0.8 / max(1, len(models))
            for j, (model, ablation) in enumerate(models):
                values = [grid[(model, ablation, indicator, c)] or 0.0 for c in cities]
                ax.bar(
                    np.arange(len(cities)) + j * width, values, width, label=f"{ablation}"
                )
            ax.set_xticks(np.arange(len(cities)) + 0.4 - width / 2)
            ax.set_xticklabels(cities)
            ax.set_ylabel("r2")
            ax.set_title(indicator)
            ax.legend(fontsize=7)
            path = out / f"r2_{indicator}.svg"
            fig.savefig(path, format="svg")
            plt.close(fig)
            rendered.append(str(path))
    return table, rendered


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceState, build_app

    state = ServiceState.load(
        checkpoint=args.checkpoint,
        vocab_path=args.vocab,
        head_path=args.head,
        corpus_dirs=args.corpora.split(","),
    )
    app = build_app(state, cors_origin=args.cors_origin)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "build-vocab": cmd_build_vocab,
    "refine": cmd_refine,
    "pretrain": cmd_pretrain,
    "grid": cmd_grid,
    "ablate": cmd_ablate,
    "embed": cmd_embed,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "similar": cmd_similar,
    "caption": cmd_caption,
    "cost": cmd_cost,
    "report": cmd_report,
    "serve": cmd_serve,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, FileExistsError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
