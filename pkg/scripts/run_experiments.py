#!/usr/bin/env python3
"""End-to-end experiment driver: corpora, pretraining, ablations, transfer.

Produces every artifact the explorer/service needs plus the metrics tables
and R2 bar charts. Sized for a workstation; pass --regions to shrink.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from urbanprofile import cli, corpus, downstream, textpipe, train
from urbanprofile.model import ModelConfig, load_checkpoint

CITIES = ("beijing_like", "shanghai_like", "guangzhou_like", "shenzhen_like")


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="experiments")
    parser.add_argument("--regions", type=int, default=2000)
    parser.add_argument("--grid-cols", type=int, default=50)
    parser.add_argument("--epochs", type=int, default=45)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--seed-base", type=int, default=100)
    return parser.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows_per_city = args.regions // args.grid_cols

    corpora = {}
    splits = {}
    t0 = time.time()
    for i, city in enumerate(CITIES):
        city_dir = out / "corpora" / city
        config = corpus.CorpusConfig(captions_per_image=4.5, inject_bad_prob=0.5)
        records = corpus.build_corpus(
            city, args.regions, (rows_per_city, args.grid_cols), config,
            city_seed=args.seed_base + i, out_dir=city_dir, overwrite=True,
        )
        split = corpus.split_corpus([r.region_id for r in records], seed=args.seed_base + i)
        corpus.save_split(split, city_dir / "splits.json")
        corpora[city] = records
        splits[city] = split
    print(f"[{time.time()-t0:.0f}s] built {len(CITIES)} corpora of {args.regions} regions")

    # raw-caption variant of the first city for the refinement ablation
    raw_config = corpus.CorpusConfig(captions_per_image=4.5, inject_bad_prob=0.5, refine=False)
    unrefined = corpus.build_corpus(
        CITIES[0], args.regions, (rows_per_city, args.grid_cols), raw_config,
        city_seed=args.seed_base, out_dir=out / "corpora" / f"{CITIES[0]}_raw", overwrite=True,
    )

    vocab = textpipe.build_vocab([c for r in corpora[CITIES[0]] for c in r.captions])
    vocab.save(out / "vocab.json")

    model_config = ModelConfig(vocab_size=0, learnable_temperature=True, temperature=0.07)
    train_config = train.TrainConfig(
        lr=2e-4, batch_size=32, epochs=args.epochs, seed=seeds[0], model=model_config
    )
    train_config.to_json(out / "train.json")

    print("running ablation suite...")
    t0 = time.time()
    rows, summary = train.run_ablation_suite(
        {"refined": corpora[CITIES[0]], "unrefined": unrefined},
        splits[CITIES[0]], vocab, seeds, train_config, out_dir=out / "ablation",
    )
    print(f"[{time.time()-t0:.0f}s] ablation suite done")
    for cell in summary:
        print(f"  {cell['ablation']:<16} {cell['indicator']:<11} r2={cell['r2_mean']:.3f}")

    print("pretraining one model per city for the transfer grid...")
    transfer_rows = []
    models = {}
    heads = {}
    for i, city in enumerate(CITIES):
        t0 = time.time()
        city_vocab = textpipe.build_vocab([c for r in corpora[city] for c in r.captions])
        record, model = train.pretrain(
            corpora[city], splits[city], city_vocab, train_config,
            out_dir=out / "runs" / city,
        )
        embeddings = downstream.extract_embeddings(model, corpora[city])
        heads[city] = downstream.fit_head(
            embeddings,
            {r.region_id: [r.indicators_log[k] for k in corpus.INDICATORS]
             for r in corpora[city]},
            splits[city],
        )
        downstream.save_head(out / "runs" / city / "head.uckpt", heads[city])
        models[city] = model
        print(f"  [{time.time()-t0:.0f}s] {city}: best_val={record.best_val:.3f}")

    for source in CITIES:
        for target in CITIES:
            eval_ids = splits[target].test_ids if source == target else None
            reports = downstream.transfer_eval(
                models[source], heads[source], corpora[target], source, eval_ids=eval_ids
            )
            transfer_rows.extend(downstream.reports_to_rows(reports, "region_vlm", "full"))
    downstream.write_metrics_csv(out / "transfer_metrics.csv", transfer_rows)

    table, rendered = cli.render_report(rows, str(out / "charts"))
    print(table)
    print(f"artifacts under {out}/")


if __name__ == "__main__":
    main()
