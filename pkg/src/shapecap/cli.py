"""Command-line interface.

Subcommands mirror the pipeline: `dataset build`, `wsor train/infer`,
`wsrr train/infer`, `caption train-unpaired/infer`, `pseudo filter/train`,
`metrics eval`, `costs table`, `pipeline run/report`. Training commands are
driven by a TOML run config; see README for examples. Imports happen inside
each handler so that caption inference never loads the recognition stages.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _load_run_config(args):
    from .config import RunConfig, load_config, parse_ablations

    config = load_config(args.config) if args.config else RunConfig()
    overrides = parse_ablations(getattr(args, "ablate", "") or "")
    if overrides:
        config = config.replace(**overrides)
    return config


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# handlers


def cmd_dataset_build(args) -> int:
    from .config import RunConfig
    from .pipeline import ensure_dataset

    config = RunConfig(
        dataset_dir=str(args.out),
        train_scenes=args.train,
        val_scenes=args.val,
        corpus_sentences=args.corpus_sentences,
        data_seed=args.seed,
    )
    train, val = ensure_dataset(config)
    print(f"train: {len(train)} scenes, val: {len(val)} scenes under {args.out}")
    return 0


def cmd_wsor_train(args) -> int:
    from .pipeline import run_stage

    fragment = run_stage("I", _load_run_config(args), args.workdir)
    print(json.dumps(fragment, sort_keys=True, indent=1))
    return 0


def cmd_wsor_infer(args) -> int:
    import numpy as np

    from .data import read_dataset
    from .objects import compute_cam, compute_features, detect, load_classifier, predict_objects

    classifier, registry = load_classifier(args.ckpt)
    dataset = read_dataset(args.input)
    names = registry.names if registry else dataset.manifest.object_registry.names
    rows = []
    cam_dir = Path(args.dump_cams) if args.dump_cams else None
    if cam_dir:
        cam_dir.mkdir(parents=True, exist_ok=True)
    for image_id in dataset.image_ids:
        pixels = dataset.image(image_id).pixels
        instances, features = detect(
            pixels, classifier, logit_threshold=args.threshold
        )
        predicted = predict_objects(pixels, classifier, args.threshold)
        rows.append(
            {
                "image": image_id,
                "objects": [[names[c], round(s, 6)] for c, s in predicted],
                "instances": [
                    {
                        "category": names[inst.category],
                        "score": round(inst.score, 6),
                        "area": int(inst.mask.sum()),
                    }
                    for inst in instances
                ],
            }
        )
        if cam_dir:
            for cid, _score in predicted:
                cam = compute_cam(features, classifier, cid)
                arr = np.clip(np.round(cam.map * 255), 0, 255).astype(np.uint8)
                h, w = arr.shape
                with open(cam_dir / f"{image_id}_{names[cid]}.pgm", "wb") as f:
                    f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
                    f.write(arr.tobytes())
    _write_jsonl(args.out, rows)
    print(f"wrote {len(rows)} records to {args.out}")
    return 0


def cmd_wsrr_train(args) -> int:
    from .pipeline import run_stage

    config = _load_run_config(args)
    run_stage("I", config, args.workdir)
    fragment = run_stage("II", config, args.workdir)
    print(json.dumps(fragment, sort_keys=True, indent=1))
    return 0


def cmd_wsrr_infer(args) -> int:
    from .data import read_dataset
    from .objects import detect, load_classifier
    from .relations import build_graph, load_relation_model, predict_relations

    classifier, _ = load_classifier(args.classifier)
    model = load_relation_model(args.ckpt)
    dataset = read_dataset(args.input)
    rel_names = dataset.manifest.relation_registry.names
    rows = []
    for image_id in dataset.image_ids:
        instances, features = detect(dataset.image(image_id).pixels, classifier)
        graph = build_graph(instances, features)
        preds = predict_relations(graph, model, args.threshold)
        rows.append(
            {"image": image_id, "relations": [[rel_names[r], round(s, 6)] for r, s in preds]}
        )
    _write_jsonl(args.out, rows)
    print(f"wrote {len(rows)} records to {args.out}")
    return 0


def cmd_caption_train_unpaired(args) -> int:
    from .pipeline import STAGES, run_pipeline

    config = _load_run_config(args)
    report = run_pipeline(config, args.workdir, STAGES)
    print(json.dumps({k: report[k] for k in ("config_hash", "metrics", "report_hash") if k in report},
                     sort_keys=True, indent=1))
    return 0


def cmd_caption_infer(args) -> int:
    from .pipeline import infer

    pairs = infer(
        args.input, args.ckpt, mode=args.mode, max_len=args.max_len, seed=args.seed,
        min_len=args.min_len,
    )
    rows = [{"image": image_id, "caption": caption} for image_id, caption in pairs]
    if args.out:
        _write_jsonl(args.out, rows)
        print(f"wrote {len(rows)} captions to {args.out}")
    else:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    return 0


def cmd_pseudo_filter(args) -> int:
    from .captioning import load_captioner, TokenSequence
    from .pseudo import filter_pseudo

    captioner = load_captioner(args.ckpt)
    vocab = captioner.vocab
    captions = _read_jsonl(args.captions)
    objects = {row["image"]: {name for name, _ in row["objects"]} for row in _read_jsonl(args.objects)}
    generated = []
    for row in captions:
        words = row["caption"].split()
        tokens = [vocab.bos_id] + vocab.encode(words) + [vocab.eos_id]
        generated.append((row["image"], TokenSequence(tokens, [])))
    pairs = filter_pseudo(generated, objects, vocab, provenance=str(args.ckpt))
    rows = [
        {
            "image": p.image_id,
            "caption": " ".join(p.caption.words(vocab)),
            "provenance": p.provenance,
        }
        for p in pairs
    ]
    _write_jsonl(args.out, rows)
    print(f"kept {len(rows)} of {len(captions)} captions")
    return 0


def cmd_pseudo_train(args) -> int:
    from .captioning import TokenSequence, save_captioner
    from .config import config_hash
    from .data import read_dataset
    from .pipeline import _build_vocab
    from .pseudo import PseudoPair, train_supervised

    config = _load_run_config(args)
    dataset = read_dataset(args.data)
    vocab, _ = _build_vocab(config, dataset)
    pairs = []
    for row in _read_jsonl(args.pairs):
        words = row["caption"].split()
        tokens = [vocab.bos_id] + vocab.encode(words) + [vocab.eos_id]
        pairs.append(PseudoPair(row["image"], TokenSequence(tokens, []), row["provenance"]))
    images = {i: dataset.image(i).pixels for i in dataset.image_ids}
    result = train_supervised(
        pairs,
        images,
        vocab,
        epochs=config.pseudo_epochs,
        seed=config.pseudo_seed,
        lr=config.pseudo_lr,
        batch_size=config.caption_batch,
        hidden=config.hidden_size,
        latent=config.latent_size,
    )
    save_captioner(args.out, result.captioner, config.pseudo_seed, config_hash(config))
    print(
        f"trained on {len(pairs)} pairs; probe perplexity "
        f"{result.probe_perplexity_start:.2f} -> {result.probe_perplexity_end:.2f}"
    )
    return 0


def cmd_metrics_eval(args) -> int:
    from . import metrics

    candidates = {row["image"]: row["caption"].split() for row in _read_jsonl(args.candidates)}
    references = {
        row["image"]: [r.split() for r in row["references"]]
        for row in _read_jsonl(args.references)
    }
    ids = sorted(candidates)
    if set(ids) != set(references):
        missing = set(ids) ^ set(references)
        print(f"error: candidate/reference image ids differ: {sorted(missing)[:5]}", file=sys.stderr)
        return 2
    report = metrics.evaluate([candidates[i] for i in ids], [references[i] for i in ids])
    print(json.dumps(report.as_dict(), sort_keys=True, indent=1))
    return 0


def cmd_costs_table(args) -> int:
    from .costs import format_table

    table = format_table()
    print(table)
    return 0 if "FAIL" not in table else 1


def cmd_pipeline_run(args) -> int:
    from .pipeline import run_pipeline

    config = _load_run_config(args)
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    report = run_pipeline(config, args.workdir, stages)
    summary = {k: report[k] for k in ("config_hash", "report_hash") if k in report}
    if "metrics" in report:
        summary["metrics"] = report["metrics"]
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def cmd_pipeline_report(args) -> int:
    from .pipeline import load_report

    report = load_report(args.workdir, _load_run_config(args))
    print(json.dumps(report, sort_keys=True, indent=1))
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapecap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", type=Path, default=None, help="run config TOML")
        p.add_argument("--workdir", type=Path, default=Path("runs"))
        p.add_argument("--ablate", default="", help="e.g. uno=off,rel=off")

    ds = sub.add_parser("dataset", help="synthetic dataset utilities").add_subparsers(
        dest="sub", required=True
    )
    p = ds.add_parser("build", help="generate train/val splits")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=240)
    p.add_argument("--val", type=int, default=60)
    p.add_argument("--corpus-sentences", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset_build)

    wsor = sub.add_parser("wsor", help="weakly-supervised object recognition").add_subparsers(
        dest="sub", required=True
    )
    p = wsor.add_parser("train")
    add_config_args(p)
    p.set_defaults(func=cmd_wsor_train)
    p = wsor.add_parser("infer")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="written split directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--dump-cams", type=Path, default=None, help="directory for PGM maps")
    p.set_defaults(func=cmd_wsor_infer)

    wsrr = sub.add_parser("wsrr", help="weakly-supervised relation recognition").add_subparsers(
        dest="sub", required=True
    )
    p = wsrr.add_parser("train")
    add_config_args(p)
    p.set_defaults(func=cmd_wsrr_train)
    p = wsrr.add_parser("infer")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--classifier", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.7)
    p.set_defaults(func=cmd_wsrr_infer)

    caption = sub.add_parser("caption", help="unpaired caption model").add_subparsers(
        dest="sub", required=True
    )
    p = caption.add_parser("train-unpaired")
    add_config_args(p)
    p.set_defaults(func=cmd_caption_train_unpaired)
    p = caption.add_parser("infer")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image, directory, or split")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_caption_infer)

    pseudo = sub.add_parser("pseudo", help="pseudo-caption self-training").add_subparsers(
        dest="sub", required=True
    )
    p = pseudo.add_parser("filter")
    p.add_argument("--captions", type=Path, required=True, help="caption infer JSONL")
    p.add_argument("--objects", type=Path, required=True, help="wsor infer JSONL")
    p.add_argument("--ckpt", type=Path, required=True, help="generator checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pseudo_filter)
    p = pseudo.add_parser("train")
    add_config_args(p)
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="written split directory")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pseudo_train)

    met = sub.add_parser("metrics", help="caption metrics").add_subparsers(dest="sub", required=True)
    p = met.add_parser("eval")
    p.add_argument("--candidates", type=Path, required=True)
    p.add_argument("--references", type=Path, required=True)
    p.set_defaults(func=cmd_metrics_eval)

    costs = sub.add_parser("costs", help="labeling-cost ledger").add_subparsers(
        dest="sub", required=True
    )
    p = costs.add_parser("table")
    p.set_defaults(func=cmd_costs_table)

    pipe = sub.add_parser("pipeline", help="multi-stage orchestration").add_subparsers(
        dest="sub", required=True
    )
    p = pipe.add_parser("run")
    add_config_args(p)
    p.add_argument("--stages", default="I,II,III")
    p.set_defaults(func=cmd_pipeline_run)
    p = pipe.add_parser("report")
    add_config_args(p)
    p.set_defaults(func=cmd_pipeline_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
