"""Command-line entry point.

Subcommands: synth, train-dvae, train, generate, evaluate, probe. Exit
codes: 0 ok, 2 config/validation error, 3 numeric failure, 4 empty input.
All outputs live under ``--out`` with the layout ``checkpoints/``,
``reports/``, ``probes/``, ``metrics.json``, ``train_report.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .aligner import alignment_score
from .config import RunConfig, load_run_config, parse_overrides
from .dvae import build_dvae, train_dvae
from .errors import (
    ConfigError,
    EmptyCorpusError,
    MissingFileError,
    NonFiniteError,
    ParseError,
    RadgenError,
)
from .metrics import metric_report
from .model import Bundle, ReportModel, load_checkpoint, save_checkpoint
from .probes import (
    export_attention_heatmaps,
    gram_export,
    localization_stats,
    model_global_features,
    retrieval_probe,
    similarity_heatmap,
)
from .trainer import BatchBuilder, StageSchedule, generate_reports, train_two_stage
from .vocab import build_vocabulary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_EMPTY = 4


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(args) -> RunConfig:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_run_config(args.config, overrides)


def _prep(cfg: RunConfig) -> data_mod.PreprocessSpec:
    return data_mod.PreprocessSpec(resize_size=cfg.resize_size, crop_size=cfg.crop_size)


def _load_corpus(data_dir: str) -> tuple[data_mod.DatasetManifest, data_mod.LoadedCorpus]:
    root = Path(data_dir)
    manifest = data_mod.load_manifest(root / "manifest.json")
    return manifest, data_mod.load_corpus(manifest, root)


def _dvae_training_images(corpus, cfg: RunConfig, train_idx) -> np.ndarray:
    prep = _prep(cfg)
    crops = []
    for i in train_idx:
        for v, img in enumerate(corpus.images[i]):
            crops.append(
                data_mod.preprocess(img, prep, "train", seed=cfg.seed * 131 + i * 7 + v)
            )
    return np.stack(crops)


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        return _fail(f"output dir not writable: {exc}", EXIT_CONFIG)
    manifest = data_mod.generate_synthetic(
        out,
        n=args.n,
        k_findings=args.k_findings,
        seed=args.seed if args.seed is not None else 0,
        views=args.views,
        image_size=args.image_size,
    )
    print(f"wrote {len(manifest.records)} samples under {out}")
    return EXIT_OK


def _train_dvae_for(cfg: RunConfig, corpus, out: Path):
    train_idx = corpus.indices("train")
    if not train_idx:
        raise EmptyCorpusError("no training samples in corpus")
    images = _dvae_training_images(corpus, cfg, train_idx)
    model = train_dvae(images, cfg.dvae_config())
    return model


def cmd_train_dvae(args) -> int:
    cfg = _load_config(args)
    _, corpus = _load_corpus(args.data)
    out = Path(args.out)
    dvae = _train_dvae_for(cfg, corpus, out)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"dvae_state": dvae.state_dict(), "dvae_config": vars(cfg.dvae_config())},
        ckpt / "dvae.pt",
    )
    print(f"dVAE saved to {ckpt / 'dvae.pt'}")
    return EXIT_OK


def _load_or_train_dvae(cfg: RunConfig, corpus, out: Path):
    if not cfg.use_lsu:
        return None
    ckpt = out / "checkpoints" / "dvae.pt"
    if ckpt.exists():
        payload = torch.load(ckpt, map_location="cpu", weights_only=False)
        from .dvae import DvaeConfig

        dvae = build_dvae(DvaeConfig(**payload["dvae_config"]))
        dvae.load_state_dict(payload["dvae_state"])
        dvae.eval()
        return dvae
    dvae = _train_dvae_for(cfg, corpus, out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"dvae_state": dvae.state_dict(), "dvae_config": vars(cfg.dvae_config())},
        ckpt,
    )
    return dvae


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, corpus = _load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.stage == "2":
        stage1_ckpt = out / "checkpoints" / "stage1.pt"
        if not stage1_ckpt.exists():
            raise ConfigError(f"--stage 2 needs an existing {stage1_ckpt}")
        bundle = load_checkpoint(stage1_ckpt)
    else:
        train_reports = [corpus.reports[i] for i in corpus.indices("train")]
        vocabulary = build_vocabulary(train_reports, min_count=cfg.min_count)
        dvae = _load_or_train_dvae(cfg, corpus, out)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            model = ReportModel(cfg.model_config(), vocab_size=len(vocabulary))
        bundle = Bundle(
            model=model,
            dvae=dvae,
            vocabulary=vocabulary,
            model_config=cfg.model_config(),
            dvae_config=cfg.dvae_config() if cfg.use_lsu else None,
        )

    schedule = cfg.schedule()
    if args.stage == "1":
        schedule = StageSchedule(stages=schedule.stages[:1])
    elif args.stage == "2":
        schedule = StageSchedule(stages=schedule.stages[1:])
        if not schedule.stages:
            raise ConfigError("schedule has no second stage")

    t0 = time.monotonic()
    report = train_two_stage(
        bundle,
        corpus,
        schedule,
        cfg.optimizer_config(),
        prep=_prep(cfg),
        out_dir=out,
        log=lambda e: print(
            f"stage {e['stage']} epoch {e['epoch']}: "
            f"ce {e['train_ce']:.3f} global {e['train_global']:.3f} "
            f"val_ce {e.get('val_ce', float('nan')):.3f} "
            f"val_bleu4 {e.get('val_bleu4', float('nan')):.3f}"
        ),
    )
    print(f"training finished in {time.monotonic() - t0:.1f}s; "
          f"best val BLEU-4 {report.best.get('val_bleu4', float('nan')):.4f}")
    return EXIT_OK


def _checkpoint_bundle(args) -> Bundle:
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    bundle = _checkpoint_bundle(args)
    _, corpus = _load_corpus(args.data)
    indices = corpus.indices(args.split)
    if not indices:
        return _fail(f"split {args.split!r} is empty", EXIT_EMPTY)
    builder = BatchBuilder(bundle, corpus, _prep(cfg), cfg.seed)
    decoded = generate_reports(
        bundle, builder, indices,
        mask_enabled=bundle.stage >= 2,
        strategy=args.strategy,
        beam_width=args.beam_width,
    )
    out = Path(args.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    payload = {corpus.ids[i]: " ".join(words) for i, words in zip(indices, decoded)}
    path = out / f"generated_{args.split}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(payload)} generated reports to {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, corpus = _load_corpus(args.data)
    indices = corpus.indices(args.split)
    if not indices:
        return _fail(f"split {args.split!r} is empty", EXIT_EMPTY)
    cand_path = Path(args.candidates)
    if not cand_path.exists():
        raise ConfigError(f"candidates file not found: {cand_path}")
    try:
        candidates_by_id = json.loads(cand_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{cand_path}: {exc}") from exc
    cands, refs = [], []
    for i in indices:
        sid = corpus.ids[i]
        if sid not in candidates_by_id:
            raise ConfigError(f"candidates file missing id {sid!r}")
        cands.append(candidates_by_id[sid])
        refs.append(corpus.reports[i])
    report = metric_report(cands, refs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    bundle = _checkpoint_bundle(args)
    _, corpus = _load_corpus(args.data)
    indices = corpus.indices(args.split)
    if not indices:
        return _fail(f"split {args.split!r} is empty", EXIT_EMPTY)
    builder = BatchBuilder(bundle, corpus, _prep(cfg), cfg.seed)
    out = Path(args.out) / "probes"
    out.mkdir(parents=True, exist_ok=True)

    img_feats, rep_feats = model_global_features(bundle, builder, indices)
    score = alignment_score(img_feats, rep_feats)
    retrieval = retrieval_probe(img_feats, rep_feats)
    summary = {
        "alignment_score": score,
        "image_to_report_recalls": retrieval["image_to_report_recalls"],
        "report_to_image_recalls": retrieval["report_to_image_recalls"],
        "ranks_image_to_report": [
            r.rank_of_truth for r in retrieval["image_to_report"]
        ],
    }
    (out / "alignment.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    sim = similarity_heatmap(rep_feats, path=out / "similarity_reports.png")
    np.savetxt(out / "similarity_reports.csv", sim, delimiter=",")
    if bundle.model.aligner is not None:
        gram_export(
            bundle.model.aligner.basis,
            png_path=out / "basis_gram.png",
            csv_path=out / "basis_gram.csv",
        )

    # attention heatmaps for the first probed sample
    if bundle.model_config.use_discrete_tokens and cfg.views == 1:
        i = indices[0]
        visual = builder.visual([i], "infer")
        gen = bundle.model.generate(visual, mask_enabled=bundle.stage >= 2)[0]
        words = bundle.vocabulary.decode(gen)
        ids = torch.tensor([gen], dtype=torch.int64)
        with torch.no_grad():
            model_out = bundle.model(visual, ids, mask_enabled=bundle.stage >= 2)
        attn = model_out.decoder.final_layer_attention()[0].cpu().numpy()
        image = data_mod.preprocess(corpus.images[i][0], _prep(cfg), "infer")[:, :, 0]
        export_attention_heatmaps(
            attn[: len(words)],
            word_indices=list(range(min(len(words), args.heatmap_words))),
            words=words,
            grid=cfg.token_grid(),
            image=image,
            out_dir=out,
            prefix=f"attn_{corpus.ids[i]}",
        )
    print(f"alignment score {score:.4f}; probe artifacts under {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radgen",
        description="Synthesize corpora, train, and probe the report generator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("synth", help="generate a synthetic paired corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k-findings", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=1, choices=(1, 2))
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-dvae", help="pre-train the image tokenizer")
    common(p)
    p.add_argument("--data", required=True, help="corpus dir with manifest.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_dvae)

    p = sub.add_parser("train", help="two-stage model training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode reports for a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=3)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated reports against references")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--candidates", required=True, help="JSON id -> generated text")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="alignment/retrieval/heatmap analyses")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap-words", type=int, default=8)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except EmptyCorpusError as exc:
        return _fail(str(exc), EXIT_EMPTY)
    except (ConfigError, ParseError, MissingFileError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except RadgenError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except OSError as exc:
        return _fail(str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
