"""End-to-end miniature run: corpus, tokenizer, two-stage training, probes.

A scaled-down version of the full pipeline (small images, one layer, a few
epochs) that finishes in about a minute while exercising every stage:
synthesis, dVAE pre-training, two-stage optimization, generation, metrics,
and the alignment/retrieval probes.

Run from the repository root:  python demos/04_end_to_end.py
"""

import json
import pathlib
import tempfile

import torch

from radgen.aligner import alignment_score
from radgen.cli import _dvae_training_images
from radgen.config import RunConfig
from radgen.data import PreprocessSpec, generate_synthetic, load_corpus, load_manifest
from radgen.dvae import train_dvae
from radgen.metrics import metric_report
from radgen.model import Bundle, ReportModel
from radgen.probes import model_global_features, retrieval_probe
from radgen.trainer import BatchBuilder, generate_reports, train_two_stage
from radgen.vocab import build_vocabulary

root = pathlib.Path(tempfile.mkdtemp(prefix="radgen_demo_"))
print(f"workspace: {root}")

print("\n[1/5] synthesizing a 120-sample paired corpus (2 findings)...")
generate_synthetic(root, n=120, k_findings=2, seed=0, image_size=64)
corpus = load_corpus(load_manifest(root / "manifest.json"), root)

cfg = RunConfig(
    seed=0, resize_size=72, crop_size=64, width=32, heads=2, layers=1,
    ffn_width=64, max_text_len=32, dvae_steps=300, dvae_batch=8,
    stage1_epochs=3, stage2_epochs=3, batch_size=8, warmup_steps=10,
    min_count=0,
)
prep = PreprocessSpec(cfg.resize_size, cfg.crop_size)

print("[2/5] pre-training the image tokenizer...")
dvae = train_dvae(_dvae_training_images(corpus, cfg, corpus.indices("train")),
                  cfg.dvae_config())

vocab = build_vocabulary([corpus.reports[i] for i in corpus.indices("train")],
                         min_count=cfg.min_count)
with torch.random.fork_rng():
    torch.manual_seed(cfg.seed)
    model = ReportModel(cfg.model_config(), vocab_size=len(vocab))
bundle = Bundle(model=model, dvae=dvae, vocabulary=vocab,
                model_config=cfg.model_config(), dvae_config=cfg.dvae_config())

print("[3/5] two-stage training (3 epochs without the mask, 3 with it)...")
report = train_two_stage(
    bundle, corpus, cfg.schedule(), cfg.optimizer_config(), prep=prep,
    log=lambda e: print(f"  stage {e['stage']} epoch {e['epoch']}: "
                        f"val CE {e['val_ce']:.2f}  val BLEU-4 {e['val_bleu4']:.3f}"),
)

print("[4/5] decoding the held-out test split...")
builder = BatchBuilder(bundle, corpus, prep, cfg.seed)
test_idx = corpus.indices("test")
candidates = generate_reports(bundle, builder, test_idx, mask_enabled=True)
references = [corpus.reports[i] for i in test_idx]
print("  sample generation:", " ".join(candidates[0]))
print("  sample reference: ", references[0])
print("  metrics:", json.dumps({k: round(v, 3) for k, v in
                                metric_report(candidates, references).items()}))

print("[5/5] probing global alignment and retrieval...")
g_img, g_rep = model_global_features(bundle, builder, test_idx)
probe = retrieval_probe(g_img, g_rep)
print(f"  alignment score: {alignment_score(g_img, g_rep):.3f}")
print(f"  image->report recall@1: "
      f"{probe['image_to_report_recalls']['recall@1']:.3f}")
print(f"  report->image recall@1: "
      f"{probe['report_to_image_recalls']['recall@1']:.3f}")
