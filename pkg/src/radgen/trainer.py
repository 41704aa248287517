"""Two-stage optimization driver.

Stage one trains language modeling plus the global contrastive objective
with the attention mask absent from the forward pass; stage two adds the
mask and its openness penalty. The optimizer instance (and its moment
state) carries across the stage switch; only the loss weights, the mask
flag, and the stage learning-rate multiplier change. All randomness flows
from the configured seed so that identical runs reproduce bit-for-bit.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .aligner import triplet_contrastive_loss
from .attention import batch_mask_loss
from .data import LoadedCorpus, PreprocessSpec, preprocess
from .dvae import tokenize_images
from .errors import ConfigError, NonFiniteError
from .generator import nll_from_log_probs
from .metrics import bleu
from .model import Bundle, save_checkpoint
from .vocab import PAD_ID


@dataclass
class Stage:
    lambda_ce: float = 1.0
    lambda_global: float = 1.0
    lambda_mask: float = 0.0
    epochs: int = 15
    mask_enabled: bool = False


@dataclass
class StageSchedule:
    stages: list[Stage]

    @classmethod
    def default_two_stage(cls, stage1_epochs: int = 15, stage2_epochs: int = 15,
                          lambda_global: float = 1.0) -> "StageSchedule":
        return cls(
            stages=[
                Stage(1.0, lambda_global, 0.0, stage1_epochs, mask_enabled=False),
                Stage(1.0, lambda_global, 1.0, stage2_epochs, mask_enabled=True),
            ]
        )

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    batch_size: int = 16
    seed: int = 0
    stage2_lr_multiplier: float = 0.5
    warmup_steps: int = 50

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip norm must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (in-batch negatives)")


def total_loss(lambdas, components):
    """Weighted sum of the three loss components."""
    l1, l2, l3 = lambdas
    c1, c2, c3 = components
    return l1 * c1 + l2 * c2 + l3 * c3


def clip_gradients(parameters, clip_norm: float) -> tuple[float, float]:
    """Global-norm clip; returns (pre-clip, post-clip) norms."""
    params = [p for p in parameters if p.grad is not None]
    pre = torch.nn.utils.clip_grad_norm_(params, clip_norm)
    post = torch.sqrt(sum((p.grad**2).sum() for p in params))
    return float(pre), float(post)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    initial_val_ce: float = 0.0
    best: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def stage_epochs(self, stage_index: int) -> list[dict]:
        return [e for e in self.epochs if e["stage"] == stage_index]


def _crop_seed(base_seed: int, epoch: int, sample_index: int, view: int) -> int:
    return ((base_seed * 1_000_003 + epoch) * 1_000_003 + sample_index) * 7 + view


class BatchBuilder:
    """Turns corpus indices into model-ready (visual, text) tensors."""

    def __init__(self, bundle: Bundle, corpus: LoadedCorpus,
                 prep: PreprocessSpec, seed: int):
        self.bundle = bundle
        self.corpus = corpus
        self.prep = prep
        self.seed = seed
        cfg = bundle.model_config
        if not cfg.use_discrete_tokens and any(len(v) != 1 for v in corpus.images):
            raise ConfigError("conv-encoder mode supports single-view corpora only")
        self.encoded = [bundle.vocabulary.encode(r) for r in corpus.reports]

    def images(self, indices, mode: str, epoch: int = 0) -> torch.Tensor:
        views = len(self.corpus.images[indices[0]])
        out = []
        for v in range(views):
            batch = [
                preprocess(
                    self.corpus.images[i][v], self.prep, mode,
                    seed=_crop_seed(self.seed, epoch, i, v),
                )
                for i in indices
            ]
            out.append(torch.from_numpy(np.stack(batch)).permute(0, 3, 1, 2))
        return torch.stack(out, dim=1)   # (B, V, C, H, W)

    def visual(self, indices, mode: str, epoch: int = 0) -> torch.Tensor:
        imgs = self.images(indices, mode, epoch)
        if self.bundle.model_config.use_discrete_tokens:
            b, v = imgs.shape[:2]
            tokens = tokenize_images(self.bundle.dvae, imgs.flatten(0, 1))
            return tokens.view(b, -1)    # views concatenated along L
        return imgs[:, 0]

    def text(self, indices) -> torch.Tensor:
        seqs = [self.encoded[i] for i in indices]
        t = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), t), PAD_ID, dtype=torch.int64)
        for row, seq in enumerate(seqs):
            ids[row, : len(seq)] = torch.tensor(seq, dtype=torch.int64)
        return ids


def _loss_components(bundle: Bundle, visual, text_ids, stage: Stage):
    model = bundle.model
    out = model(visual, text_ids, mask_enabled=stage.mask_enabled)
    ce = nll_from_log_probs(out.decoder.log_probs, out.targets)
    l_global = triplet_contrastive_loss(
        out.g_image, out.g_report, margin=bundle.model_config.margin
    )
    if stage.lambda_mask > 0 and stage.mask_enabled and model.config.use_mask:
        l = visual.shape[1] if model.config.use_discrete_tokens else out.decoder.cross_attention[-1].shape[-1]
        masks = [layer.mask for layer in model.transformer.decoder_layers]
        l_mask = sum(batch_mask_loss(m, out.dec_lengths, l) for m in masks) / len(masks)
    else:
        l_mask = torch.zeros((), dtype=ce.dtype)
    return ce, l_global, l_mask


def evaluate_ce(bundle: Bundle, builder: BatchBuilder, indices, stage: Stage,
                batch_size: int) -> float:
    """Teacher-forced validation CE (mean over samples of per-sample sums)."""
    model = bundle.model
    was_training = model.training
    model.eval()
    losses, counts = [], []
    with torch.no_grad():
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo : lo + batch_size]
            visual = builder.visual(chunk, "infer")
            text_ids = builder.text(chunk)
            out = model(visual, text_ids, mask_enabled=stage.mask_enabled)
            losses.append(float(nll_from_log_probs(out.decoder.log_probs, out.targets)))
            counts.append(len(chunk))
    model.train(was_training)
    return float(np.average(losses, weights=counts))


def generate_reports(bundle: Bundle, builder: BatchBuilder, indices,
                     batch_size: int = 32, mask_enabled: bool = True,
                     strategy: str = "greedy", beam_width: int = 3) -> list[list[str]]:
    """Greedy/beam decode a set of samples into word lists."""
    out = []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        visual = builder.visual(chunk, "infer")
        seqs = bundle.model.generate(
            visual, strategy=strategy, beam_width=beam_width, mask_enabled=mask_enabled
        )
        out.extend(bundle.vocabulary.decode(s) for s in seqs)
    return out


def validation_bleu4(bundle: Bundle, builder: BatchBuilder, indices,
                     mask_enabled: bool) -> float:
    candidates = generate_reports(bundle, builder, indices, mask_enabled=mask_enabled)
    references = [builder.corpus.reports[i] for i in indices]
    return bleu(candidates, references)[3]


def train_two_stage(
    bundle: Bundle,
    corpus: LoadedCorpus,
    schedule: StageSchedule,
    opt_cfg: OptimizerConfig,
    prep: PreprocessSpec | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> TrainReport:
    """Run the staged optimization; returns the per-epoch report.

    Checkpoints (per-stage last and overall best-by-validation-BLEU-4) are
    written under ``out_dir/checkpoints`` when an output directory is given.
    """
    schedule.validate()
    opt_cfg.validate()
    prep = prep or PreprocessSpec()
    model = bundle.model
    torch.manual_seed(opt_cfg.seed)

    builder = BatchBuilder(bundle, corpus, prep, opt_cfg.seed)
    train_idx = corpus.indices("train")
    val_idx = corpus.indices("val")
    if len(train_idx) < opt_cfg.batch_size:
        raise ConfigError("training split smaller than one batch")

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay
    )
    report = TrainReport()
    report.initial_val_ce = evaluate_ce(
        bundle, builder, val_idx, schedule.stages[0], opt_cfg.batch_size
    ) if val_idx else float("nan")

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    best_bleu = -1.0
    global_epoch = 0
    for stage_index, stage in enumerate(schedule.stages):
        stage_mult = 1.0 if stage_index == 0 else opt_cfg.stage2_lr_multiplier
        step_in_stage = 0
        for _ in range(stage.epochs):
            model.train()
            order = list(train_idx)
            random.Random(opt_cfg.seed * 31 + global_epoch).shuffle(order)
            sums = {"ce": 0.0, "global": 0.0, "mask": 0.0}
            n_batches = 0
            t0 = time.monotonic()
            for lo in range(0, len(order) - opt_cfg.batch_size + 1, opt_cfg.batch_size):
                chunk = order[lo : lo + opt_cfg.batch_size]
                visual = builder.visual(chunk, "train", epoch=global_epoch)
                text_ids = builder.text(chunk)
                ce, l_global, l_mask = _loss_components(bundle, visual, text_ids, stage)
                loss = total_loss(
                    (stage.lambda_ce, stage.lambda_global, stage.lambda_mask),
                    (ce, l_global, l_mask),
                )
                if not bool(torch.isfinite(loss)):
                    raise NonFiniteError("training loss is not finite")
                optimizer.zero_grad()
                loss.backward()
                clip_gradients(model.parameters(), opt_cfg.clip_norm)
                step_in_stage += 1
                warm = min(1.0, step_in_stage / max(opt_cfg.warmup_steps, 1))
                for group in optimizer.param_groups:
                    group["lr"] = opt_cfg.lr * stage_mult * warm
                optimizer.step()
                sums["ce"] += float(ce.detach())
                sums["global"] += float(l_global.detach())
                sums["mask"] += float(l_mask.detach())
                n_batches += 1

            entry = {
                "stage": stage_index,
                "epoch": global_epoch,
                "train_ce": sums["ce"] / max(n_batches, 1),
                "train_global": sums["global"] / max(n_batches, 1),
                "train_mask": sums["mask"] / max(n_batches, 1),
                "seconds": time.monotonic() - t0,
            }
            if val_idx:
                entry["val_ce"] = evaluate_ce(
                    bundle, builder, val_idx, stage, opt_cfg.batch_size
                )
                entry["val_bleu4"] = validation_bleu4(
                    bundle, builder, val_idx, mask_enabled=stage.mask_enabled
                )
                if entry["val_bleu4"] > best_bleu:
                    best_bleu = entry["val_bleu4"]
                    report.best = {
                        "stage": stage_index,
                        "epoch": global_epoch,
                        "val_bleu4": best_bleu,
                    }
                    if ckpt_dir is not None:
                        bundle.stage = stage_index + 1
                        save_checkpoint(ckpt_dir / "best.pt", bundle)
            report.epochs.append(entry)
            if log:
                log(entry)
            global_epoch += 1
        if ckpt_dir is not None:
            bundle.stage = stage_index + 1
            save_checkpoint(ckpt_dir / f"stage{stage_index + 1}.pt", bundle)

    report.final = report.epochs[-1] if report.epochs else {}
    if out_dir is not None:
        report.save(Path(out_dir) / "train_report.json")
    return report
