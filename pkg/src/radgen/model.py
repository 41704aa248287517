"""Full report-generation model and checkpoint bundle.

The model wires the pipeline end to end: discrete visual tokens (or a small
convolutional grid encoder for the ablated baseline) and report token ids
are embedded into a shared width, passed through the shared cross-modal
aligner, pooled into unit-norm global features for the contrastive
objective, and fed to the encoder-decoder transformer for report decoding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .aligner import CrossModalAligner, pool_global
from .dvae import DiscreteVae, DvaeConfig
from .errors import ShapeError
from .generator import DecoderOutput, Seq2SeqTransformer, TransformerConfig
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary


def _lookup(tokens, weight: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(tokens, dtype=torch.int64)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= weight.shape[0]):
        raise IndexError(
            f"token id out of range [0, {weight.shape[0]}): "
            f"min {int(ids.min())}, max {int(ids.max())}"
        )
    return weight[ids]


def embed_visual(tokens, weight: torch.Tensor) -> torch.Tensor:
    """Row lookup of visual token ids in the image embedding matrix."""
    return _lookup(tokens, weight)


def embed_text(tokens, weight: torch.Tensor) -> torch.Tensor:
    """Row lookup of report token ids in the text embedding matrix."""
    return _lookup(tokens, weight)


@dataclass
class ModelConfig:
    width: int = 48
    heads: int = 2
    layers: int = 3
    ffn_width: int = 96
    dropout: float = 0.1
    max_text_len: int = 48
    max_visual_len: int = 196
    mask_scale: float = 1000.0
    codebook_size: int = 512
    basis_rows: int = 2048
    basis_seed: int = 0
    margin: float = 0.2
    use_discrete_tokens: bool = True   # dVAE tokens vs conv grid features
    use_aligner: bool = True           # basis attention + dual-gate fusion
    use_mask: bool = True              # learnable cross-attention mask
    image_channels: int = 1
    conv_downsample: int = 8

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(
            layers=self.layers,
            width=self.width,
            heads=self.heads,
            ffn_width=self.ffn_width,
            dropout=self.dropout,
            max_text_len=self.max_text_len,
            max_visual_len=self.max_visual_len,
            mask_scale=self.mask_scale,
        )


class ConvFeatureExtractor(nn.Module):
    """Grid feature encoder for the no-tokenizer baseline."""

    def __init__(self, channels: int, width: int, downsample: int = 8):
        super().__init__()
        import math

        n_down = int(math.log2(downsample))
        plan = [min(16 * 2**i, 64) for i in range(n_down)]
        layers = []
        in_ch = channels
        for w in plan:
            layers += [nn.Conv2d(in_ch, w, 4, stride=2, padding=1), nn.ReLU()]
            in_ch = w
        layers.append(nn.Conv2d(in_ch, width, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images).flatten(2).transpose(1, 2)   # (B, L, width)


@dataclass
class ModelOutput:
    decoder: DecoderOutput
    g_image: torch.Tensor            # (B, d) unit-norm pooled image features
    g_report: torch.Tensor           # (B, d) unit-norm pooled report features
    targets: torch.Tensor            # (B, T-1) shifted target ids
    dec_lengths: torch.Tensor        # (B,) active decoder rows per sample


class ReportModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        config.transformer_config().validate()
        self.config = config
        self.vocab_size = vocab_size
        if config.use_discrete_tokens:
            self.visual_embed = nn.Embedding(config.codebook_size, config.width)
            nn.init.normal_(self.visual_embed.weight, std=0.1)
        else:
            self.visual_encoder = ConvFeatureExtractor(
                config.image_channels, config.width, config.conv_downsample
            )
        self.text_embed = nn.Embedding(vocab_size, config.width)
        nn.init.normal_(self.text_embed.weight, std=0.1)
        self.aligner = (
            CrossModalAligner(
                config.width,
                heads=config.heads,
                basis_rows=config.basis_rows,
                basis_seed=config.basis_seed,
            )
            if config.use_aligner
            else None
        )
        self.transformer = Seq2SeqTransformer(config.transformer_config(), vocab_size)

    def align(self, e: torch.Tensor) -> torch.Tensor:
        return self.aligner(e) if self.aligner is not None else e

    def _embed_visual_input(self, visual: torch.Tensor) -> torch.Tensor:
        if self.config.use_discrete_tokens:
            if visual.dtype not in (torch.int64, torch.int32):
                raise ShapeError("discrete-token mode expects integer token ids")
            return self.visual_embed(visual)
        if visual.ndim != 4:
            raise ShapeError("conv mode expects (B, C, H, W) images")
        return self.visual_encoder(visual)

    def visual_features(self, visual: torch.Tensor) -> torch.Tensor:
        """Visual input to aligned (B, L, d) features.

        ``visual`` is (B, L) int64 token ids in discrete-token mode, or
        (B, C, H, W) float images in conv-encoder mode.
        """
        return self.align(self._embed_visual_input(visual))

    def text_features(self, ids: torch.Tensor):
        """(B, T) ids to aligned features plus a True-means-pad mask."""
        pad = ids == PAD_ID
        return self.align(self.text_embed(ids)), pad

    def forward(self, visual, text_ids, mask_enabled: bool = False) -> ModelOutput:
        # one aligner pass over both modalities (identical math, fewer calls)
        e_image = self._embed_visual_input(visual)
        e_report = self.text_embed(text_ids)
        pad = text_ids == PAD_ID
        l = e_image.shape[1]
        fused = self.align(torch.cat([e_image, e_report], dim=1))
        f_image, f_report = fused[:, :l], fused[:, l:]
        g_image = pool_global(f_image)
        g_report = pool_global(f_report, mask=~pad)
        dec_in = f_report[:, :-1]
        dec_pad = pad[:, :-1]
        out = self.transformer(
            f_image,
            dec_in,
            text_pad_mask=dec_pad,
            mask_enabled=mask_enabled and self.config.use_mask,
        )
        return ModelOutput(
            decoder=out,
            g_image=g_image,
            g_report=g_report,
            targets=text_ids[:, 1:],
            dec_lengths=(text_ids != PAD_ID).sum(dim=1) - 1,
        )

    def global_features(self, visual, text_ids):
        """Pooled unit-norm (image, report) features for probes."""
        f_image = self.visual_features(visual)
        f_report, pad = self.text_features(text_ids)
        return pool_global(f_image), pool_global(f_report, mask=~pad)

    def _step_log_probs(self, prefix_ids: torch.Tensor, memory: torch.Tensor,
                        mask_enabled: bool) -> torch.Tensor:
        """Log-probs for the next token after each prefix, (B, vocab)."""
        feats, pad = self.text_features(prefix_ids)
        out = self.transformer.decode(
            feats, memory, text_pad_mask=pad,
            mask_enabled=mask_enabled and self.config.use_mask,
        )
        return out.log_probs[:, -1]

    @torch.no_grad()
    def generate(
        self,
        visual,
        max_len: int | None = None,
        strategy: str = "greedy",
        beam_width: int = 3,
        mask_enabled: bool = True,
    ) -> list[list[int]]:
        """Decode reports; each output starts with BOS and ends with EOS.

        Greedy picks the argmax each step (ties to the lowest id); beam keeps
        ``beam_width`` hypotheses ranked by length-normalized log-probability.
        """
        was_training = self.training
        self.eval()
        try:
            max_len = max_len or self.config.max_text_len
            memory = self.transformer.encode(self.visual_features(visual))
            if strategy == "greedy":
                return self._greedy(memory, max_len, mask_enabled)
            if strategy == "beam":
                return [
                    self._beam_single(memory[i : i + 1], max_len, beam_width, mask_enabled)
                    for i in range(memory.shape[0])
                ]
            raise ValueError(f"unknown strategy {strategy!r}")
        finally:
            self.train(was_training)

    def _greedy(self, memory, max_len, mask_enabled):
        bsz = memory.shape[0]
        ids = torch.full((bsz, 1), BOS_ID, dtype=torch.int64)
        finished = torch.zeros(bsz, dtype=torch.bool)
        while ids.shape[1] < max_len and not bool(finished.all()):
            log_probs = self._step_log_probs(ids, memory, mask_enabled)
            nxt = log_probs.argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, PAD_ID), nxt)
            ids = torch.cat([ids, nxt[:, None]], dim=1)
            finished |= nxt == EOS_ID
        out = []
        for row in ids.tolist():
            seq = []
            for tok in row:
                seq.append(tok)
                if tok == EOS_ID:
                    break
            if seq[-1] != EOS_ID:
                seq.append(EOS_ID)
            out.append(seq)
        return out

    def _beam_single(self, memory, max_len, width, mask_enabled):
        beams = [([BOS_ID], 0.0)]
        done: list[tuple[list[int], float]] = []
        for _ in range(max_len - 1):
            if not beams:
                break
            prefix = torch.tensor([b[0] for b in beams], dtype=torch.int64)
            log_probs = self._step_log_probs(
                prefix, memory.expand(len(beams), -1, -1), mask_enabled
            )
            candidates = []
            for (seq, score), row in zip(beams, log_probs):
                top = torch.topk(row, min(width, row.shape[-1]))
                for logp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((seq + [tok], score + logp))
            candidates.sort(key=lambda c: -c[1] / max(len(c[0]) - 1, 1))
            beams = []
            for seq, score in candidates:
                if seq[-1] == EOS_ID:
                    done.append((seq, score))
                else:
                    beams.append((seq, score))
                if len(beams) >= width:
                    break
            if len(done) >= width:
                break
        done.extend(beams)
        best = max(done, key=lambda c: c[1] / max(len(c[0]) - 1, 1))
        seq = best[0]
        return seq if seq[-1] == EOS_ID else seq + [EOS_ID]


@dataclass
class Bundle:
    """Everything needed to run inference: tokenizers plus the model."""

    model: ReportModel
    dvae: DiscreteVae | None
    vocabulary: Vocabulary
    model_config: ModelConfig
    dvae_config: DvaeConfig | None
    stage: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, bundle: Bundle) -> None:
    """Single-archive checkpoint: named parameter tensors + config + stage."""
    payload = {
        "model_state": bundle.model.state_dict(),
        "model_config": asdict(bundle.model_config),
        "vocab": bundle.vocabulary.id_to_token,
        "vocab_min_count": bundle.vocabulary.min_count,
        "stage": bundle.stage,
        "extra": bundle.extra,
    }
    if bundle.dvae is not None:
        payload["dvae_state"] = bundle.dvae.state_dict()
        payload["dvae_config"] = asdict(bundle.dvae_config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Bundle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    model_config = ModelConfig(**payload["model_config"])
    vocabulary = Vocabulary(
        id_to_token=list(payload["vocab"]),
        min_count=payload.get("vocab_min_count", 0),
    )
    model = ReportModel(model_config, vocab_size=len(vocabulary))
    model.load_state_dict(payload["model_state"])
    model.eval()
    dvae = None
    dvae_config = None
    if "dvae_state" in payload:
        dvae_config = DvaeConfig(**payload["dvae_config"])
        from .dvae import build_dvae

        dvae = build_dvae(dvae_config)
        dvae.load_state_dict(payload["dvae_state"])
        dvae.eval()
    return Bundle(
        model=model,
        dvae=dvae,
        vocabulary=vocabulary,
        model_config=model_config,
        dvae_config=dvae_config,
        stage=payload.get("stage", 0),
        extra=payload.get("extra", {}),
    )
