"""Desk-scale radiology report generation.

Pipeline: a discrete VAE tokenizes images, a frequency-thresholded
vocabulary tokenizes reports, a shared orthonormal-basis aligner fuses both
modalities, and an encoder-decoder transformer with mask-calibrated
text-to-image attention decodes reports under a two-stage training schedule.
"""

from .aligner import (
    CrossModalAligner,
    alignment_score,
    basis_attention,
    dual_gate_fuse,
    gate,
    pool_global,
    scale_basis,
    triplet_contrastive_loss,
)
from .basis import gram_schmidt, orthonormality_error, random_orthonormal_basis
from .config import RunConfig, load_run_config
from .data import (
    DEFAULT_FINDINGS,
    DatasetManifest,
    PreprocessSpec,
    SyntheticFindingSpec,
    generate_synthetic,
    load_corpus,
    load_manifest,
    parse_report,
    preprocess,
    render_image,
)
from .dvae import (
    DiscreteVae,
    DvaeConfig,
    build_dvae,
    discretize,
    encode_image,
    reconstruct,
    train_dvae,
)
from .generator import DecoderOutput, Seq2SeqTransformer, TransformerConfig, cross_entropy_loss
from .gradcheck import finite_difference_check
from .attention import LearnableMask, mask_loss, masked_cross_attention
from .metrics import bleu, cider_d, metric_report, rouge_l
from .model import (
    Bundle,
    ModelConfig,
    ReportModel,
    embed_text,
    embed_visual,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import (
    OptimizerConfig,
    Stage,
    StageSchedule,
    TrainReport,
    total_loss,
    train_two_stage,
)
from .vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary, build_vocabulary, tokenize

__version__ = "0.1.0"
