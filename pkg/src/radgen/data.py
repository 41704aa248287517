"""Synthetic paired image/report corpus plus manifest loading and preprocessing.

Each synthetic sample draws a subset of findings; the image is a fixed
"anatomy" background plus one localized blob per present finding, rendered
entirely inside that finding's cell of a 4x4 grid, and the report
concatenates one template sentence per finding (present or absent phrasing)
in a canonical order. Reports are template-generated so that desk-scale
models can reach high n-gram scores and so that every report parses back to
its exact finding set.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, MissingFileError, ParseError
from .vocab import tokenize

GRID = 4


@dataclass(frozen=True)
class SyntheticFindingSpec:
    name: str
    cell: tuple[int, int]                 # (row, col) on the 4x4 grid
    shape: str                            # disc|small_disc|rect|haze|ellipse|line|wedge
    present_templates: tuple[str, ...]
    absent_templates: tuple[str, ...]
    intensity: float = 0.85

    def __post_init__(self):
        if not (0 <= self.cell[0] < GRID and 0 <= self.cell[1] < GRID):
            raise ConfigError(f"cell {self.cell} outside the {GRID}x{GRID} grid")
        if not self.present_templates or not self.absent_templates:
            raise ConfigError("each finding needs present and absent templates")

    def keyword_offset(self) -> tuple[int, str]:
        """First token where the present phrasing forks from the absent one."""
        p = tokenize(self.present_templates[0])
        a = tokenize(self.absent_templates[0])
        for i, tok in enumerate(p):
            if i >= len(a) or a[i] != tok:
                return i, tok
        return len(p) - 1, p[-1]


DEFAULT_FINDINGS: tuple[SyntheticFindingSpec, ...] = (
    SyntheticFindingSpec(
        "opacity_right_upper", (0, 0), "disc",
        ("opacity in the right upper zone",),
        ("the right upper zone is clear",), 0.88,
    ),
    SyntheticFindingSpec(
        "nodule_left_apex", (0, 3), "small_disc",
        ("nodule projecting over the left apex",),
        ("the left apex is unremarkable",), 0.95,
    ),
    SyntheticFindingSpec(
        "consolidation_right_mid", (1, 0), "rect",
        ("consolidation in the right mid lung",),
        ("the right mid lung is well aerated",), 0.82,
    ),
    SyntheticFindingSpec(
        "haze_left_mid", (1, 3), "haze",
        ("hazy opacification in the left mid lung",),
        ("the left mid lung is normal",), 0.55,
    ),
    SyntheticFindingSpec(
        "cardiomegaly", (2, 1), "ellipse",
        ("the heart is enlarged",),
        ("the heart is normal in size",), 0.90,
    ),
    SyntheticFindingSpec(
        "device_left_chest", (2, 2), "line",
        ("wire device overlying the left chest",),
        ("no device is seen",), 0.97,
    ),
    SyntheticFindingSpec(
        "effusion_right_base", (3, 0), "wedge",
        ("effusion blunting the right costophrenic angle",),
        ("the right costophrenic angle is sharp",), 0.85,
    ),
    SyntheticFindingSpec(
        "effusion_left_base", (3, 3), "wedge",
        ("effusion blunting the left costophrenic angle",),
        ("the left costophrenic angle is sharp",), 0.85,
    ),
)


def cell_rect(cell: tuple[int, int]) -> tuple[float, float, float, float]:
    """Region rectangle (y0, x0, y1, x1) in relative [0,1] image coordinates."""
    r, c = cell
    return r / GRID, c / GRID, (r + 1) / GRID, (c + 1) / GRID


def _coords(size: int):
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")   # yy, xx in [0,1]


def _background(size: int, view: str, anatomy_seed: int = 0) -> np.ndarray:
    """Anatomy pattern with mild per-sample variation.

    The variation (gradient strength, organ positions/sizes) is seeded so
    corpora are reproducible; it carries no report information, which keeps
    the finding blobs the only predictive image content.
    """
    rng = np.random.default_rng(anatomy_seed)
    j = lambda scale: float(rng.uniform(-scale, scale))
    yy, xx = _coords(size)
    if view == "frontal":
        img = (0.12 + j(0.02)) + (0.18 + j(0.03)) * yy
        for cx in (0.28 + j(0.02), 0.72 + j(0.02)):
            rx, ry = 0.19 + j(0.02), 0.32 + j(0.03)
            lung = ((xx - cx) / rx) ** 2 + ((yy - 0.45 + j(0.02)) / ry) ** 2 <= 1.0
            img[lung] = 0.40 + j(0.03)
        img[np.abs(xx - 0.5 - j(0.015)) < 0.045 + j(0.008)] = 0.58 + j(0.03)
    else:
        img = (0.10 + j(0.02)) + (0.16 + j(0.03)) * xx
        rx, ry = 0.30 + j(0.03), 0.38 + j(0.03)
        body = ((xx - 0.5 + j(0.02)) / rx) ** 2 + ((yy - 0.5 + j(0.02)) / ry) ** 2 <= 1.0
        img[body] = 0.38 + j(0.03)
    return img


def _draw_blob(img: np.ndarray, spec: SyntheticFindingSpec, cell: tuple[int, int]) -> None:
    """Rasterize a finding blob strictly inside its grid cell."""
    size = img.shape[0]
    y0, x0, y1, x1 = cell_rect(cell)
    yy, xx = _coords(size)
    h = y1 - y0
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    margin = 0.10 * h
    inside = (yy >= y0 + margin) & (yy < y1 - margin) & (xx >= x0 + margin) & (xx < x1 - margin)

    if spec.shape in ("disc", "small_disc"):
        radius = 0.38 * h if spec.shape == "disc" else 0.24 * h
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2) & inside
        img[mask] = spec.intensity
    elif spec.shape == "rect":
        pad = 0.14 * h
        mask = (yy >= y0 + pad) & (yy < y1 - pad) & (xx >= x0 + pad) & (xx < x1 - pad)
        img[mask] = spec.intensity
    elif spec.shape == "haze":
        bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.30 * h) ** 2)))
        img[inside] = np.clip(img[inside] + spec.intensity * bump[inside], 0.0, 1.0)
    elif spec.shape == "ellipse":
        mask = (((yy - cy) / (0.40 * h)) ** 2 + ((xx - cx) / (0.34 * h)) ** 2 <= 1.0)
        img[mask & inside] = spec.intensity
    elif spec.shape == "line":
        d = np.abs((yy - cy) - 0.8 * (xx - cx))
        img[(d < 0.06 * h) & inside] = spec.intensity
    elif spec.shape == "wedge":
        mask = (yy > y0 + 0.3 * h) & (np.abs(xx - cx) < (yy - y0) * 0.55) & inside
        img[mask] = spec.intensity
    else:
        raise ConfigError(f"unknown blob shape {spec.shape!r}")


def render_image(
    present: set[str],
    specs: tuple[SyntheticFindingSpec, ...] = DEFAULT_FINDINGS,
    size: int = 128,
    view: str = "frontal",
    anatomy_seed: int = 0,
) -> np.ndarray:
    """Deterministic (size, size) float image in [0,1] for a finding set."""
    img = _background(size, view, anatomy_seed)
    for spec in specs:
        if spec.name in present:
            cell = spec.cell if view == "frontal" else (spec.cell[1], spec.cell[0])
            _draw_blob(img, spec, cell)
    return np.clip(img, 0.0, 1.0)


def report_text(
    present: set[str],
    specs: tuple[SyntheticFindingSpec, ...],
    rng: random.Random,
) -> str:
    sentences = []
    for spec in specs:
        pool = spec.present_templates if spec.name in present else spec.absent_templates
        sentences.append(pool[rng.randrange(len(pool))])
    return " ".join(sentences)


@dataclass(frozen=True)
class ParsedSentence:
    finding: str
    present: bool
    start: int      # token offset of the sentence within the report
    length: int


def parse_report_sentences(
    text: str | list[str], specs: tuple[SyntheticFindingSpec, ...]
) -> list[ParsedSentence] | None:
    """Greedy sentence-by-sentence match against the template grammar."""
    tokens = tokenize(text) if isinstance(text, str) else list(text)
    pos = 0
    sentences = []
    for spec in specs:
        matched = None
        for is_present, pool in ((True, spec.present_templates), (False, spec.absent_templates)):
            for template in pool:
                t = tokenize(template)
                if tokens[pos : pos + len(t)] == t:
                    matched = ParsedSentence(spec.name, is_present, pos, len(t))
                    break
            if matched:
                break
        if matched is None:
            return None
        sentences.append(matched)
        pos += matched.length
    return sentences if pos == len(tokens) else None


def parse_report(
    text: str | list[str], specs: tuple[SyntheticFindingSpec, ...]
) -> dict[str, bool] | None:
    """Invert a template report to its finding set; None if it doesn't parse."""
    sentences = parse_report_sentences(text, specs)
    if sentences is None:
        return None
    return {s.finding: s.present for s in sentences}


@dataclass
class ManifestRecord:
    id: str
    images: list[str]
    report: str
    split: str
    findings: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def to_json(self) -> str:
        return json.dumps(
            [
                {
                    "id": r.id,
                    "images": r.images,
                    "report": r.report,
                    "split": r.split,
                    "findings": r.findings,
                }
                for r in self.records
            ],
            indent=2,
            sort_keys=True,
        )


def assign_splits(n: int, seed: int) -> list[str]:
    """Deterministic 70/10/20 split tags (rounded to +-1 sample)."""
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = round(0.7 * n)
    n_val = round(0.1 * n)
    tags = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_val:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    return tags


def generate_synthetic(
    out_dir: str | Path,
    n: int,
    k_findings: int = 4,
    seed: int = 0,
    views: int = 1,
    image_size: int = 128,
    specs: tuple[SyntheticFindingSpec, ...] = DEFAULT_FINDINGS,
) -> DatasetManifest:
    """Write a deterministic synthetic corpus (PNG images + manifest.json)."""
    if n < 10:
        raise ConfigError("need at least 10 samples")
    if not 1 <= k_findings <= len(specs):
        raise ConfigError(f"k_findings must be in [1, {len(specs)}]")
    if views not in (1, 2):
        raise ConfigError("views must be 1 or 2")
    active = specs[:k_findings]
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    tags = assign_splits(n, seed)
    records = []
    for idx in range(n):
        rng = random.Random(seed * 1_000_003 + idx)
        present = {spec.name for spec in active if rng.random() < 0.5}
        sample_id = f"syn{idx:05d}"
        paths = []
        for view in ("frontal", "lateral")[:views]:
            img = render_image(
                present, active, size=image_size, view=view,
                anatomy_seed=seed * 2_000_003 + idx,
            )
            rel = f"images/{sample_id}_{view[0]}.png"
            Image.fromarray(
                np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8), mode="L"
            ).save(out / rel)
            paths.append(rel)
        records.append(
            ManifestRecord(
                id=sample_id,
                images=paths,
                report=report_text(present, active, rng),
                split=tags[idx],
                findings=sorted(present),
            )
        )
    manifest = DatasetManifest(records)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read a manifest; accepts the flat-record layout or per-split arrays."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc

    records = []
    try:
        if isinstance(raw, dict):   # {"train": [...], "val": [...], "test": [...]}
            for split_name, items in raw.items():
                for item in items:
                    records.append(_record_from(item, default_split=split_name))
        elif isinstance(raw, list):
            for item in raw:
                records.append(_record_from(item))
        else:
            raise ParseError(f"{path}: unsupported manifest layout")
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed record ({exc})") from exc

    if check_files:
        missing = [
            img for r in records for img in r.images if not (path.parent / img).exists()
        ]
        if missing:
            raise MissingFileError("missing image files: " + ", ".join(missing))
    return DatasetManifest(records)


def _record_from(item: dict, default_split: str | None = None) -> ManifestRecord:
    images = item.get("images") or item.get("image_path")
    if images is None:
        raise KeyError("images")
    if isinstance(images, str):
        images = [images]
    return ManifestRecord(
        id=str(item["id"]),
        images=list(images),
        report=str(item["report"]),
        split=str(item.get("split", default_split or "train")),
        findings=list(item.get("findings", [])),
    )


@dataclass
class PreprocessSpec:
    resize_size: int = 128
    crop_size: int = 112

    def __post_init__(self):
        if self.crop_size > self.resize_size:
            raise ConfigError("crop must not exceed resize size")


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    resized = Image.fromarray(arr, mode="L").resize((size, size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


def preprocess(
    image: np.ndarray,
    spec: PreprocessSpec = PreprocessSpec(),
    mode: str = "infer",
    seed: int = 0,
) -> np.ndarray:
    """Resize (+seeded random crop when training) to (crop, crop, 1) floats."""
    if mode == "train":
        big = _resize(image, spec.resize_size)
        span = spec.resize_size - spec.crop_size
        rng = random.Random(seed)
        oy = rng.randint(0, span) if span else 0
        ox = rng.randint(0, span) if span else 0
        out = big[oy : oy + spec.crop_size, ox : ox + spec.crop_size]
    elif mode == "infer":
        out = _resize(image, spec.crop_size)
    else:
        raise ConfigError(f"unknown preprocess mode {mode!r}")
    return out[:, :, None].astype(np.float32)


@dataclass
class LoadedCorpus:
    """In-memory corpus: uint8 images per view plus raw report strings."""

    ids: list[str]
    images: list[list[np.ndarray]]   # per sample, per view, (H, W) uint8
    reports: list[str]
    splits: list[str]
    findings: list[list[str]]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]


def load_corpus(manifest: DatasetManifest, root: str | Path) -> LoadedCorpus:
    root = Path(root)
    ids, images, reports, splits, findings = [], [], [], [], []
    for rec in manifest.records:
        views = []
        for rel in rec.images:
            img_path = root / rel
            if not img_path.exists():
                raise MissingFileError(str(img_path))
            views.append(np.asarray(Image.open(img_path).convert("L"), dtype=np.uint8))
        ids.append(rec.id)
        images.append(views)
        reports.append(rec.report)
        splits.append(rec.split)
        findings.append(list(rec.findings))
    return LoadedCorpus(ids, images, reports, splits, findings)


def region_token_weights(
    cell: tuple[int, int], grid_tokens: tuple[int, int]
) -> np.ndarray:
    """Fraction of each visual-token cell lying inside a finding region.

    Token cells tile [0,1]^2 uniformly; the returned (gh, gw) array lets an
    attention map be scored by overlap even when region boundaries fall
    inside token cells.
    """
    y0, x0, y1, x1 = cell_rect(cell)
    gh, gw = grid_tokens
    weights = np.zeros((gh, gw))
    for i in range(gh):
        ty0, ty1 = i / gh, (i + 1) / gh
        oy = max(0.0, min(ty1, y1) - max(ty0, y0))
        if oy == 0.0:
            continue
        for j in range(gw):
            tx0, tx1 = j / gw, (j + 1) / gw
            ox = max(0.0, min(tx1, x1) - max(tx0, x0))
            weights[i, j] = (oy * ox) * gh * gw
    return weights
