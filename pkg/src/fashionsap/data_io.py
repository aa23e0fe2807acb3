"""Corpus schema, image containers, config parsing and the synthetic corpus.

File formats:

* corpus: JSONL, one record per line, canonical key order (round-trippable)
* images: binary PPM (P6, maxval 255) or `.fsapimg` (header ``FSAPIMG1\\n``,
  one ASCII line ``height width``, then row-major little-endian float32)
* config: one flat JSON object mirroring the ModelConfig/TrainConfig fields

The synthetic generator plants a deterministic caption -> image correlation
(colors paint a symbol-specific patch region, length and season set marker
patches) so that every training mechanism is learnable in minutes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorpusParseError,
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    SchemaError,
)
from .model.config import ModelConfig, TrainConfig, configs_from_dict
from .taxonomy import FashionSymbol, map_category
from .textpipe import BinaryAttribute, EnumAttribute, LexicalResource

SEED_ENV_VAR = "FASHIONSAP_SEED"


# -- records ----------------------------------------------------------------


@dataclass
class FashionRecord:
    item_id: str
    caption: str
    category: str
    subcategory: str
    enum_attrs: list[EnumAttribute] = field(default_factory=list)
    binary_attrs: list[BinaryAttribute] = field(default_factory=list)
    image_ref: str = ""
    split: str = "train"


_REQUIRED_FIELDS = ("item_id", "caption", "category", "subcategory", "image_ref", "split")
_SPLITS = ("train", "val", "test")


def record_to_json(rec: FashionRecord) -> str:
    return json.dumps(
        {
            "item_id": rec.item_id,
            "caption": rec.caption,
            "category": rec.category,
            "subcategory": rec.subcategory,
            "enum_attrs": [{"name": a.name, "value": a.value} for a in rec.enum_attrs],
            "binary_attrs": [{"label": a.label, "present": a.present} for a in rec.binary_attrs],
            "image_ref": rec.image_ref,
            "split": rec.split,
        }
    )


def record_from_dict(obj: dict) -> FashionRecord:
    for key in _REQUIRED_FIELDS:
        if key not in obj:
            raise SchemaError(f"record missing required field {key!r}")
    if obj["split"] not in _SPLITS:
        raise SchemaError(f"split must be one of {_SPLITS}, got {obj['split']!r}")
    enum_attrs = [EnumAttribute(a["name"], a["value"]) for a in obj.get("enum_attrs", [])]
    binary_attrs = [BinaryAttribute(a["label"], bool(a["present"])) for a in obj.get("binary_attrs", [])]
    return FashionRecord(
        item_id=str(obj["item_id"]),
        caption=str(obj["caption"]),
        category=str(obj["category"]),
        subcategory=str(obj["subcategory"]),
        enum_attrs=enum_attrs,
        binary_attrs=binary_attrs,
        image_ref=str(obj["image_ref"]),
        split=str(obj["split"]),
    )


def load_corpus(path, images_dir=None, check_images: bool = True) -> list[FashionRecord]:
    """Load and validate a JSONL corpus.

    Duplicate item ids and malformed lines are rejected with the offending
    line number; image references are checked against `images_dir` (default:
    the corpus file's directory).
    """
    path = Path(path)
    base = Path(images_dir) if images_dir is not None else path.parent
    records: list[FashionRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(line_no, f"bad JSON: {exc.msg}") from None
            try:
                rec = record_from_dict(obj)
            except SchemaError as exc:
                raise SchemaError(f"line {line_no}: {exc}") from None
            if rec.item_id in seen:
                raise SchemaError(
                    f"line {line_no}: duplicate item_id {rec.item_id!r} "
                    f"(first seen on line {seen[rec.item_id]})"
                )
            seen[rec.item_id] = line_no
            if check_images and not (base / rec.image_ref).exists():
                raise SchemaError(f"line {line_no}: image_ref {rec.image_ref!r} not found under {base}")
            records.append(rec)
    return records


def write_corpus(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


# -- images -------------------------------------------------------------------

FSAPIMG_MAGIC = b"FSAPIMG1\n"


def save_fsapimg(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"image must be (H, W, 3), got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(FSAPIMG_MAGIC)
        fh.write(f"{img.shape[0]} {img.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _load_fsapimg(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(FSAPIMG_MAGIC))
        if magic != FSAPIMG_MAGIC:
            raise FormatError(f"{path}: bad magic for fsapimg")
        header = fh.readline()
        try:
            h, w = (int(v) for v in header.split())
        except ValueError:
            raise FormatError(f"{path}: bad fsapimg size header") from None
        raw = fh.read(4 * h * w * 3)
        if len(raw) != 4 * h * w * 3:
            raise FormatError(f"{path}: truncated fsapimg payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes in fsapimg")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).copy()


def save_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary P6 image")
    # header: three whitespace-separated fields after the magic
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    need = w * h * 3
    raw = blob[pos : pos + need]
    if len(raw) != need:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image
    ri = (np.arange(size) * h) // size
    ci = (np.arange(size) * w) // size
    return image[ri][:, ci]


def load_image(path, image_size: int) -> np.ndarray:
    """Load a `.ppm` or `.fsapimg` image, scaled to [0, 1] and resized."""
    path = Path(path)
    if path.suffix == ".ppm":
        img = _load_ppm(path)
    elif path.suffix == ".fsapimg":
        img = _load_fsapimg(path)
    else:
        raise FormatError(f"{path}: unsupported image extension {path.suffix!r}")
    img = resize_nearest(img, image_size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- synthetic corpus ---------------------------------------------------------

COLOR_RGB = {
    "red": (0.90, 0.05, 0.05),
    "green": (0.05, 0.90, 0.05),
    "blue": (0.05, 0.05, 0.90),
    "yellow": (0.90, 0.90, 0.05),
    "purple": (0.60, 0.05, 0.70),
    "orange": (0.95, 0.55, 0.05),
}

GARMENTS = [
    "shirt", "sweater", "dress", "skirt", "jacket",
    "jeans", "shorts", "boots", "sneakers", "clutches", "hat",
]

LENGTHS = ("long", "short")
SEASONS = ("summer", "winter")

# patch regions on the 4x4 grid, keyed by symbol
_REGIONS: dict[FashionSymbol, list[tuple[int, int]]] = {
    FashionSymbol.TOPS: [(r, c) for r in (0, 1) for c in range(4)],
    FashionSymbol.DRESSES: [(r, c) for r in (0, 1, 2) for c in range(4)],
    FashionSymbol.SKIRTS: [(2, c) for c in range(4)],
    FashionSymbol.COATS: [(r, c) for r in (0, 1) for c in range(4)] + [(2, 0), (2, 3)],
    FashionSymbol.PANTS: [(r, c) for r in (2, 3) for c in range(4)],
    FashionSymbol.SHOES: [(3, c) for c in range(4)],
    FashionSymbol.BAGS: [(r, c) for r in (1, 2) for c in (0, 1)],
    FashionSymbol.ACCESSORIES: [(0, c) for c in range(4)],
}

DEFAULT_LEXICON = LexicalResource(
    antonyms={
        "long": "short", "short": "long",
        "summer": "winter", "winter": "summer",
        "red": "blue", "blue": "red",
        "green": "purple", "purple": "green",
        "yellow": "orange", "orange": "yellow",
    },
    synonyms={
        "red": ["crimson"], "blue": ["azure"], "long": ["lengthy"],
        "color": ["shade"], "season": ["time"],
    },
)


@dataclass
class SynthSpec:
    """Parameters of the planted-correlation corpus."""

    n_items: int
    seed: int = 0
    colors: tuple = tuple(COLOR_RGB)
    garments: tuple = tuple(GARMENTS)
    image_size: int = 32

    def validate(self) -> "SynthSpec":
        if self.n_items < 2:
            raise InvalidConfigError("n_items must be >= 2")
        if self.image_size % 4 != 0:
            raise InvalidConfigError("image_size must be divisible by the 4-patch grid")
        for g in self.garments:
            if map_category(g) == FashionSymbol.OTHERS:
                raise InvalidConfigError(f"garment {g!r} does not map to a concrete symbol")
        return self


def render_item_image(
    garment: str, color: str, length: str, season: str, image_size: int, garment_idx: int
) -> np.ndarray:
    """Deterministically paint one item: region color + marker patches."""
    p = image_size // 4
    img = np.full((image_size, image_size, 3), 0.55 if season == "summer" else 0.15, dtype=np.float32)
    symbol = map_category(garment)
    rgb = np.asarray(COLOR_RGB[color], dtype=np.float32)
    for (r, c) in _REGIONS[symbol]:
        img[r * p : (r + 1) * p, c * p : (c + 1) * p] = rgb
    # per-garment signature patch so items differ across garments of one symbol
    sr, sc = garment_idx % 4, (2 * garment_idx + 1) % 4
    img[sr * p : (sr + 1) * p, sc * p : (sc + 1) * p] = 0.35 + 0.05 * (garment_idx % 3)
    # length marker at the bottom-left patch
    img[3 * p : 4 * p, 0:p] = 1.0 if length == "long" else 0.05
    return img


def generate_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write corpus.jsonl + images/ + tmir_triples.jsonl + lexicon.json.

    The caption fully determines the image, captions are unique per item
    (combinations are sampled without replacement), and modification texts
    in the TMIR sidecar deterministically recolor the garment region.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, spec.seed]))

    combos = [
        (g, c, ln, se)
        for g in spec.garments
        for c in spec.colors
        for ln in LENGTHS
        for se in SEASONS
    ]
    order = rng.permutation(len(combos))
    if spec.n_items > len(combos):
        raise InvalidConfigError(
            f"n_items={spec.n_items} exceeds the {len(combos)} distinct attribute combinations"
        )
    chosen = [combos[i] for i in order[: spec.n_items]]

    records: list[FashionRecord] = []
    by_key: dict[tuple, list[int]] = {}
    for i, (garment, color, length, season) in enumerate(chosen):
        item_id = f"item_{i:04d}"
        caption = f"a {length} {color} {garment} for {season}"
        image = render_item_image(
            garment, color, length, season, spec.image_size, spec.garments.index(garment)
        )
        ref = f"images/{item_id}.fsapimg"
        save_fsapimg(out / ref, image)
        u = rng.random()
        split = "train" if u < 0.7 else ("val" if u < 0.8 else "test")
        absent = [c for c in spec.colors if c != color]
        rec = FashionRecord(
            item_id=item_id,
            caption=caption,
            category=garment,
            subcategory=garment,
            enum_attrs=[
                EnumAttribute("color", color),
                EnumAttribute("length", length),
                EnumAttribute("season", season),
            ],
            binary_attrs=[
                BinaryAttribute(color, True),
                BinaryAttribute(absent[int(rng.integers(len(absent)))], False),
            ],
            image_ref=ref,
            split=split,
        )
        records.append(rec)
        by_key.setdefault((garment, length, season), []).append(i)

    corpus_path = out / "corpus.jsonl"
    write_corpus(records, corpus_path)

    triples = []
    for i, (garment, color, length, season) in enumerate(chosen):
        partners = [j for j in by_key[(garment, length, season)] if j != i]
        if not partners:
            continue
        j = partners[int(rng.integers(len(partners)))]
        target_color = chosen[j][1]
        triples.append(
            {
                "candidate": records[i].item_id,
                "text": f"change color to {target_color}",
                "target": records[j].item_id,
                "split": records[i].split,
            }
        )
    with open(out / "tmir_triples.jsonl", "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps(t) + "\n")

    DEFAULT_LEXICON.save(out / "lexicon.json")
    return corpus_path


# -- config -------------------------------------------------------------------


def parse_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse a JSON config file; FASHIONSAP_SEED overrides the seed when set."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: bad JSON ({exc.msg})") from None
    mc, tc = configs_from_dict(raw)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            tc.seed = int(env_seed)
        except ValueError:
            raise InvalidConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
    return mc, tc
