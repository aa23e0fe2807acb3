"""Category / subcategory recognition on the fused summary feature."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..core import autograd as ag
from ..core.nn import Linear, Module
from ..core.optim import AdamW
from ..data_io import FashionRecord, load_image
from ..errors import InvalidInputError
from ..model.config import TrainConfig
from ..model.network import FashionSAPModel
from ..textpipe import Vocabulary, build_caption_sequence

log = logging.getLogger("fashionsap.downstream.classify")


class ClassifierHeads(Module):
    """Two independent linear heads over H_0."""

    def __init__(self, d: int, n_categories: int, n_subcategories: int, seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence([0xC1A55, seed]))
        self.category = Linear(d, n_categories, rng, dtype=dtype)
        self.subcategory = Linear(d, n_subcategories, rng, dtype=dtype)

    def __call__(self, h0: ag.Tensor) -> tuple[ag.Tensor, ag.Tensor]:
        return self.category(h0), self.subcategory(h0)


def build_label_maps(records: list[FashionRecord]) -> tuple[dict[str, int], dict[str, int]]:
    cats = sorted({r.category for r in records})
    subs = sorted({r.subcategory for r in records})
    return {c: i for i, c in enumerate(cats)}, {s: i for i, s in enumerate(subs)}


def save_label_maps(path, cat_map: dict[str, int], sub_map: dict[str, int]) -> None:
    Path(path).write_text(
        json.dumps({"category": cat_map, "subcategory": sub_map}, indent=1, sort_keys=True),
        encoding="utf-8",
    )


def load_label_maps(path) -> tuple[dict[str, int], dict[str, int]]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return raw["category"], raw["subcategory"]


def classify_cr_scr(
    model: FashionSAPModel,
    heads: ClassifierHeads,
    ids: np.ndarray,
    mask: np.ndarray,
    images: np.ndarray,
) -> tuple[ag.Tensor, ag.Tensor]:
    """Forward a batch to (category logits, subcategory logits)."""
    text = model.encode_text_ids(ids, mask)
    image = model.encode_image(images)
    h = model.fuse(text, image, mask)
    return heads(h[:, 0])


def accuracy(preds: np.ndarray, golds: np.ndarray) -> float:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape or preds.size == 0:
        raise InvalidInputError("predictions and golds must be equal-length and non-empty")
    return float((preds == golds).mean())


def macro_f1(preds: np.ndarray, golds: np.ndarray) -> float:
    """Unweighted mean of per-class F1.

    Classes with neither gold nor predicted instances are excluded from the
    average; a class with gold or predicted instances but no true positives
    contributes 0.
    """
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    classes = sorted(set(preds.tolist()) | set(golds.tolist()))
    f1s = []
    for c in classes:
        tp = int(((preds == c) & (golds == c)).sum())
        fp = int(((preds == c) & (golds != c)).sum())
        fn = int(((preds != c) & (golds == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(f1s)) if f1s else 0.0


def metrics(preds: np.ndarray, golds: np.ndarray) -> tuple[float, float]:
    return accuracy(preds, golds), macro_f1(preds, golds)


def _encode_labels(records, label_map: dict[str, int], field: str) -> np.ndarray:
    out = []
    for rec in records:
        value = getattr(rec, field)
        if value not in label_map:
            log.warning("unknown %s label %r, counted as error class", field, value)
            out.append(-1)
        else:
            out.append(label_map[value])
    return np.asarray(out, dtype=np.int64)


class ClassifyFinetuner:
    """Cross-entropy fine-tuning of the encoders + the two linear heads."""

    def __init__(
        self,
        model: FashionSAPModel,
        heads: ClassifierHeads,
        train_cfg: TrainConfig,
        records: list[FashionRecord],
        images_dir,
        vocab: Vocabulary,
        cat_map: dict[str, int],
        sub_map: dict[str, int],
    ):
        self.model = model
        self.heads = heads
        self.tc = train_cfg.validate()
        self.records = records
        self.images_dir = Path(images_dir)
        self.vocab = vocab
        self.cat_map = cat_map
        self.sub_map = sub_map
        params = dict(model.named_parameters())
        params.update({f"heads.{n}": p for n, p in heads.named_parameters()})
        from ..core.nn import ParameterStore

        self.optimizer = AdamW(ParameterStore(params), lr=self.tc.lr, weight_decay=self.tc.weight_decay)
        self.step = 0
        self._cache: dict[str, np.ndarray] = {}

    def _image(self, rec):
        if rec.item_id not in self._cache:
            self._cache[rec.item_id] = load_image(self.images_dir / rec.image_ref, self.model.cfg.image_size)
        return self._cache[rec.item_id]

    def _batch(self, step: int):
        n = len(self.records)
        bsz = min(self.tc.batch_size, n)
        steps_per_epoch = max(1, n // bsz)
        perm = np.random.default_rng(
            np.random.SeedSequence([self.tc.seed, 9176, step // steps_per_epoch])
        ).permutation(n)
        idx = [int(perm[((step % steps_per_epoch) * bsz + j) % n]) for j in range(bsz)]
        recs = [self.records[i] for i in idx]
        seqs = [build_caption_sequence(r.caption, self.vocab, self.model.cfg.max_text_len) for r in recs]
        return (
            np.stack([s.ids for s in seqs]),
            np.stack([s.attention_mask for s in seqs]),
            np.stack([self._image(r) for r in recs]),
            _encode_labels(recs, self.cat_map, "category"),
            _encode_labels(recs, self.sub_map, "subcategory"),
        )

    def step_once(self) -> float:
        ids, mask, images, cats, subs = self._batch(self.step)
        cat_logits, sub_logits = classify_cr_scr(self.model, self.heads, ids, mask, images)
        loss = ag.add(ag.cross_entropy(cat_logits, cats), ag.cross_entropy(sub_logits, subs))
        self.model.zero_grad()
        self.heads.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.model.clamp_tau()
        self.step += 1
        return float(loss.data)


def evaluate_classifier(
    model: FashionSAPModel,
    heads: ClassifierHeads,
    records: list[FashionRecord],
    images_dir,
    vocab: Vocabulary,
    cat_map: dict[str, int],
    sub_map: dict[str, int],
    batch: int = 32,
) -> dict:
    images_dir = Path(images_dir)
    cat_preds, sub_preds = [], []
    with ag.no_grad():
        for lo in range(0, len(records), batch):
            recs = records[lo : lo + batch]
            seqs = [build_caption_sequence(r.caption, vocab, model.cfg.max_text_len) for r in recs]
            ids = np.stack([s.ids for s in seqs])
            mask = np.stack([s.attention_mask for s in seqs])
            imgs = np.stack([load_image(images_dir / r.image_ref, model.cfg.image_size) for r in recs])
            cat_logits, sub_logits = classify_cr_scr(model, heads, ids, mask, imgs)
            cat_preds.append(np.argmax(cat_logits.data, axis=1))
            sub_preds.append(np.argmax(sub_logits.data, axis=1))
    cat_preds = np.concatenate(cat_preds)
    sub_preds = np.concatenate(sub_preds)
    cat_golds = _encode_labels(records, cat_map, "category")
    sub_golds = _encode_labels(records, sub_map, "subcategory")
    cat_acc, cat_f = metrics(cat_preds, cat_golds)
    sub_acc, sub_f = metrics(sub_preds, sub_golds)
    return {
        "cr": {"acc": cat_acc, "macro_f": cat_f},
        "scr": {"acc": sub_acc, "macro_f": sub_f},
    }


def finetune_classify(
    model: FashionSAPModel,
    train_cfg: TrainConfig,
    records: list[FashionRecord],
    images_dir,
    vocab: Vocabulary,
    out_dir,
    trainable_splits=("train",),
) -> tuple[Path, ClassifierHeads, dict[str, int], dict[str, int]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cat_map, sub_map = build_label_maps(records)
    train = [r for r in records if r.split in trainable_splits] or list(records)
    heads = ClassifierHeads(model.cfg.d, len(cat_map), len(sub_map), seed=train_cfg.seed)
    tuner = ClassifyFinetuner(model, heads, train_cfg, train, images_dir, vocab, cat_map, sub_map)
    with open(out / "loss_log.jsonl", "a", encoding="utf-8") as fh:
        for step in range(train_cfg.steps):
            loss = tuner.step_once()
            fh.write(json.dumps({"step": step, "cls": loss, "total": loss}) + "\n")
    save_label_maps(out / "labels.json", cat_map, sub_map)
    final = out / "ckpt_classify.fsap"
    model.save(final, extra={f"heads.{n}": p.data for n, p in heads.named_parameters()})
    return final, heads, cat_map, sub_map


def load_classifier(model: FashionSAPModel, ckpt_path, labels_path) -> tuple[ClassifierHeads, dict, dict]:
    cat_map, sub_map = load_label_maps(labels_path)
    extra = model.load(ckpt_path)
    heads = ClassifierHeads(model.cfg.d, len(cat_map), len(sub_map))
    values = {n[len("heads."):]: a for n, a in extra.items() if n.startswith("heads.")}
    from ..core.nn import ParameterStore

    ParameterStore.of(heads).load_values(values)
    return heads, cat_map, sub_map
