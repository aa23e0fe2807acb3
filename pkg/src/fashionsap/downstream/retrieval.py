"""Cross-modal retrieval: fine-tuning, ranking and the two evaluation protocols.

In the downstream stage the symbol token, attribute prompts and token
replacement are all disabled: text enters as plain [CLS] + caption, and only
the similarity and match losses are trained.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import autograd as ag
from ..core.optim import AdamW
from ..data_io import FashionRecord, load_image
from ..errors import InvalidInputError
from ..model.config import ModelConfig, TrainConfig
from ..model.network import FashionSAPModel
from ..objectives import itm_loss, its_distributions, its_loss, its_similarities, total_loss
from ..pretrain import (
    FeatureQueue,
    _negative_weights,
    _np_softmax_rows,
    _sample_negatives,
    make_momentum_pair,
    momentum_update,
    step_rng,
)
from ..textpipe import Vocabulary, build_caption_sequence

log = logging.getLogger("fashionsap.downstream.retrieval")


@dataclass
class RetrievalIndex:
    """Unit-normalized projected features for a fixed item list."""

    item_ids: list[str]
    text_feats: np.ndarray   # (N, d)
    image_feats: np.ndarray  # (N, d)

    def __post_init__(self):
        if not (len(self.item_ids) == self.text_feats.shape[0] == self.image_feats.shape[0]):
            raise InvalidInputError("index field lengths differ")


def encode_corpus(
    model: FashionSAPModel,
    records: list[FashionRecord],
    images_dir,
    vocab: Vocabulary,
    batch: int = 32,
    layout: str = "caption",
) -> RetrievalIndex:
    """Project every record's caption and image into the similarity space.

    `layout` picks the text interface: "caption" is the downstream [CLS] +
    caption form; "symbol" keeps the pre-training [CLS][SYMBOL]+caption form
    and is the right probe for a checkpoint that has not been fine-tuned.
    """
    from ..taxonomy import map_category
    from ..textpipe import build_pretrain_sequence

    if layout not in ("caption", "symbol"):
        raise InvalidInputError(f"layout must be caption|symbol, got {layout!r}")
    images_dir = Path(images_dir)
    ids_rows, masks, imgs = [], [], []
    for rec in records:
        if layout == "symbol":
            seq = build_pretrain_sequence(
                rec.caption, map_category(rec.category), None, vocab, model.cfg.max_text_len
            )
        else:
            seq = build_caption_sequence(rec.caption, vocab, model.cfg.max_text_len)
        ids_rows.append(seq.ids)
        masks.append(seq.attention_mask)
        imgs.append(load_image(images_dir / rec.image_ref, model.cfg.image_size))
    text_feats, image_feats = [], []
    with ag.no_grad():
        for lo in range(0, len(records), batch):
            hi = lo + batch
            t = model.encode_text_ids(np.stack(ids_rows[lo:hi]), np.stack(masks[lo:hi]))
            text_feats.append(model.proj_its(t[:, 0], "text_side").data)
            i = model.encode_image(np.stack(imgs[lo:hi]))
            image_feats.append(model.proj_its(i[:, 0], "image_side").data)
    return RetrievalIndex(
        [r.item_id for r in records],
        np.concatenate(text_feats, axis=0),
        np.concatenate(image_feats, axis=0),
    )


def rank(query: np.ndarray, index: RetrievalIndex, direction: str) -> list[str]:
    """Candidate ids by descending cosine similarity; ties break to the lower id."""
    if len(index.item_ids) == 0:
        raise InvalidInputError("empty retrieval index")
    if direction == "T2I":
        cands = index.image_feats
    elif direction == "I2T":
        cands = index.text_feats
    else:
        raise InvalidInputError(f"direction must be I2T|T2I, got {direction!r}")
    sims = cands @ np.asarray(query)
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], index.item_ids[i]))
    return [index.item_ids[i] for i in order]


def recall_from_sims(sims: np.ndarray, positives: np.ndarray, ks) -> dict[int, float]:
    """R@K over a (Q, C) similarity matrix.

    The positive's rank counts strictly-greater candidates plus earlier-index
    ties, matching the deterministic tie rule of rank().
    """
    sims = np.asarray(sims)
    positives = np.asarray(positives, dtype=np.int64)
    q = sims.shape[0]
    pos_vals = sims[np.arange(q), positives]
    greater = (sims > pos_vals[:, None]).sum(axis=1)
    idx = np.arange(sims.shape[1])[None, :]
    tied_before = ((sims == pos_vals[:, None]) & (idx < positives[:, None])).sum(axis=1)
    ranks = greater + tied_before
    return {int(k): float((ranks < k).mean()) for k in ks}


def _draw_negatives(pool: list[int], n: int, rng: np.random.Generator) -> np.ndarray | None:
    if not pool:
        return None
    if len(pool) >= n:
        return rng.choice(pool, size=n, replace=False)
    log.warning("only %d same-subcategory negatives for %d slots, sampling with replacement", len(pool), n)
    return rng.choice(pool, size=n, replace=True)


def subset_protocol_eval(
    index: RetrievalIndex,
    records: list[FashionRecord],
    n_queries: int = 100,
    n_negatives: int = 7,
    n_sets: int = 5,
    seed: int = 0,
    ks=(1, 5, 10),
) -> dict:
    """Averaged R@K where each query ranks 1 positive among same-subcategory negatives."""
    if [r.item_id for r in records] != index.item_ids:
        raise InvalidInputError("records must match the index item order")
    by_subcat: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_subcat.setdefault(rec.subcategory, []).append(i)

    acc = {d: {int(k): [] for k in ks} for d in ("i2t", "t2i")}
    for s in range(n_sets):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 271, s]))
        n = len(records)
        if n_queries <= n:
            queries = rng.choice(n, size=n_queries, replace=False)
        else:
            queries = rng.choice(n, size=n_queries, replace=True)
        rows_t2i, rows_i2t = [], []
        for q in queries:
            pool = [i for i in by_subcat[records[q].subcategory] if i != q]
            negs = _draw_negatives(pool, n_negatives, rng)
            if negs is None:
                log.warning("query %s has no same-subcategory negative, skipped", records[q].item_id)
                continue
            cand = np.concatenate([[q], negs]).astype(np.int64)
            rows_t2i.append(index.image_feats[cand] @ index.text_feats[q])
            rows_i2t.append(index.text_feats[cand] @ index.image_feats[q])
        if not rows_t2i:
            continue
        zeros = np.zeros(len(rows_t2i), dtype=np.int64)
        for direction, rows in (("t2i", rows_t2i), ("i2t", rows_i2t)):
            rec_at = recall_from_sims(np.stack(rows), zeros, ks)
            for k, v in rec_at.items():
                acc[direction][k].append(v)

    report = {
        d: {f"R@{k}": float(np.mean(v)) if v else 0.0 for k, v in acc[d].items()}
        for d in ("i2t", "t2i")
    }
    report["mean_r1"] = 0.5 * (report["i2t"]["R@1"] + report["t2i"]["R@1"])
    return report


def full_protocol_eval(index: RetrievalIndex, ks=(1, 5, 10)) -> dict:
    """R@K with every opposite-modality item as a candidate."""
    n = len(index.item_ids)
    if n == 0:
        raise InvalidInputError("empty retrieval index")
    positives = np.arange(n)
    sims_t2i = index.text_feats @ index.image_feats.T
    sims_i2t = index.image_feats @ index.text_feats.T
    report = {
        "i2t": {f"R@{k}": v for k, v in recall_from_sims(sims_i2t, positives, ks).items()},
        "t2i": {f"R@{k}": v for k, v in recall_from_sims(sims_t2i, positives, ks).items()},
    }
    report["mean_r1"] = 0.5 * (report["i2t"]["R@1"] + report["t2i"]["R@1"])
    return report


class RetrievalFinetuner:
    """Similarity + match fine-tuning over [CLS]+caption sequences."""

    def __init__(
        self,
        model: FashionSAPModel,
        train_cfg: TrainConfig,
        records: list[FashionRecord],
        images_dir,
        vocab: Vocabulary,
        trainable_splits=("train",),
    ):
        self.tc = train_cfg.validate()
        self.model = model
        self.cfg: ModelConfig = model.cfg
        self.vocab = vocab
        self.images_dir = Path(images_dir)
        self.records = [r for r in records if r.split in trainable_splits] or list(records)
        self.momentum_model = FashionSAPModel(self.cfg, seed=train_cfg.seed)
        self.pair = make_momentum_pair(model, self.momentum_model, self.cfg.momentum)
        self.queue = FeatureQueue(self.cfg.queue_size, self.cfg.d)
        self.optimizer = AdamW(self.pair.online, lr=self.tc.lr, weight_decay=self.tc.weight_decay)
        self.step = 0
        self._cache: dict[str, np.ndarray] = {}

    def _image(self, rec: FashionRecord) -> np.ndarray:
        if rec.item_id not in self._cache:
            self._cache[rec.item_id] = load_image(self.images_dir / rec.image_ref, self.cfg.image_size)
        return self._cache[rec.item_id]

    def _batch(self, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(self.records)
        bsz = self.tc.batch_size
        steps_per_epoch = max(1, n // bsz)
        perm = np.random.default_rng(
            np.random.SeedSequence([self.tc.seed, 104729, step // steps_per_epoch])
        ).permutation(n)
        idx = [int(perm[((step % steps_per_epoch) * bsz + j) % n]) for j in range(bsz)]
        recs = [self.records[i] for i in idx]
        seqs = [build_caption_sequence(r.caption, self.vocab, self.cfg.max_text_len) for r in recs]
        return (
            np.stack([s.ids for s in seqs]),
            np.stack([s.attention_mask for s in seqs]),
            np.stack([self._image(r) for r in recs]),
        )

    def step_once(self) -> dict:
        rng = step_rng(self.tc.seed, self.step, stream=1)
        ids, mask, images = self._batch(self.step)
        model, cfg, tc = self.model, self.cfg, self.tc
        b = ids.shape[0]

        text = model.encode_text_ids(ids, mask)
        image = model.encode_image(images)
        q_text = model.proj_its(text[:, 0], "text_side")
        q_image = model.proj_its(image[:, 0], "image_side")
        with ag.no_grad():
            m_text = self.momentum_model.proj_its(
                self.momentum_model.encode_text_ids(ids, mask)[:, 0], "text_side"
            ).data
            m_img = self.momentum_model.proj_its(
                self.momentum_model.encode_image(images)[:, 0], "image_side"
            ).data
        q_t_store, q_i_store = self.queue.snapshot()
        cand_text = np.concatenate([m_text, q_t_store.astype(m_text.dtype)])
        cand_image = np.concatenate([m_img, q_i_store.astype(m_img.dtype)])
        sim_t2i, sim_i2t = its_similarities(q_text, q_image, cand_text, cand_image)
        g_t2i = its_distributions(sim_t2i, model.tau)
        g_i2t = its_distributions(sim_i2t, model.tau)
        tau = model.tau_value()
        mom_t2i = _np_softmax_rows(m_text @ cand_image.T / tau)
        mom_i2t = _np_softmax_rows(m_img @ cand_text.T / tau)
        its = its_loss(g_i2t, g_t2i, np.arange(b), mom_i2t, mom_t2i, cfg.distill_weight)

        neg_image = _sample_negatives(_negative_weights(sim_t2i.data[:, :b], tau, tc.negative_sampling), rng)
        neg_text = _sample_negatives(_negative_weights(sim_i2t.data[:, :b], tau, tc.negative_sampling), rng)
        idxs = np.arange(b)
        text_idx = np.concatenate([idxs, idxs, neg_text])
        image_idx = np.concatenate([idxs, neg_image, idxs])
        h = model.fuse(text[text_idx], image[image_idx], mask[text_idx])
        labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(2 * b, dtype=np.int64)])
        itm = itm_loss(model.itm_logits(h[:, 0]), labels)

        report = total_loss(0.0, 0.0, 0.0, its, itm)
        total = ag.add(its, itm)
        model.zero_grad()
        total.backward()
        self.optimizer.step()
        model.clamp_tau()
        momentum_update(self.pair)
        self.queue.enqueue(m_text, m_img)
        self.step += 1
        return {"its": report.its, "itm": report.itm, "total": report.its + report.itm}


def finetune_retrieval(
    model: FashionSAPModel,
    train_cfg: TrainConfig,
    records: list[FashionRecord],
    images_dir,
    vocab: Vocabulary,
    out_dir,
) -> Path:
    """Run the similarity/match fine-tuning loop; returns the checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tuner = RetrievalFinetuner(model, train_cfg, records, images_dir, vocab)
    with open(out / "loss_log.jsonl", "a", encoding="utf-8") as fh:
        for step in range(train_cfg.steps):
            parts = tuner.step_once()
            fh.write(json.dumps({"step": step, **parts}) + "\n")
    final = out / "ckpt_retrieval.fsap"
    model.save(final)
    return final
