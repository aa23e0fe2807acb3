"""End-to-end pre-training: batch assembly, momentum mirror, queue, loop.

Determinism contract: every stochastic choice in step s (batch variants, ITM
negative sampling) is drawn from a generator seeded by (seed, s), and the
epoch shuffle by (seed, epoch). A run is therefore a pure function of
(configs, seed, corpus), and resuming from a step-k checkpoint reproduces
the non-resumed run exactly.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import autograd as ag
from .core import kernels
from .core.nn import ParameterStore
from .core.optim import AdamW
from .data_io import FashionRecord, load_corpus, load_image
from .errors import InvalidConfigError, InvalidInputError, InvalidStateError
from .model.config import ModelConfig, TrainConfig
from .model.network import FashionSAPModel
from .objectives import (
    LossReport,
    fsis_loss,
    itm_loss,
    its_distributions,
    its_loss,
    its_similarities,
    ptp_loss,
    sum_parts,
    total_loss,
    trp_loss,
)
from .taxonomy import map_category
from .textpipe import (
    CLS_ID,
    LexicalResource,
    TokenSequence,
    Vocabulary,
    apply_mlm_masking,
    apply_ptp_blanking,
    apply_trp_corruption,
    prompt_piece,
    render_binary_prompt,
    render_enum_prompt,
    tokenize_words,
)

log = logging.getLogger("fashionsap.pretrain")


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Generator for one training step; stream separates independent uses."""
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, step, stream]))


# -- momentum pair ------------------------------------------------------------


@dataclass
class MomentumPair:
    """Online parameters plus their exponentially averaged mirror."""

    online: ParameterStore
    momentum: ParameterStore
    m: float

    def __post_init__(self):
        if self.online.names() != self.momentum.names():
            raise InvalidStateError("online/momentum parameter name sets differ")
        if not 0.0 < self.m <= 1.0:
            raise InvalidConfigError(f"momentum coefficient must be in (0, 1], got {self.m}")


def make_momentum_pair(online_model, momentum_model, m: float) -> MomentumPair:
    online = online_model.param_store()
    momentum = momentum_model.param_store()
    values = {name: p.data.copy() for name, p in online.items()}
    momentum.load_values(values)
    for p in momentum._named.values():
        p.requires_grad = False
    return MomentumPair(online, momentum, m)


def momentum_update(pair: MomentumPair) -> None:
    """theta' <- m * theta' + (1 - m) * theta, elementwise over all parameters."""
    m = pair.m
    for name, po in pair.online.items():
        pm = pair.momentum[name]
        if pm.data.shape != po.data.shape:
            raise InvalidStateError(f"shape mismatch for momentum parameter {name}")
        pm.data = np.asarray(m * pm.data + (1.0 - m) * po.data)


# -- feature queue -------------------------------------------------------------


class FeatureQueue:
    """Fixed-capacity FIFO ring of unit feature vectors, one buffer per modality."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.text = np.zeros((self.capacity, self.dim), dtype=dtype)
        self.image = np.zeros((self.capacity, self.dim), dtype=dtype)
        self.cursor = 0
        self.occupancy = 0

    def enqueue(self, text_feats: np.ndarray, image_feats: np.ndarray) -> None:
        text_feats = np.asarray(text_feats)
        image_feats = np.asarray(image_feats)
        if text_feats.shape != image_feats.shape or text_feats.ndim != 2:
            raise InvalidInputError("text/image feature batches must be aligned (B, d)")
        for feats in (text_feats, image_feats):
            norms = np.sqrt((feats * feats).sum(axis=1))
            if norms.size and np.abs(norms - 1.0).max() > 1e-3:
                raise InvalidInputError("queue features must be unit-normalized")
        if self.capacity == 0:
            return
        for i in range(text_feats.shape[0]):
            self.text[self.cursor] = text_feats[i]
            self.image[self.cursor] = image_feats[i]
            self.cursor = (self.cursor + 1) % self.capacity
            self.occupancy = min(self.capacity, self.occupancy + 1)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored entries, oldest first."""
        if self.occupancy < self.capacity:
            return self.text[: self.occupancy].copy(), self.image[: self.occupancy].copy()
        order = np.r_[np.arange(self.cursor, self.capacity), np.arange(self.cursor)]
        return self.text[order].copy(), self.image[order].copy()


# -- batch assembly ------------------------------------------------------------


@dataclass
class BatchBundle:
    """All per-step model inputs plus supervision indices."""

    records: list[FashionRecord]
    images: np.ndarray                      # (B, S, S, 3)
    clean_ids: np.ndarray                   # (B, L)
    clean_mask: np.ndarray
    mlm_ids: np.ndarray
    mlm_rows: tuple[np.ndarray, np.ndarray]  # (batch idx, position)
    mlm_targets: np.ndarray
    pmt_ids: np.ndarray
    pmt_mask: np.ndarray
    pmt_rows: tuple[np.ndarray, np.ndarray]
    pmt_targets: np.ndarray
    trp_ids: np.ndarray
    trp_mask: np.ndarray
    trp_rows: tuple[np.ndarray, np.ndarray]
    trp_labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.records)


def corpus_vocabulary(records, extra_texts=()) -> Vocabulary:
    """Vocabulary over captions, rendered prompts (both answers) and extras."""
    texts = []
    for rec in records:
        texts.append(rec.caption)
        for attr in rec.enum_attrs:
            texts.append(render_enum_prompt(attr))
        for attr in rec.binary_attrs:
            texts.append(render_binary_prompt(dataclasses.replace(attr, present=True)))
            texts.append(render_binary_prompt(dataclasses.replace(attr, present=False)))
    texts.extend(extra_texts)
    return Vocabulary.build(texts)


def _pad_row(ids: list[int], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = ids[:max_len]
    row = np.zeros(max_len, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.int64)
    row[: len(ids)] = ids
    mask[: len(ids)] = 1
    return row, mask


def build_batch(
    records: list[FashionRecord],
    vocab: Vocabulary,
    lex: LexicalResource,
    rng: np.random.Generator,
    cfg: ModelConfig,
    image_loader,
    prompts_per_record: int = 1,
) -> BatchBundle:
    """Assemble the clean/masked/prompted/corrupted variants for one step.

    Per record: the clean [CLS][SYMBOL]+caption sequence, its masked twin,
    a prompt-appended twin with one blanked attribute prompt (one attribute
    chosen uniformly from the record's enumerable + binary attributes), and
    the replace-corrupted caption+value stream. Records without captions are
    skipped with a warning.
    """
    L = cfg.max_text_len
    kept: list[FashionRecord] = []
    images = []
    clean_ids, clean_mask = [], []
    mlm_ids = []
    mlm_b, mlm_p, mlm_t = [], [], []
    pmt_ids, pmt_mask = [], []
    pmt_b, pmt_p, pmt_t = [], [], []
    trp_ids, trp_mask = [], []
    trp_b, trp_p, trp_l = [], [], []

    for rec in records:
        if not rec.caption or not rec.caption.strip():
            log.warning("record %s has no caption, skipped", rec.item_id)
            continue
        b = len(kept)
        kept.append(rec)
        images.append(image_loader(rec))
        symbol = map_category(rec.category)
        caption_ids = vocab.encode_words(tokenize_words(rec.caption))
        base = [CLS_ID, vocab.symbol_id(symbol)]

        row, mask = _pad_row(base + caption_ids, L)
        clean_ids.append(row)
        clean_mask.append(mask)

        masked, targets = apply_mlm_masking(TokenSequence(row, mask), rng)
        mlm_ids.append(masked)
        for pos, tgt in sorted(targets.items()):
            mlm_b.append(b)
            mlm_p.append(pos)
            mlm_t.append(tgt)

        # prompt stream: sample attributes, append prompts, blank one span each
        attrs = list(rec.enum_attrs) + list(rec.binary_attrs)
        ids = list(base) + list(caption_ids)
        spans = []
        if attrs and prompts_per_record > 0:
            n_prompts = min(prompts_per_record, len(attrs))
            chosen = rng.choice(len(attrs), size=n_prompts, replace=False)
            for ai in chosen:
                piece = prompt_piece(attrs[int(ai)], vocab)
                offset = len(ids)
                ids = ids + piece.ids
                spans.append(
                    (
                        (offset + piece.name_span[0], offset + piece.name_span[1]),
                        (offset + piece.value_span[0], offset + piece.value_span[1]),
                    )
                )
        row_p, mask_p = _pad_row(ids, L)
        real = int(mask_p.sum())
        for name_span, value_span in spans:
            clip = lambda s: (min(s[0], real), min(s[1], real))
            row_p, targets = apply_ptp_blanking(row_p, clip(name_span), clip(value_span), rng)
            for pos, tgt in sorted(targets.items()):
                pmt_b.append(b)
                pmt_p.append(pos)
                pmt_t.append(tgt)
        pmt_ids.append(row_p)
        pmt_mask.append(mask_p)

        # replace-corruption stream: caption + one attribute value
        value_ids: list[int] = []
        if attrs:
            attr = attrs[int(rng.integers(len(attrs)))]
            value_text = attr.value if hasattr(attr, "value") else attr.label
            value_ids = vocab.encode_words(tokenize_words(value_text))
        stream = (list(caption_ids) + value_ids)[: L - 2]
        outcome = apply_trp_corruption(stream[: len(caption_ids)], stream[len(caption_ids):],
                                       lex, vocab, rng)
        row_t, mask_t = _pad_row(base + list(outcome.ids), L)
        trp_ids.append(row_t)
        trp_mask.append(mask_t)
        for pos in range(len(outcome.ids)):
            trp_b.append(b)
            trp_p.append(2 + pos)
            trp_l.append(int(outcome.labels[pos]))

    if not kept:
        raise InvalidInputError("no usable records in batch")

    return BatchBundle(
        records=kept,
        images=np.stack(images).astype(np.float32),
        clean_ids=np.stack(clean_ids),
        clean_mask=np.stack(clean_mask),
        mlm_ids=np.stack(mlm_ids),
        mlm_rows=(np.asarray(mlm_b, dtype=np.int64), np.asarray(mlm_p, dtype=np.int64)),
        mlm_targets=np.asarray(mlm_t, dtype=np.int64),
        pmt_ids=np.stack(pmt_ids),
        pmt_mask=np.stack(pmt_mask),
        pmt_rows=(np.asarray(pmt_b, dtype=np.int64), np.asarray(pmt_p, dtype=np.int64)),
        pmt_targets=np.asarray(pmt_t, dtype=np.int64),
        trp_ids=np.stack(trp_ids),
        trp_mask=np.stack(trp_mask),
        trp_rows=(np.asarray(trp_b, dtype=np.int64), np.asarray(trp_p, dtype=np.int64)),
        trp_labels=np.asarray(trp_l, dtype=np.int64),
    )


# -- single step ---------------------------------------------------------------


def _np_softmax_rows(x: np.ndarray) -> np.ndarray:
    return kernels.softmax_fwd(np.ascontiguousarray(x))


def _sample_negatives(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from the given per-row categorical weights."""
    b = weights.shape[0]
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        out[i] = rng.choice(weights.shape[1], p=weights[i])
    return out


def _negative_weights(sims: np.ndarray, tau: float, mode: str) -> np.ndarray:
    b = sims.shape[0]
    if mode == "uniform":
        w = np.ones((b, b))
    else:
        w = _np_softmax_rows(sims / tau).astype(np.float64)
    w[np.arange(b), np.arange(b)] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def pretrain_step(
    model: FashionSAPModel,
    momentum_model: FashionSAPModel,
    pair: MomentumPair,
    queue: FeatureQueue,
    batch: BatchBundle,
    optimizer: AdamW,
    tc: TrainConfig,
    rng: np.random.Generator,
    alpha: float | None = None,
) -> LossReport:
    """Forward the five losses, backprop their sum, update, mirror, enqueue."""
    cfg = model.cfg
    b = batch.size
    if alpha is None:
        alpha = cfg.distill_weight

    text = model.encode_text_ids(batch.clean_ids, batch.clean_mask)
    image = model.encode_image(batch.images)
    v_cls = text[:, 0]
    v_symbol = text[:, 1]
    v_img = image[:, 0]

    # symbol/image similarity in the adapted space
    fsis = fsis_loss(
        model.adapt(v_img, "image_side"), model.adapt(v_symbol, "text_side"), tc.fsis_form
    )

    # momentum features and candidates
    with ag.no_grad():
        m_text_feats = momentum_model.proj_its(
            momentum_model.encode_text_ids(batch.clean_ids, batch.clean_mask)[:, 0], "text_side"
        ).data
        m_img_feats = momentum_model.proj_its(
            momentum_model.encode_image(batch.images)[:, 0], "image_side"
        ).data
    q_text_store, q_img_store = queue.snapshot()
    cand_text = np.concatenate([m_text_feats, q_text_store.astype(m_text_feats.dtype)], axis=0)
    cand_image = np.concatenate([m_img_feats, q_img_store.astype(m_img_feats.dtype)], axis=0)

    q_text = model.proj_its(v_cls, "text_side")
    q_image = model.proj_its(v_img, "image_side")
    sim_t2i, sim_i2t = its_similarities(q_text, q_image, cand_text, cand_image)
    g_t2i = its_distributions(sim_t2i, model.tau)
    g_i2t = its_distributions(sim_i2t, model.tau)
    tau = model.tau_value()
    mom_t2i = _np_softmax_rows(m_text_feats @ cand_image.T / tau)
    mom_i2t = _np_softmax_rows(m_img_feats @ cand_text.T / tau)
    positives = np.arange(b)
    its = its_loss(g_i2t, g_t2i, positives, mom_i2t, mom_t2i, alpha)

    # matched/mismatched pairs with sampled in-batch negatives
    neg_image = _sample_negatives(
        _negative_weights(sim_t2i.data[:, :b], tau, tc.negative_sampling), rng
    )
    neg_text = _sample_negatives(
        _negative_weights(sim_i2t.data[:, :b], tau, tc.negative_sampling), rng
    )
    idx = np.arange(b)
    text_idx = np.concatenate([idx, idx, neg_text])
    image_idx = np.concatenate([idx, neg_image, idx])
    h_pairs = model.fuse(text[text_idx], image[image_idx], batch.clean_mask[text_idx])
    itm_logits = model.itm_logits(h_pairs[:, 0])
    itm_labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(2 * b, dtype=np.int64)])
    itm = itm_loss(itm_logits, itm_labels)

    # merged masked + prompted token prediction
    h_mlm = model.fuse(model.encode_text_ids(batch.mlm_ids, batch.clean_mask), image, batch.clean_mask)
    h_pmt = model.fuse(model.encode_text_ids(batch.pmt_ids, batch.pmt_mask), image, batch.pmt_mask)
    sup_rows = []
    sup_targets = []
    if batch.mlm_targets.size:
        sup_rows.append(h_mlm[batch.mlm_rows])
        sup_targets.append(batch.mlm_targets)
    if batch.pmt_targets.size:
        sup_rows.append(h_pmt[batch.pmt_rows])
        sup_targets.append(batch.pmt_targets)
    if sup_rows:
        rows = sup_rows[0] if len(sup_rows) == 1 else ag.concat(sup_rows, axis=0)
        ptp = ptp_loss(model.prompt_logits(rows), np.concatenate(sup_targets))
    else:
        ptp = ptp_loss(None, np.empty(0, dtype=np.int64))

    # replaced-token detection on the corrupted stream
    h_trp = model.fuse(model.encode_text_ids(batch.trp_ids, batch.trp_mask), image, batch.trp_mask)
    trp = trp_loss(model.trp_logits(h_trp[batch.trp_rows]), batch.trp_labels)

    report = total_loss(fsis, ptp, trp, its, itm)
    total = sum_parts([fsis, ptp, trp, its, itm])

    model.zero_grad()
    total.backward()
    optimizer.step()
    model.clamp_tau()
    momentum_update(pair)
    queue.enqueue(m_text_feats, m_img_feats)
    return report


# -- full loop -------------------------------------------------------------


class Pretrainer:
    """Owns the model pair, queue, optimizer and the deterministic data order."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        records: list[FashionRecord],
        images_dir,
        vocab: Vocabulary | None = None,
        lex: LexicalResource | None = None,
        extra_vocab_texts=(),
        trainable_splits=("train",),
    ):
        if not records:
            raise InvalidInputError("corpus is empty")
        self.tc = train_cfg.validate()
        self.train_records = [r for r in records if r.split in trainable_splits] or list(records)
        self.vocab = vocab or corpus_vocabulary(records, extra_vocab_texts)
        self.cfg = dataclasses.replace(model_cfg, vocab_size=len(self.vocab)).validate()
        self.lex = lex or LexicalResource()
        self.images_dir = Path(images_dir)
        self.model = FashionSAPModel(self.cfg, seed=train_cfg.seed)
        self.momentum_model = FashionSAPModel(self.cfg, seed=train_cfg.seed)
        self.pair = make_momentum_pair(self.model, self.momentum_model, self.cfg.momentum)
        self.queue = FeatureQueue(self.cfg.queue_size, self.cfg.d)
        self.optimizer = AdamW(self.pair.online, lr=self.tc.lr, weight_decay=self.tc.weight_decay)
        self.step = 0
        self._image_cache: dict[str, np.ndarray] = {}

    # data order ----------------------------------------------------------

    def _load_record_image(self, rec: FashionRecord) -> np.ndarray:
        if rec.item_id not in self._image_cache:
            self._image_cache[rec.item_id] = load_image(
                self.images_dir / rec.image_ref, self.cfg.image_size
            )
        return self._image_cache[rec.item_id]

    def records_for_step(self, step: int) -> list[FashionRecord]:
        n = len(self.train_records)
        bsz = self.tc.batch_size
        steps_per_epoch = max(1, n // bsz)
        epoch = step // steps_per_epoch
        within = step % steps_per_epoch
        perm = np.random.default_rng(
            np.random.SeedSequence([self.tc.seed, 104729, epoch])
        ).permutation(n)
        idx = [int(perm[(within * bsz + j) % n]) for j in range(bsz)]
        return [self.train_records[i] for i in idx]

    # stepping -------------------------------------------------------------

    def effective_alpha(self, step: int) -> float:
        if self.tc.distill_warmup <= 0:
            return self.cfg.distill_weight
        return self.cfg.distill_weight * min(1.0, step / self.tc.distill_warmup)

    def step_once(self) -> LossReport:
        rng = step_rng(self.tc.seed, self.step)
        batch = build_batch(
            self.records_for_step(self.step),
            self.vocab,
            self.lex,
            rng,
            self.cfg,
            self._load_record_image,
            prompts_per_record=self.tc.prompts_per_record,
        )
        report = pretrain_step(
            self.model, self.momentum_model, self.pair, self.queue, batch,
            self.optimizer, self.tc, rng, alpha=self.effective_alpha(self.step),
        )
        self.step += 1
        return report

    # persistence -----------------------------------------------------------

    def _extra_state(self) -> dict[str, np.ndarray]:
        extra = {f"momentum.{n}": p.data for n, p in self.pair.momentum.items()}
        extra.update(self.optimizer.state_arrays())
        extra["queue.text"] = self.queue.text
        extra["queue.image"] = self.queue.image
        extra["meta.step"] = np.asarray([self.step], dtype=np.float32)
        extra["meta.adamw_t"] = np.asarray([self.optimizer.t], dtype=np.float32)
        extra["meta.queue_cursor"] = np.asarray([self.queue.cursor], dtype=np.float32)
        extra["meta.queue_occupancy"] = np.asarray([self.queue.occupancy], dtype=np.float32)
        return extra

    def save(self, path) -> None:
        self.model.save(path, extra=self._extra_state())

    def resume(self, path) -> None:
        extra = self.model.load(path)
        self.pair.momentum.load_values(
            {n[len("momentum."):]: a for n, a in extra.items() if n.startswith("momentum.")}
        )
        self.step = int(extra["meta.step"][0])
        self.optimizer.load_state_arrays(extra, t=int(extra["meta.adamw_t"][0]))
        self.queue.text = extra["queue.text"].astype(self.queue.text.dtype)
        self.queue.image = extra["queue.image"].astype(self.queue.image.dtype)
        self.queue.cursor = int(extra["meta.queue_cursor"][0])
        self.queue.occupancy = int(extra["meta.queue_occupancy"][0])

    def run(self, out_dir, log_every: int = 50) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.vocab.save(out / "vocab.txt")
        log_path = out / "loss_log.jsonl"
        with open(log_path, "a", encoding="utf-8") as fh:
            while self.step < self.tc.steps:
                step = self.step
                report = self.step_once()
                fh.write(report.to_json_line(step) + "\n")
                if log_every and step % log_every == 0:
                    log.info("step %d total %.4f", step, report.total)
                if self.tc.checkpoint_every and (step + 1) % self.tc.checkpoint_every == 0:
                    self.save(out / f"ckpt_step{step + 1:06d}.fsap")
        final = out / "ckpt_final.fsap"
        self.save(final)
        return final


def pretrain(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus_path,
    images_dir=None,
    out_dir="pretrain_out",
    resume_from=None,
    extra_vocab_texts=(),
) -> Path:
    """Load the corpus, run the loop, return the final checkpoint path."""
    corpus_path = Path(corpus_path)
    records = load_corpus(corpus_path, images_dir=images_dir)
    if not records:
        raise InvalidInputError(f"{corpus_path}: corpus is empty")
    trainer = Pretrainer(
        model_cfg,
        train_cfg,
        records,
        images_dir if images_dir is not None else corpus_path.parent,
        extra_vocab_texts=extra_vocab_texts,
    )
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.run(out_dir)
