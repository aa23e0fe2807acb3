"""Text-modified image retrieval: a modification sentence plus a candidate
image queries for the target image.

The query feature is the projected first row of the hybrid feature obtained
by fusing the modification text with the candidate image; targets are the
projected global image features. Scores are cosines, training is an in-batch
softmax contrast over the batch targets.
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
from ..model.config import TrainConfig
from ..model.network import FashionSAPModel
from ..textpipe import Vocabulary, build_caption_sequence

log = logging.getLogger("fashionsap.downstream.tmir")


@dataclass
class TmirTriple:
    candidate: str
    text: str
    target: str
    split: str = "train"


def load_triples(path) -> list[TmirTriple]:
    """Load the sidecar JSONL; triples whose candidate equals the target are rejected."""
    out: list[TmirTriple] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["candidate"] == obj["target"]:
                log.warning("line %d: candidate equals target, triple rejected", line_no)
                continue
            out.append(
                TmirTriple(obj["candidate"], obj["text"], obj["target"], obj.get("split", "train"))
            )
    return out


class TmirTask:
    """Shared encoding helpers bound to one model + corpus."""

    def __init__(self, model: FashionSAPModel, records: list[FashionRecord], images_dir, vocab: Vocabulary):
        self.model = model
        self.vocab = vocab
        self.images_dir = Path(images_dir)
        self.by_id = {r.item_id: r for r in records}
        self._cache: dict[str, np.ndarray] = {}

    def image(self, item_id: str) -> np.ndarray:
        if item_id not in self._cache:
            rec = self.by_id[item_id]
            self._cache[item_id] = load_image(self.images_dir / rec.image_ref, self.model.cfg.image_size)
        return self._cache[item_id]

    def query_features(self, triples: list[TmirTriple]) -> ag.Tensor:
        """Fused (text, candidate image) features projected to the query space."""
        seqs = [build_caption_sequence(t.text, self.vocab, self.model.cfg.max_text_len) for t in triples]
        ids = np.stack([s.ids for s in seqs])
        mask = np.stack([s.attention_mask for s in seqs])
        imgs = np.stack([self.image(t.candidate) for t in triples])
        text = self.model.encode_text_ids(ids, mask)
        image = self.model.encode_image(imgs)
        h = self.model.fuse(text, image, mask)
        return ag.l2_normalize(self.model.tmir_proj(h[:, 0]))

    def target_features(self, item_ids: list[str]) -> ag.Tensor:
        imgs = np.stack([self.image(i) for i in item_ids])
        image = self.model.encode_image(imgs)
        return self.model.proj_its(image[:, 0], "image_side")


def tmir_score(task: TmirTask, triple: TmirTriple) -> float:
    """Cosine between the fused query and the target's projected image feature."""
    with ag.no_grad():
        q = task.query_features([triple]).data[0]
        t = task.target_features([triple.target]).data[0]
    return float(q @ t)


def tmir_retrieve(query_feat: np.ndarray, gallery_feats: np.ndarray, gallery_ids: list[str]) -> list[str]:
    """Gallery ids by descending score; ties break to the lower id."""
    if len(gallery_ids) == 0:
        raise InvalidInputError("empty gallery")
    scores = gallery_feats @ np.asarray(query_feat)
    order = sorted(range(len(gallery_ids)), key=lambda i: (-scores[i], gallery_ids[i]))
    return [gallery_ids[i] for i in order]


def evaluate_tmir(
    task: TmirTask,
    triples: list[TmirTriple],
    gallery_ids: list[str],
    ks=(1, 5, 10, 50),
    batch: int = 16,
) -> dict:
    """R@K of the target within the given gallery."""
    from .retrieval import recall_from_sims

    gallery_index = {g: i for i, g in enumerate(gallery_ids)}
    usable = [t for t in triples if t.target in gallery_index]
    if not usable:
        raise InvalidInputError("no triple has its target in the gallery")
    with ag.no_grad():
        gal = task.target_features(gallery_ids).data
        sims, positives = [], []
        for lo in range(0, len(usable), batch):
            chunk = usable[lo : lo + batch]
            q = task.query_features(chunk).data
            sims.append(q @ gal.T)
            positives.extend(gallery_index[t.target] for t in chunk)
    rec = recall_from_sims(np.concatenate(sims, axis=0), np.asarray(positives), ks)
    return {f"R@{k}": v for k, v in rec.items()}


def finetune_tmir(
    model: FashionSAPModel,
    train_cfg: TrainConfig,
    records: list[FashionRecord],
    triples: list[TmirTriple],
    images_dir,
    vocab: Vocabulary,
    out_dir,
    trainable_splits=("train",),
) -> Path:
    """In-batch contrastive fine-tuning of query against target features."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = train_cfg.validate()
    task = TmirTask(model, records, images_dir, vocab)
    train = [t for t in triples if t.split in trainable_splits] or list(triples)
    if not train:
        raise InvalidInputError("no training triples")
    optimizer = AdamW(model.param_store(), lr=tc.lr, weight_decay=tc.weight_decay)
    n = len(train)
    with open(out / "loss_log.jsonl", "a", encoding="utf-8") as fh:
        for step in range(tc.steps):
            bsz = min(tc.batch_size, n)
            steps_per_epoch = max(1, n // bsz)
            perm = np.random.default_rng(
                np.random.SeedSequence([tc.seed, 5417, step // steps_per_epoch])
            ).permutation(n)
            idx = [int(perm[((step % steps_per_epoch) * bsz + j) % n]) for j in range(bsz)]
            chunk = [train[i] for i in idx]
            q = task.query_features(chunk)
            t = task.target_features([tr.target for tr in chunk])
            logits = ag.div(ag.matmul(q, ag.swap_last(t)), model.tau)
            loss = ag.cross_entropy(logits, np.arange(len(chunk)))
            model.zero_grad()
            loss.backward()
            optimizer.step()
            model.clamp_tau()
            fh.write(json.dumps({"step": step, "tmir": float(loss.data), "total": float(loss.data)}) + "\n")
    final = out / "ckpt_tmir.fsap"
    model.save(final)
    return final
