from .classify import (
    ClassifierHeads,
    accuracy,
    classify_cr_scr,
    evaluate_classifier,
    finetune_classify,
    macro_f1,
    metrics,
)
from .gradcam import AttentionMap, grad_cam, grad_cam_for_word, save_pgm
from .retrieval import (
    RetrievalIndex,
    encode_corpus,
    finetune_retrieval,
    full_protocol_eval,
    rank,
    recall_from_sims,
    subset_protocol_eval,
)
from .tmir import TmirTask, TmirTriple, evaluate_tmir, finetune_tmir, load_triples, tmir_retrieve, tmir_score

__all__ = [
    "AttentionMap",
    "ClassifierHeads",
    "RetrievalIndex",
    "TmirTask",
    "TmirTriple",
    "accuracy",
    "classify_cr_scr",
    "encode_corpus",
    "evaluate_classifier",
    "evaluate_tmir",
    "finetune_classify",
    "finetune_retrieval",
    "finetune_tmir",
    "full_protocol_eval",
    "grad_cam",
    "grad_cam_for_word",
    "load_triples",
    "macro_f1",
    "metrics",
    "rank",
    "recall_from_sims",
    "save_pgm",
    "subset_protocol_eval",
    "tmir_retrieve",
    "tmir_score",
]
