"""Text pipeline: tokenization, attribute prompts, and stochastic inputs.

Covers the word-level tokenizer and vocabulary, the two attribute prompt
templates, and the three seeded input constructions used during
pre-training: prompt blanking, masking, and token-replace corruption.
All randomized operations are pure functions of (input, generator state).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .taxonomy import SYMBOL_TOKENS, FashionSymbol

log = logging.getLogger("fashionsap.textpipe")

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
BLANK_ID = 3
SYMBOL_ID_BASE = 4
UNK_ID = 13
NUM_RESERVED = 14

RESERVED_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[BLANK]", *SYMBOL_TOKENS, "[UNK]")

_WORD_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def tokenize_words(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Frozen token <-> id bijection with a fixed reserved prefix.

    Ids 0..13 are reserved ([PAD], [CLS], [MASK], [BLANK], the nine symbol
    tokens, [UNK]); corpus words follow in sorted order.
    """

    def __init__(self, regular_tokens: list[str]):
        self._id_to_token = list(RESERVED_TOKENS) + list(regular_tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise InvalidInputError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(tokenize_words(text))
        return cls(sorted(seen - set(RESERVED_TOKENS)))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:NUM_RESERVED] != list(RESERVED_TOKENS):
            raise InvalidInputError(f"{path}: reserved token prefix is wrong")
        return cls(lines[NUM_RESERVED:])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._id_to_token) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token(self, token_id: int) -> str:
        return self._id_to_token[int(token_id)]

    def symbol_id(self, symbol: FashionSymbol) -> int:
        return SYMBOL_ID_BASE + int(symbol)

    def symbol_from_id(self, token_id: int) -> FashionSymbol:
        if not SYMBOL_ID_BASE <= int(token_id) < SYMBOL_ID_BASE + 9:
            raise InvalidInputError(f"id {token_id} is not a symbol token")
        return FashionSymbol(int(token_id) - SYMBOL_ID_BASE)

    def encode_words(self, words) -> list[int]:
        return [self.token_id(w) for w in words]

    @property
    def regular_ids(self) -> range:
        return range(NUM_RESERVED, len(self._id_to_token))


@dataclass
class TokenSequence:
    """Right-padded id sequence; the mask is a prefix of ones."""

    ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        if self.ids.shape != self.attention_mask.shape:
            raise InvalidInputError("ids and attention_mask lengths differ")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_real(self) -> int:
        return int(self.attention_mask.sum())

    def copy(self) -> "TokenSequence":
        return TokenSequence(self.ids.copy(), self.attention_mask.copy())


def _pad_to(ids: list[int], max_len: int) -> TokenSequence:
    ids = ids[:max_len]
    n = len(ids)
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return TokenSequence(out, mask)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Tokenize raw text to a padded TokenSequence (no [CLS]/symbol added)."""
    if max_len < 2:
        raise InvalidConfigError(f"max_len must be >= 2, got {max_len}")
    return _pad_to(vocab.encode_words(tokenize_words(text)), max_len)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.token(i) for i, m in zip(seq.ids, seq.attention_mask) if m == 1]


# -- attribute prompts ------------------------------------------------------


@dataclass(frozen=True)
class EnumAttribute:
    name: str
    value: str


@dataclass(frozen=True)
class BinaryAttribute:
    label: str
    present: bool


def render_enum_prompt(attr: EnumAttribute) -> str:
    """Name/value attribute sentence: "the image attribute {name} is {value}"."""
    if not attr.name or not attr.name.strip() or not attr.value or not attr.value.strip():
        raise InvalidInputError("enum attribute needs a non-empty name and value")
    return f"the image attribute {attr.name} is {attr.value}"


def render_binary_prompt(attr: BinaryAttribute) -> str:
    """Yes/no attribute sentence: "is image attribute {label}? {yes|no}"."""
    if not attr.label or not attr.label.strip():
        raise InvalidInputError("binary attribute needs a non-empty label")
    answer = "yes" if attr.present else "no"
    return f"is image attribute {attr.label}? {answer}"


@dataclass
class PromptPiece:
    """Tokenized prompt with the name/value spans used for blanking.

    Spans are [start, end) offsets relative to the prompt itself; for the
    binary template the label plays the name role and the yes/no answer the
    value role.
    """

    ids: list[int]
    name_span: tuple[int, int]
    value_span: tuple[int, int]


def prompt_piece(attr: EnumAttribute | BinaryAttribute, vocab: Vocabulary) -> PromptPiece:
    if isinstance(attr, EnumAttribute):
        name_words = tokenize_words(attr.name)
        value_words = tokenize_words(attr.value)
        head = vocab.encode_words(["the", "image", "attribute"])
        name_ids = vocab.encode_words(name_words)
        mid = [vocab.token_id("is")]
        value_ids = vocab.encode_words(value_words)
        ids = head + name_ids + mid + value_ids
        ns = (len(head), len(head) + len(name_ids))
        vs = (ns[1] + 1, ns[1] + 1 + len(value_ids))
        # construction must agree with tokenizing the rendered string
        assert ids == vocab.encode_words(tokenize_words(render_enum_prompt(attr)))
        return PromptPiece(ids, ns, vs)
    head = vocab.encode_words(["is", "image", "attribute"])
    label_ids = vocab.encode_words(tokenize_words(attr.label))
    q = [vocab.token_id("?")]
    answer_ids = [vocab.token_id("yes" if attr.present else "no")]
    ids = head + label_ids + q + answer_ids
    ns = (len(head), len(head) + len(label_ids))
    vs = (ns[1] + 1, ns[1] + 2)
    assert ids == vocab.encode_words(tokenize_words(render_binary_prompt(attr)))
    return PromptPiece(ids, ns, vs)


def build_pretrain_sequence(
    caption: str,
    symbol: FashionSymbol,
    prompt: str | None,
    vocab: Vocabulary,
    max_len: int,
) -> TokenSequence:
    """[CLS], [SYMBOL], caption tokens, then optional prompt tokens."""
    if max_len < 2:
        raise InvalidConfigError(f"max_len must be >= 2, got {max_len}")
    ids = [CLS_ID, vocab.symbol_id(symbol)]
    ids += vocab.encode_words(tokenize_words(caption))
    if prompt is not None:
        ids += vocab.encode_words(tokenize_words(prompt))
    return _pad_to(ids, max_len)


def build_caption_sequence(caption: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] + caption, the layout used by the downstream tasks."""
    if max_len < 2:
        raise InvalidConfigError(f"max_len must be >= 2, got {max_len}")
    return _pad_to([CLS_ID] + vocab.encode_words(tokenize_words(caption)), max_len)


# -- lexical resource -------------------------------------------------------


@dataclass
class LexicalResource:
    """Deterministic antonym/synonym lookups (hermetic stand-in for a thesaurus)."""

    antonyms: dict[str, str] = field(default_factory=dict)
    synonyms: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for w, a in self.antonyms.items():
            if w == a:
                raise InvalidInputError(f"word {w!r} listed as its own antonym")

    @classmethod
    def load(cls, path) -> "LexicalResource":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(antonyms=raw.get("antonyms", {}), synonyms=raw.get("synonyms", {}))

    def save(self, path) -> None:
        payload = {"antonyms": self.antonyms, "synonyms": self.synonyms}
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")

    def antonym(self, word: str) -> str | None:
        return self.antonyms.get(word)

    def synonyms_of(self, word: str) -> list[str]:
        return list(self.synonyms.get(word, []))


# -- stochastic constructions ----------------------------------------------


def apply_ptp_blanking(
    ids: np.ndarray,
    name_span: tuple[int, int],
    value_span: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, dict[int, int]]:
    """Blank the value span with probability 0.5, otherwise the name span.

    Spans are [start, end) into `ids`. Returns (new ids, {position: original
    id} for the blanked positions). An empty chosen span is a logged no-op.
    """
    ids = np.asarray(ids, dtype=np.int64)
    pick_value = rng.random() < 0.5
    start, end = value_span if pick_value else name_span
    if end <= start:
        log.warning("empty %s span, skipping blanking", "value" if pick_value else "name")
        return ids.copy(), {}
    out = ids.copy()
    targets = {int(p): int(ids[p]) for p in range(start, end)}
    out[start:end] = BLANK_ID
    return out, targets


def apply_mlm_masking(
    seq: TokenSequence,
    rng: np.random.Generator,
    ratio: float = 0.15,
) -> tuple[np.ndarray, dict[int, int]]:
    """Replace ceil(ratio * n_real) non-special positions with [MASK].

    Reserved tokens ([CLS], symbol tokens, padding, ...) are never masked.
    Returns (masked ids, {position: original id}).
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"mask ratio must be in (0, 1), got {ratio}")
    ids = seq.ids.copy()
    eligible = np.where((seq.attention_mask == 1) & (seq.ids >= NUM_RESERVED))[0]
    if eligible.size == 0:
        return ids, {}
    k = int(np.ceil(ratio * eligible.size))
    chosen = rng.choice(eligible, size=k, replace=False)
    targets = {int(p): int(ids[p]) for p in chosen}
    ids[chosen] = MASK_ID
    return ids, targets


@dataclass
class CorruptionOutcome:
    """Token-replace corruption of a caption + attribute-value stream."""

    ids: np.ndarray
    labels: np.ndarray  # per position: 1 if replaced, 0 if original
    targets: dict[int, int]  # original ids at replaced positions


def _random_replacement(original: int, vocab: Vocabulary, rng: np.random.Generator) -> int:
    """Uniform draw over regular vocab ids excluding `original`."""
    lo, hi = NUM_RESERVED, len(vocab)
    n = hi - lo
    if n < 2:
        raise InvalidInputError("vocabulary too small for replacement sampling")
    if not lo <= original < hi:
        return int(lo + rng.integers(n))
    r = int(lo + rng.integers(n - 1))
    return r if r != original else hi - 1


def apply_trp_corruption(
    caption_ids,
    attr_value_ids,
    lex: LexicalResource,
    vocab: Vocabulary,
    rng: np.random.Generator,
    ratio: float = 0.15,
) -> CorruptionOutcome:
    """Corrupt ceil(ratio * n) positions of the combined stream.

    The chosen positions are split: the first ceil(k/2) (in shuffled order)
    get antonym replacements (falling back to a random non-identical token
    when the lexicon has no usable antonym), the rest get random
    non-identical tokens. Labels mark every replaced position with 1.
    """
    stream = list(caption_ids) + list(attr_value_ids)
    n = len(stream)
    if n == 0:
        raise InvalidInputError("combined caption/value stream is empty")
    ids = np.asarray(stream, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    k = int(np.ceil(ratio * n))
    chosen = rng.choice(n, size=k, replace=False)
    chosen = rng.permutation(chosen)
    n_ant = int(np.ceil(k / 2))
    targets: dict[int, int] = {}
    for j, pos in enumerate(chosen):
        pos = int(pos)
        original = int(ids[pos])
        replacement: int | None = None
        if j < n_ant:
            ant = lex.antonym(vocab.token(original))
            if ant is not None and ant in vocab:
                aid = vocab.token_id(ant)
                if aid != original:
                    replacement = aid
        if replacement is None:
            replacement = _random_replacement(original, vocab, rng)
        targets[pos] = original
        ids[pos] = replacement
        labels[pos] = 1
    return CorruptionOutcome(ids, labels, targets)


def synonym_substitute(text: str, lex: LexicalResource, rng: np.random.Generator) -> str:
    """Replace one randomly chosen word with a synonym when one is known.

    Output is the normalized token stream joined with single spaces; with no
    usable synonym the (normalized) text is returned unchanged.
    """
    words = tokenize_words(text)
    if not words:
        return text
    idx = int(rng.integers(len(words)))
    options = lex.synonyms_of(words[idx])
    if options:
        words[idx] = options[int(rng.integers(len(options)))]
    return " ".join(words)
