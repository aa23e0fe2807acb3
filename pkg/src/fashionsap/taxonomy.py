"""The nine-symbol fashion concept layer.

Fine-grained dataset categories (jeans, parka, toptee, ...) are grouped into
nine abstract symbols by body part or function. The mapping ships as two
versioned JSON seed lists: the core garment-term table and an extensions list
(singular/plural variants and extra category names grouped by the same
body-part/function rules). Lookup is total: anything unknown resolves to
OTHERS with a logged warning.
"""

from __future__ import annotations

import json
import logging
from enum import IntEnum
from importlib import resources
from pathlib import Path

from .errors import InvalidInputError

log = logging.getLogger("fashionsap.taxonomy")

_SEED_FILES = ("categories_table1.json", "categories_extensions.json")


class FashionSymbol(IntEnum):
    TOPS = 0
    DRESSES = 1
    SKIRTS = 2
    COATS = 3
    PANTS = 4
    SHOES = 5
    BAGS = 6
    ACCESSORIES = 7
    OTHERS = 8


SYMBOL_TOKENS = tuple(f"[{s.name}]" for s in FashionSymbol)
_TOKEN_TO_SYMBOL = {t: FashionSymbol(i) for i, t in enumerate(SYMBOL_TOKENS)}


def symbol_token(symbol: FashionSymbol | int) -> str:
    """Bracketed special-token string for a symbol, e.g. TOPS -> "[TOPS]"."""
    return f"[{FashionSymbol(symbol).name}]"


def symbol_from_token(token: str) -> FashionSymbol:
    try:
        return _TOKEN_TO_SYMBOL[token]
    except KeyError:
        raise InvalidInputError(f"not a fashion symbol token: {token!r}") from None


def normalize_category(category: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return " ".join(str(category).lower().split())


class CategoryTable:
    """Immutable category -> symbol mapping with per-entry provenance."""

    def __init__(self, entries: dict[str, FashionSymbol], provenance: dict[str, str]):
        self.entries = dict(entries)
        self.provenance = dict(provenance)

    @classmethod
    def from_files(cls, paths) -> "CategoryTable":
        entries: dict[str, FashionSymbol] = {}
        provenance: dict[str, str] = {}
        for path in paths:
            # accepts real paths and importlib.resources traversables
            raw = json.loads(path.read_text(encoding="utf-8") if hasattr(path, "read_text")
                             else Path(path).read_text(encoding="utf-8"))
            if "entries" not in raw or "version" not in raw:
                raise InvalidInputError(f"{path}: seed table needs 'version' and 'entries'")
            source = Path(str(getattr(path, "name", path))).stem
            for cat, sym_name in raw["entries"].items():
                key = normalize_category(cat)
                entries[key] = FashionSymbol[sym_name]
                provenance[key] = source
        return cls(entries, provenance)

    @classmethod
    def default(cls) -> "CategoryTable":
        pkg = resources.files("fashionsap") / "data"
        return cls.from_files([pkg / name for name in _SEED_FILES])

    def __len__(self) -> int:
        return len(self.entries)


_default_table: CategoryTable | None = None


def default_table() -> CategoryTable:
    global _default_table
    if _default_table is None:
        _default_table = CategoryTable.default()
    return _default_table


def map_category(category: str, table: CategoryTable | None = None) -> FashionSymbol:
    """Resolve a raw category string to its symbol.

    Unknown categories fall back to OTHERS (after retrying with a trailing
    plural "s" stripped) so that lookup is total across corpora.
    """
    table = table or default_table()
    key = normalize_category(category)
    if not key:
        raise InvalidInputError("category is empty after normalization")
    hit = table.entries.get(key)
    if hit is not None:
        return hit
    if key.endswith("s"):
        hit = table.entries.get(key[:-1])
        if hit is not None:
            return hit
    log.warning("unknown category %r mapped to OTHERS", category)
    return FashionSymbol.OTHERS
