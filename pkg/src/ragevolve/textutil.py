"""Shared lexical helpers: tokenization and token-set similarity."""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics, dropping empty tokens."""
    return _TOKEN_RE.findall(text.lower())


def token_jaccard(a: str, b: str) -> float:
    """Jaccard similarity of the token sets of two strings (1.0 for two empties)."""
    sa, sb = set(tokenize(a)), set(tokenize(b))
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)
