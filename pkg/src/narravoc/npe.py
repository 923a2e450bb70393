"""Narration Pair Encoding: compress a narration corpus into base prefixes
plus a shared postfix set.

A narration is a short phrase like "cut a potato with a knife".  Many
narrations extend a shorter one by a few trailing words; NPE keeps the
shortest ("base") narrations as the prefix vocabulary and collects the
word-level tails into one global, deduplicated postfix vocabulary.  Every
operation here is a pure function; all outputs are deterministic in input
order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

EMPTY_POSTFIX = ""

DEFAULT_STRIP_PATTERNS = (r"^#C C\b", r"^#O\b", r"^#C\b", r"^#unsure\b")


@dataclass(frozen=True)
class Narration:
    text: str
    source_id: str | None = None
    scene: str | None = None

    def words(self) -> list[str]:
        return self.text.split(" ")


@dataclass
class NpeReport:
    input_count: int = 0
    dropped_empty: int = 0
    dedup_count: int = 0
    prefix_count: int = 0
    postfix_count: int = 0
    extension_count: int = 0

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "dropped_empty": self.dropped_empty,
            "dedup_count": self.dedup_count,
            "prefix_count": self.prefix_count,
            "postfix_count": self.postfix_count,
            "extension_count": self.extension_count,
        }


@dataclass
class NpeResult:
    """Output of `encode`.

    prefixes: base narration texts in first-seen order.
    postfixes: EMPTY_POSTFIX at index 0, then deduplicated suffixes in
        collection order.
    decomposition: extension text -> (base prefix text, suffix text), with
        ``base + " " + suffix == extension``.
    """

    prefixes: list[str]
    postfixes: list[str]
    decomposition: dict[str, tuple[str, str]]
    report: NpeReport = field(default_factory=NpeReport)


def normalize_text(raw: str, strip_patterns: tuple[str, ...] = DEFAULT_STRIP_PATTERNS) -> str:
    """Lowercase, strip corpus tags, and collapse whitespace."""
    text = raw.strip()
    for pat in strip_patterns:
        text = re.sub(pat, "", text, flags=re.IGNORECASE)
    text = text.lower()
    text = re.sub(r"\s+", " ", text).strip()
    return text


def normalize_corpus(
    raw: list[str],
    strip_patterns: tuple[str, ...] = DEFAULT_STRIP_PATTERNS,
    report: NpeReport | None = None,
) -> list[Narration]:
    """Normalize raw strings and drop exact duplicates, keeping first-seen order.

    Empty-after-normalization strings are dropped and counted in the report.
    """
    if report is None:
        report = NpeReport()
    report.input_count = len(raw)
    seen: set[str] = set()
    out: list[Narration] = []
    for item in raw:
        text = normalize_text(item, strip_patterns)
        if not text:
            report.dropped_empty += 1
            continue
        if text in seen:
            continue
        seen.add(text)
        out.append(Narration(text=text))
    report.dedup_count = len(out)
    return out


def build_prefix_dict(narrations: list[Narration]) -> dict[str, list[int]]:
    """Map every word-prefix of every narration to the ids sharing it.

    Keys are space-joined word prefixes; values are narration indices in
    ascending order.  Expects a normalized, deduplicated corpus.
    """
    d: dict[str, list[int]] = {}
    for nid, narration in enumerate(narrations):
        words = narration.words()
        for i in range(1, len(words) + 1):
            d.setdefault(" ".join(words[:i]), []).append(nid)
    return d


def encode(narrations: list[Narration], report: NpeReport | None = None) -> NpeResult:
    """Split a corpus into base prefixes and a shared postfix vocabulary.

    A narration is a base prefix iff no strictly shorter narration is a
    word-prefix of it.  For every narration n that is a word-prefix of
    others, the tails of those extensions are collected into the global
    postfix set (deduplicated, EMPTY first).  Extensions map to their base
    prefix through ``decomposition``.
    """
    if report is None:
        report = NpeReport()
    d = build_prefix_dict(narrations)
    texts = [n.text for n in narrations]
    text_to_id = {t: i for i, t in enumerate(texts)}

    prefixes: list[str] = []
    is_base: list[bool] = []
    for narration in narrations:
        words = narration.words()
        base = True
        for i in range(1, len(words)):
            if " ".join(words[:i]) in text_to_id:
                base = False
                break
        is_base.append(base)
        if base:
            prefixes.append(narration.text)

    postfixes: list[str] = [EMPTY_POSTFIX]
    seen_suffix = {EMPTY_POSTFIX}
    for nid, narration in enumerate(narrations):
        sharing = d[narration.text]
        if len(sharing) <= 1:
            continue
        n_words = len(narration.words())
        for sid in sharing:
            if sid == nid:
                continue
            suffix = " ".join(texts[sid].split(" ")[n_words:])
            if suffix not in seen_suffix:
                seen_suffix.add(suffix)
                postfixes.append(suffix)

    base_texts = set(prefixes)
    decomposition: dict[str, tuple[str, str]] = {}
    for nid, narration in enumerate(narrations):
        if is_base[nid]:
            continue
        words = narration.words()
        # The base set is prefix-free, so at most one base can be a
        # word-prefix; take the longest matching one.
        for i in range(len(words) - 1, 0, -1):
            cand = " ".join(words[:i])
            if cand in base_texts:
                decomposition[narration.text] = (cand, " ".join(words[i:]))
                break

    report.prefix_count = len(prefixes)
    report.postfix_count = len(postfixes)
    report.extension_count = len(decomposition)
    return NpeResult(prefixes=prefixes, postfixes=postfixes, decomposition=decomposition, report=report)


def encode_corpus(raw: list[str], strip_patterns: tuple[str, ...] = DEFAULT_STRIP_PATTERNS) -> NpeResult:
    """Normalize + encode in one step, sharing one report."""
    report = NpeReport()
    narrations = normalize_corpus(raw, strip_patterns, report=report)
    return encode(narrations, report=report)
