"""PubTator corpus parsing and document-level abbreviation expansion.

PubTator blocks look like::

    10021369|t|Title text
    10021369|a|Abstract text
    10021369<TAB>start<TAB>end<TAB>mention<TAB>type<TAB>concept-ids

separated by blank lines.  Offsets index into ``title + " " + abstract``.
An optional seventh mention column carries the abbreviation-expanded
mention text written by ``prepare``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, TextIO

from ._io import PathLike, open_text
from .lexicon import Lexicon

NER_TAGS = ("SpecificDisease", "DiseaseClass", "Modifier", "CompositeMention")
ID_PREFIXES = ("MESH:", "OMIM:")

_ID_SPLIT = re.compile(r"[|+]")
_ABBREVIATION = re.compile(r"[A-Z]{2,}")


class CorpusError(ValueError):
    """Raised for malformed PubTator input."""


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    text: str
    ner_tag: str
    gold_ids: tuple[str, ...]
    concept_field: str = ""
    expanded: Optional[str] = None

    @property
    def linking_text(self) -> str:
        """Text handed to candidate generation and the encoder."""
        return self.expanded if self.expanded is not None else self.text


@dataclass(frozen=True)
class Document:
    pmid: str
    title: str
    abstract: str
    mentions: tuple[Mention, ...] = ()

    @property
    def text(self) -> str:
        return f"{self.title} {self.abstract}"


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)
    split_name: str = ""

    def __post_init__(self):
        pmids = [d.pmid for d in self.documents]
        if len(set(pmids)) != len(pmids):
            dup = sorted({p for p in pmids if pmids.count(p) > 1})
            raise CorpusError(f"duplicate pmids in split {self.split_name!r}: {dup[:5]}")

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __len__(self) -> int:
        return len(self.documents)

    def mentions(self) -> Iterator[tuple[Document, Mention]]:
        for doc in self.documents:
            for m in doc.mentions:
                yield doc, m

    def n_mentions(self) -> int:
        return sum(len(d.mentions) for d in self.documents)

    def unique_concepts(self) -> set[str]:
        return {cid for _, m in self.mentions() for cid in m.gold_ids}


def split_concept_field(raw: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in _ID_SPLIT.split(raw) if p.strip())


def _blocks(lines: Iterable[str]) -> Iterator[tuple[int, list[str]]]:
    block: list[str] = []
    first = 0
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if line.strip():
            if not block:
                first = lineno
            block.append(line)
        elif block:
            yield first, block
            block = []
    if block:
        yield first, block


def _header(line: str, kind: str, lineno: int) -> tuple[str, str]:
    parts = line.split("|", 2)
    if len(parts) != 3 or parts[1] != kind:
        raise CorpusError(f"line {lineno}: expected a '|{kind}|' line, got {line[:60]!r}")
    return parts[0], parts[2]


def _parse_block(first: int, lines: list[str]) -> Document:
    if len(lines) < 2:
        raise CorpusError(f"line {first}: document block lacks a title or abstract line")
    pmid, title = _header(lines[0], "t", first)
    pmid_a, abstract = _header(lines[1], "a", first + 1)
    if pmid_a != pmid:
        raise CorpusError(f"line {first + 1}: abstract pmid {pmid_a} != title pmid {pmid}")
    text = f"{title} {abstract}"
    mentions = []
    for i, line in enumerate(lines[2:], first + 2):
        cols = line.split("\t")
        if len(cols) not in (6, 7) or cols[0] != pmid:
            raise CorpusError(f"line {i}: malformed mention line for pmid {pmid}")
        try:
            start, end = int(cols[1]), int(cols[2])
        except ValueError:
            raise CorpusError(f"line {i}: non-integer offsets") from None
        surface = cols[3]
        if not 0 <= start < end <= len(text):
            raise CorpusError(f"pmid {pmid} offsets {start}-{end}: out of bounds")
        span = text[start:end]
        # The NCBI release blanks out double quotes inside some mention columns.
        if span != surface and span.replace('"', " ") != surface:
            raise CorpusError(f"pmid {pmid} offsets {start}-{end}: text {surface!r} != document span {span!r}")
        gold = split_concept_field(cols[5])
        if not gold:
            raise CorpusError(f"line {i}: empty concept id field")
        mentions.append(
            Mention(start, end, surface, cols[4], gold, cols[5], cols[6] if len(cols) == 7 else None)
        )
    mentions.sort(key=lambda m: m.start)
    return Document(pmid, title, abstract, tuple(mentions))


def parse_pubtator(lines: Iterable[str], split_name: str = "") -> Corpus:
    return Corpus([_parse_block(first, block) for first, block in _blocks(lines)], split_name)


def load_pubtator(source: TextIO | PathLike, split_name: str = "") -> Corpus:
    """Load a PubTator corpus from a text stream or a (possibly gzipped) path."""
    if hasattr(source, "read"):
        return parse_pubtator(source, split_name)
    with open_text(source) as f:
        return parse_pubtator(f, split_name)


def dump_pubtator(corpus: Corpus, out: TextIO) -> None:
    """Serialize ``corpus``; expanded mention texts go to a seventh column."""
    for doc in corpus:
        out.write(f"{doc.pmid}|t|{doc.title}\n{doc.pmid}|a|{doc.abstract}\n")
        for m in doc.mentions:
            concept = m.concept_field or "|".join(m.gold_ids)
            cols = [doc.pmid, str(m.start), str(m.end), m.text, m.ner_tag, concept]
            if m.expanded is not None:
                cols.append(m.expanded)
            out.write("\t".join(cols) + "\n")
        out.write("\n")


def is_abbreviation(text: str) -> bool:
    return _ABBREVIATION.fullmatch(text) is not None


def _replace_token(text: str, abbr: str, long_form: str) -> str:
    pattern = re.compile(r"(?<![A-Za-z0-9])" + re.escape(abbr) + r"(?![A-Za-z0-9])")
    return pattern.sub(lambda _: long_form, text)


def expand_abbreviations(doc: Document) -> Document:
    """Rewrite abbreviation tokens in every mention text with their long form.

    A mention made only of upper-case letters (at least two) is an
    abbreviation; its long form is the text of the mention with the
    greatest start offset strictly before the abbreviation's first
    occurrence.  Rewritten texts land in ``Mention.expanded``; offsets and
    the original ``text`` are untouched, and since expansion always works
    from the original texts, applying it twice changes nothing.
    """
    mentions = sorted(doc.mentions, key=lambda m: m.start)
    long_forms: dict[str, str] = {}
    for i, m in enumerate(mentions):
        if not is_abbreviation(m.text) or m.text in long_forms:
            continue
        before = [p for p in mentions[:i] if p.start < m.start]
        if not before:
            continue
        prev = before[-1]
        if is_abbreviation(prev.text):
            continue
        long_forms[m.text] = prev.text
    if not long_forms:
        return doc

    rewritten = []
    for m in mentions:
        text = m.text
        for abbr in sorted(long_forms):
            text = _replace_token(text, abbr, long_forms[abbr])
        rewritten.append(replace(m, expanded=text if text != m.text else None))
    return replace(doc, mentions=tuple(rewritten))


def expand_corpus(corpus: Corpus) -> Corpus:
    return Corpus([expand_abbreviations(d) for d in corpus], corpus.split_name)


def normalize_gold_id(raw: str, lex: Lexicon) -> Optional[str]:
    """Resolve a corpus concept id to a lexicon id, or ``None`` if unmapped.

    Tries ``raw`` verbatim, then with each namespace prefix.
    """
    raw = raw.strip()
    if raw in lex:
        return raw
    for prefix in ID_PREFIXES:
        if prefix + raw in lex:
            return prefix + raw
    return None


def resolve_gold(mention: Mention, lex: Lexicon) -> tuple[str, ...]:
    """Lexicon ids for all resolvable gold ids of ``mention`` (may be empty)."""
    out = []
    for raw in mention.gold_ids:
        cid = normalize_gold_id(raw, lex)
        if cid is not None and cid not in out:
            out.append(cid)
    return tuple(out)
