"""MEDIC-style disease lexicon: loading, indexing and synonym lookup.

The MEDIC TSV has eight tab-separated columns::

    DiseaseName  DiseaseID  AltDiseaseIDs  Definition  ParentIDs
    TreeNumbers  ParentTreeNumbers  Synonyms

Synonyms are pipe-delimited.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

from ._io import PathLike, open_text

MEDIC_COLUMNS = (
    "DiseaseName",
    "DiseaseID",
    "AltDiseaseIDs",
    "Definition",
    "ParentIDs",
    "TreeNumbers",
    "ParentTreeNumbers",
    "Synonyms",
)


class LexiconError(ValueError):
    """Raised for malformed lexicon input."""


class ConceptNotFound(KeyError):
    """Raised when a concept id is not in the lexicon."""


@dataclass(frozen=True)
class ConceptEntry:
    id: str
    preferred_name: str
    synonyms: tuple[str, ...]

    def __post_init__(self):
        if not self.id:
            raise LexiconError("concept id must be non-empty")
        if not self.synonyms or self.synonyms[0] != self.preferred_name:
            raise LexiconError(f"{self.id}: synonyms must start with the preferred name")
        if any(not s.strip() for s in self.synonyms):
            raise LexiconError(f"{self.id}: empty synonym")


def dedupe_synonyms(names: Iterable[str]) -> tuple[str, ...]:
    """Drop blank and case-insensitive duplicate names, keeping first-seen casing."""
    seen = set()
    out = []
    for name in names:
        name = name.strip()
        if not name:
            continue
        key = name.casefold()
        if key in seen:
            continue
        seen.add(key)
        out.append(name)
    return tuple(out)


@dataclass(frozen=True)
class Lexicon:
    """Immutable id -> entry map with a flat (synonym, id) scan index.

    Entries iterate in ascending id order regardless of input order.
    """

    entries: dict[str, ConceptEntry] = field(default_factory=dict)
    synonym_index: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_entries(cls, entries: Iterable[ConceptEntry]) -> "Lexicon":
        by_id: dict[str, ConceptEntry] = {}
        for entry in entries:
            if entry.id in by_id:
                raise LexiconError(f"duplicate concept id {entry.id!r}")
            by_id[entry.id] = entry
        ordered = {cid: by_id[cid] for cid in sorted(by_id)}
        index = tuple((syn, cid) for cid, e in ordered.items() for syn in e.synonyms)
        return cls(ordered, index)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ConceptEntry]:
        return iter(self.entries.values())

    def __contains__(self, cid: object) -> bool:
        return cid in self.entries

    def __getitem__(self, cid: str) -> ConceptEntry:
        try:
            return self.entries[cid]
        except KeyError:
            raise ConceptNotFound(cid) from None

    def ids(self) -> list[str]:
        return list(self.entries)


def synonyms_of(lex: Lexicon, cid: str) -> list[str]:
    """Return the synonym list of ``cid``; raises :class:`ConceptNotFound` if absent."""
    return list(lex[cid].synonyms)


def parse_medic(lines: Iterable[str]) -> Lexicon:
    entries = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        row = line.split("\t")
        if len(row) < len(MEDIC_COLUMNS):
            raise LexiconError(
                f"line {lineno}: expected {len(MEDIC_COLUMNS)} tab-separated columns, got {len(row)}"
            )
        name, cid = row[0].strip(), row[1].strip()
        if cid in seen:
            raise LexiconError(f"line {lineno}: duplicate DiseaseID {cid!r} (first on line {seen[cid]})")
        seen[cid] = lineno
        synonyms = dedupe_synonyms([name, *row[7].split("|")])
        if not synonyms or synonyms[0] != name:
            raise LexiconError(f"line {lineno}: empty DiseaseName")
        entries.append(ConceptEntry(cid, name, synonyms))
    return Lexicon.from_entries(entries)


def load_medic(source: TextIO | PathLike) -> Lexicon:
    """Load a MEDIC TSV from an open text stream or a (possibly gzipped) path."""
    if hasattr(source, "read"):
        return parse_medic(source)
    with open_text(source) as f:
        return parse_medic(f)


def dump_medic(lex: Lexicon, out: TextIO) -> None:
    """Write ``lex`` back out as MEDIC TSV; columns the loader ignores are left empty."""
    out.write("# " + "\t".join(MEDIC_COLUMNS) + "\n")
    for entry in lex:
        row = [entry.preferred_name, entry.id, "", "", "", "", "", "|".join(entry.synonyms[1:])]
        out.write("\t".join(row) + "\n")
