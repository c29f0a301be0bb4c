"""Seeded synthetic lexicon, corpus and word vectors for desk-scale runs.

Concepts come in confusable pairs that share a content word and a head
noun and differ only in a modifier (``renal X syndrome`` vs ``hepatic X
syndrome``).  Every modifier has a synonym with an unrelated random vector
(``renal``/``kidney``), and held-out mentions use the synonym, so token
overlap ties the two concepts of a pair.  The encoder has to pick up the
modifier synonymy from training mentions of other concepts.

Per concept with modifier ``m`` (synonym ``m'``), content word ``c`` and
head ``H``:

* lexicon synonyms: ``m c H``, ``c m H``, ``H of m c``, ``H of c m``
* training mentions: ``H of m' c``, ``c m' H``, ``m' c``
* held-out mention: ``m' c H``
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .corpus import Corpus, Document, Mention, dump_pubtator
from .embed import EmbeddingTable, Tables, write_word_vectors
from .lexicon import ConceptEntry, Lexicon, dump_medic

HEADS = ("syndrome", "disease", "disorder", "dysplasia", "neuropathy")
# few pairs, so each synonym pair recurs across many concepts
MODIFIERS = (
    ("renal", "kidney"),
    ("hepatic", "liver"),
    ("cardiac", "heart"),
    ("inherited", "hereditary"),
)
_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class Fixture:
    lexicon: Lexicon
    train: Corpus
    test: Corpus
    tables: Tables


def _word(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        syll = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syll))
        if w not in used and w not in HEADS and w != "of":
            used.add(w)
            return w


def _document(pmid: str, mentions: list[tuple[str, str, str]]) -> Document:
    """Lay mention strings out in a title + abstract, recording offsets."""
    title = "Clinical findings in a case series"
    parts = []
    spans = []
    pos = len(title) + 1
    for text, tag, cid in mentions:
        lead = "Patients presented with "
        pos += len(lead)
        spans.append(Mention(pos, pos + len(text), text, tag, (cid,), cid))
        parts.append(lead + text + ".")
        pos += len(text) + 2
    abstract = " ".join(parts)
    doc = Document(pmid, title, abstract, tuple(spans))
    for m in doc.mentions:
        assert doc.text[m.start : m.end] == m.text
    return doc


def make_fixture(
    n_concepts: int = 50,
    dim: int = 50,
    seed: int = 0,
    mentions_per_doc: int = 3,
    abbreviations: bool = False,
) -> Fixture:
    """Build the synthetic lexicon, train/test corpora and random word vectors."""
    if n_concepts % 2:
        raise ValueError("n_concepts must be even (concepts come in pairs)")
    rng = np.random.default_rng(seed)
    used: set[str] = {w for pair in MODIFIERS for w in pair}
    content = [_word(rng, used) for _ in range(n_concepts // 2)]

    entries = []
    train_mentions = []
    test_mentions = []
    for c in range(n_concepts):
        word = content[c // 2]
        head = HEADS[(c // 2) % len(HEADS)]
        pick = rng.choice(len(MODIFIERS), size=2, replace=False) if c % 2 == 0 else pick
        mod, alt = MODIFIERS[pick[c % 2]]
        cid = f"MESH:D{100000 + c:06d}"
        names = [f"{mod} {word} {head}", f"{word} {mod} {head}", f"{head} of {mod} {word}", f"{head} of {word} {mod}"]
        entries.append(ConceptEntry(cid, names[0], tuple(names)))
        raw_id = cid.split(":", 1)[1]
        for text in (f"{head} of {alt} {word}", f"{word} {alt} {head}", f"{alt} {word}"):
            train_mentions.append((text, "SpecificDisease", raw_id))
        test_mentions.append((f"{alt} {word} {head}", "SpecificDisease", raw_id))
        if abbreviations:
            abbr = (alt[0] + word[0] + head[0]).upper()
            test_mentions.append((abbr, "SpecificDisease", raw_id))

    def docs(items, prefix, shuffle):
        items = list(items)
        if shuffle:
            items = [items[i] for i in rng.permutation(len(items))]
        out = []
        step = mentions_per_doc
        for i in range(0, len(items), step):
            out.append(_document(f"{prefix}{i // step:05d}", items[i : i + step]))
        return out

    train_docs = docs(train_mentions, "9", shuffle=True)
    if abbreviations:
        # keep each abbreviation right after its long form
        pairs = [test_mentions[i : i + 2] for i in range(0, len(test_mentions), 2)]
        test_docs = [_document(f"8{i:05d}", p) for i, p in enumerate(pairs)]
    else:
        test_docs = docs(test_mentions, "8", shuffle=False)

    vocab = sorted(set(content) | {w for pair in MODIFIERS for w in pair} | set(HEADS) | {"of"})
    vectors = {w: rng.normal(size=dim).astype(np.float32) for w in vocab}
    table = EmbeddingTable(dim, vectors)
    return Fixture(Lexicon.from_entries(entries), Corpus(train_docs, "train"), Corpus(test_docs, "test"), Tables(table))


def write_fixture(fx: Fixture, directory: str | Path) -> dict[str, Path]:
    """Write the fixture as MEDIC TSV, PubTator files and a text vector table."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "lexicon": d / "lexicon.tsv",
        "train": d / "train.txt",
        "test": d / "test.txt",
        "vectors": d / "vectors.txt",
    }
    with open(paths["lexicon"], "w", encoding="utf-8", newline="") as f:
        dump_medic(fx.lexicon, f)
    for split in ("train", "test"):
        with open(paths[split], "w", encoding="utf-8", newline="") as f:
            dump_pubtator(getattr(fx, split), f)
    with open(paths["vectors"], "w", encoding="utf-8", newline="") as f:
        write_word_vectors(fx.tables.word, f)
    return paths
