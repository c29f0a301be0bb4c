"""Two-step candidate generation over the lexicon's synonym index.

Step 1 keeps up to ``k1`` concepts whose best synonym has phrase-vector
cosine >= ``t1``; step 2 keeps up to ``k2`` concepts whose best synonym has
token Jaccard >= ``t2``.  Concept scores are the max over synonyms and ties
break on concept id.  The result is the step-1 list followed by step-2
concepts not already present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .embed import Tables, embed_phrase, embed_token, tokenize
from .lexicon import Lexicon


class Source(str, Enum):
    COSINE = "Cosine"
    JACCARD = "Jaccard"


@dataclass(frozen=True)
class CandGenParams:
    t1: float = 0.7
    t2: float = 0.1
    k1: int = 3
    k2: int = 7

    def __post_init__(self):
        if not -1.0 <= self.t1 <= 1.0:
            raise ValueError(f"t1 must be in [-1, 1], got {self.t1}")
        if not 0.0 <= self.t2 <= 1.0:
            raise ValueError(f"t2 must be in [0, 1], got {self.t2}")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be positive")


@dataclass(frozen=True)
class Candidate:
    concept_id: str
    synonym: str
    score: float
    source: Source


@dataclass(frozen=True)
class CandidateSet:
    mention_text: str
    candidates: tuple[Candidate, ...] = ()

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def concept_ids(self) -> list[str]:
        return [c.concept_id for c in self.candidates]


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


class CandidateIndex:
    """Precomputed synonym vectors and token sets for one lexicon + table pair.

    Synonyms with the same token multiset share one vector row, so their
    cosine scores are bit-identical.
    """

    def __init__(self, lex: Lexicon, tables: Tables):
        self.lex = lex
        self.tables = tables
        pairs = lex.synonym_index
        self.synonyms = [s for s, _ in pairs]
        concept_ids = lex.ids()
        pos = {cid: i for i, cid in enumerate(concept_ids)}
        self.concept_ids = concept_ids
        self.owner = np.array([pos[cid] for _, cid in pairs], dtype=np.int64)
        token_sets = [frozenset(tokenize(s)) for s in self.synonyms]
        self.set_sizes = np.array([len(ts) for ts in token_sets], dtype=np.int64)
        postings: dict[str, list[int]] = {}
        for i, ts in enumerate(token_sets):
            for tok in ts:
                postings.setdefault(tok, []).append(i)
        self.postings = {t: np.array(ix, dtype=np.int64) for t, ix in postings.items()}

        keys: dict[tuple[str, ...], int] = {}
        rows = []
        self.row_of = np.empty(len(pairs), dtype=np.int64)
        for i, syn in enumerate(self.synonyms):
            key = tuple(sorted(tokenize(syn)))
            if key not in keys:
                keys[key] = len(rows)
                rows.append(embed_phrase(tables, key))
            self.row_of[i] = keys[key]
        dim = tables.dim
        self.vectors = np.array(rows).reshape(len(rows), dim)
        self.norms = np.linalg.norm(self.vectors, axis=1)

    def _cosines(self, mention_vec: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(mention_vec)
        out = np.zeros(len(self.vectors))
        if norm == 0.0 or not len(self.vectors):
            return out[self.row_of] if len(self.row_of) else out
        ok = self.norms > 0
        out[ok] = (self.vectors[ok] @ mention_vec) / (self.norms[ok] * norm)
        return out[self.row_of]

    def _jaccards(self, tokens: frozenset) -> np.ndarray:
        inter = np.zeros(len(self.synonyms), dtype=np.int64)
        hits = [self.postings[t] for t in tokens if t in self.postings]
        if hits:
            inter += np.bincount(np.concatenate(hits), minlength=len(self.synonyms))
        union = self.set_sizes + len(tokens) - inter
        out = np.zeros(len(self.synonyms))
        nz = union > 0
        out[nz] = inter[nz] / union[nz]
        return out

    def _select(self, scores: np.ndarray, threshold: float, k: int, source: Source) -> list[Candidate]:
        if not len(scores):
            return []
        # group by concept, best score first, earliest synonym on ties
        order = np.lexsort((np.arange(len(scores)), -scores, self.owner))
        first = np.ones(len(order), dtype=bool)
        first[1:] = self.owner[order[1:]] != self.owner[order[:-1]]
        best = order[first]
        best = best[scores[best] >= threshold]
        ranked = sorted(best.tolist(), key=lambda i: (-scores[i], self.concept_ids[self.owner[i]]))
        return [
            Candidate(self.concept_ids[self.owner[i]], self.synonyms[i], float(scores[i]), source)
            for i in ranked[:k]
        ]

    def generate(self, mention_text: str, params: CandGenParams = CandGenParams()) -> CandidateSet:
        tokens = tokenize(mention_text)
        c1 = self._select(self._cosines(embed_phrase(self.tables, tokens)), params.t1, params.k1, Source.COSINE)
        c2 = self._select(self._jaccards(frozenset(tokens)), params.t2, params.k2, Source.JACCARD)
        seen = {c.concept_id for c in c1}
        return CandidateSet(mention_text, tuple(c1 + [c for c in c2 if c.concept_id not in seen]))


def generate_candidates(
    mention_text: str,
    lex: Lexicon,
    tables: Tables,
    params: CandGenParams = CandGenParams(),
    index: Optional[CandidateIndex] = None,
) -> CandidateSet:
    """Candidate set for one mention.  Pass a prebuilt ``index`` when linking many mentions."""
    if index is None:
        index = CandidateIndex(lex, tables)
    return index.generate(mention_text, params)


def oracle_generate(
    mention_text: str, lex: Lexicon, tables: Tables, params: CandGenParams = CandGenParams()
) -> CandidateSet:
    """Naive full scan with plain-Python arithmetic; the reference for :func:`generate_candidates`."""
    words = mention_text.lower().split()
    m_tokens = [w.strip("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~") for w in words]
    m_tokens = [t for t in m_tokens if t]

    def vec(tokens):
        acc = [0.0] * tables.dim
        for tok in sorted(tokens):
            row = embed_token(tables, tok)
            acc = [a + float(r) for a, r in zip(acc, row)]
        return acc

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        return 0.0 if na == 0.0 or nb == 0.0 else dot / (na * nb)

    def jac(a, b):
        a, b = set(a), set(b)
        return 0.0 if not (a or b) else len(a & b) / len(a | b)

    m_vec = vec(m_tokens)
    per_concept = {}
    for entry in lex:
        best_cos = best_jac = None
        for syn in entry.synonyms:
            s_tokens = [t for t in (w.strip("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~") for w in syn.lower().split()) if t]
            c = cos(m_vec, vec(s_tokens))
            j = jac(m_tokens, s_tokens)
            if best_cos is None or c > best_cos[0]:
                best_cos = (c, syn)
            if best_jac is None or j > best_jac[0]:
                best_jac = (j, syn)
        per_concept[entry.id] = (best_cos, best_jac)

    def top(which, threshold, k, source):
        rows = [(v[which][0], cid, v[which][1]) for cid, v in per_concept.items() if v[which][0] >= threshold]
        rows.sort(key=lambda r: (-r[0], r[1]))
        return [Candidate(cid, syn, score, source) for score, cid, syn in rows[:k]]

    c1 = top(0, params.t1, params.k1, Source.COSINE)
    c2 = top(1, params.t2, params.k2, Source.JACCARD)
    ids = [c.concept_id for c in c1]
    return CandidateSet(mention_text, tuple(c1 + [c for c in c2 if c.concept_id not in ids]))


# -- TSV interchange ---------------------------------------------------------

TSV_HEADER = "mention\tconcept_id\tsynonym\tscore\tsource\n"


def write_candidates_tsv(sets: Iterable[CandidateSet], out: TextIO) -> None:
    """One row per candidate; scores are written with ``repr`` so they round-trip exactly."""
    out.write(TSV_HEADER)
    for cs in sets:
        for c in cs:
            out.write(f"{cs.mention_text}\t{c.concept_id}\t{c.synonym}\t{c.score!r}\t{c.source.value}\n")


def read_candidates_tsv(lines: Iterable[str]) -> dict[str, CandidateSet]:
    """Group rows back into candidate sets keyed by mention text (row order preserved)."""
    grouped: dict[str, list[Candidate]] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if lineno == 1 and line + "\n" == TSV_HEADER:
            continue
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ValueError(f"line {lineno}: expected 5 columns, got {len(cols)}")
        mention, cid, syn, score, source = cols
        grouped.setdefault(mention, []).append(Candidate(cid, syn, float(score), Source(source)))
    return {m: CandidateSet(m, tuple(cs)) for m, cs in grouped.items()}
