"""Triplet generation, training with early stopping, ranking and evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, TextIO

import numpy as np

from .candgen import CandGenParams, CandidateIndex, CandidateSet, cosine
from .corpus import Corpus, Document, Mention, resolve_gold
from .embed import Tables, embed_phrase, embed_token, tokenize
from .lexicon import Lexicon
from .metricnet import (
    AdamState,
    EncoderParams,
    Model,
    adam_step,
    encode,
    init_params,
    l2_distance,
    token_matrix,
    triplet_backward,
)

log = logging.getLogger(__name__)

CandidateFn = Callable[[str], CandidateSet]


class ConfigError(ValueError):
    pass


class UnmappedGold(LookupError):
    """None of a mention's gold ids exist in the lexicon."""


@dataclass(frozen=True)
class Triplet:
    positive: str
    mention: str
    negative: str
    gold_id: str
    negative_id: str


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.1
    n_filters: int = 128
    kernel_width: int = 3
    finetune_embeddings: bool = False
    use_subword: bool = False
    use_abbrev_expansion: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.lr <= 0:
            raise ConfigError("alpha must be >= 0 and lr > 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs, patience and batch_size must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")


@dataclass(frozen=True)
class RankedPrediction:
    mention: str
    ranked: tuple[tuple[str, float], ...] = ()

    @property
    def predicted_id(self) -> Optional[str]:
        return self.ranked[0][0] if self.ranked else None


def mention_text(m: Mention, use_abbrev_expansion: bool) -> str:
    return m.linking_text if use_abbrev_expansion else m.text


def make_triplets(
    mention: str,
    gold_ids: Sequence[str],
    cand_set: CandidateSet,
    lex: Lexicon,
    tables: Tables,
) -> list[Triplet]:
    """Build (positive, mention, negative) triplets from one candidate set.

    The positive is the first gold-owned candidate; failing that, the gold
    synonym closest to the mention by phrase cosine.  Every non-gold
    candidate becomes one negative.  Raises :class:`UnmappedGold` when no
    gold id is in the lexicon.
    """
    gold = [g for g in gold_ids if g in lex]
    if not gold:
        raise UnmappedGold(f"{mention!r}: gold ids {list(gold_ids)} not in lexicon")
    gold_set = set(gold)
    positive = next(((c.synonym, c.concept_id) for c in cand_set if c.concept_id in gold_set), None)
    if positive is None:
        m_vec = embed_phrase(tables, mention)
        best = None
        for cid in gold:
            for syn in lex[cid].synonyms:
                score = cosine(m_vec, embed_phrase(tables, syn))
                if best is None or score > best[0]:
                    best = (score, syn, cid)
        positive = (best[1], best[2])
    syn_p, gold_id = positive
    return [Triplet(syn_p, mention, c.synonym, gold_id, c.concept_id) for c in cand_set if c.concept_id not in gold_set]


class Featurizer:
    """Maps phrases to padded token matrices for a given model and tables."""

    def __init__(self, model: Model, tables: Tables):
        self.model = model
        self.tables = tables
        self.width = model.params.kernel_width
        self.slot = {t: i for i, t in enumerate(model.vocab)} if model.embeddings is not None else {}
        self._cache: dict[str, np.ndarray] = {}

    def tokens(self, text: str) -> list[str]:
        return tokenize(text)

    def matrix(self, text: str) -> np.ndarray:
        x = self._cache.get(text)
        if x is None:
            toks = self.tokens(text)
            rows = np.zeros((len(toks), self.tables.dim))
            for i, tok in enumerate(toks):
                j = self.slot.get(tok)
                rows[i] = self.model.embeddings[j] if j is not None else embed_token(self.tables, tok)
            x = token_matrix(rows, self.width)
            if not self.slot:
                self._cache[text] = x
        return x

    def encode(self, text: str) -> np.ndarray:
        return encode(self.model.params, self.matrix(text))


def rank(model: Model, mention: str, cand_set: CandidateSet, featurizer: Featurizer) -> RankedPrediction:
    """Order candidates by similarity = -L2 distance between encodings, id ascending on ties."""
    if featurizer.model is not model:
        raise ValueError("featurizer was built for a different model")
    if not len(cand_set):
        return RankedPrediction(mention)
    em = featurizer.encode(mention)
    scored = {}
    for c in cand_set:
        sim = 0.0 - l2_distance(em, featurizer.encode(c.synonym))  # avoid -0.0
        if c.concept_id not in scored or sim > scored[c.concept_id]:
            scored[c.concept_id] = sim
    ranked = sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))
    return RankedPrediction(mention, tuple(ranked))


@dataclass
class ReportRow:
    pmid: str
    start: int
    end: int
    mention: str
    gold_ids: tuple[str, ...]
    predicted_id: Optional[str]
    correct: bool
    ranked: tuple[tuple[str, float], ...]
    candidates: CandidateSet
    gold_resolved: tuple[str, ...] = ()


@dataclass
class EvalResult:
    accuracy: float
    tp: int
    total: int
    rows: list[ReportRow] = field(default_factory=list)

    @property
    def errors(self) -> list[ReportRow]:
        return [r for r in self.rows if not r.correct]


def candidate_fn(
    lex: Lexicon,
    tables: Tables,
    params: CandGenParams = CandGenParams(),
    cache: Optional[dict[str, CandidateSet]] = None,
    index: Optional[CandidateIndex] = None,
) -> CandidateFn:
    """Memoized candidate generator; ``cache`` may be pre-filled from a candidate TSV."""
    memo = dict(cache or {})
    idx = index

    def get(text: str) -> CandidateSet:
        nonlocal idx
        cs = memo.get(text)
        if cs is None:
            if idx is None:
                idx = CandidateIndex(lex, tables)
            cs = memo[text] = idx.generate(text, params)
        return cs

    return get


def evaluate(
    model: Model,
    corpus: Corpus | Iterable[Document],
    lex: Lexicon,
    tables: Tables,
    params: CandGenParams = CandGenParams(),
    *,
    use_abbrev_expansion: bool = False,
    candidates: Optional[CandidateFn] = None,
    jobs: int = 1,
    featurizer: Optional[Featurizer] = None,
) -> EvalResult:
    """Accuracy@1 over every mention; misses include empty candidate sets and unmapped gold ids."""
    candidates = candidates or candidate_fn(lex, tables, params)
    featurizer = featurizer or Featurizer(model, tables)
    items = [(doc, m) for doc in corpus for m in doc.mentions]
    texts = [mention_text(m, use_abbrev_expansion) for _, m in items]
    # candidate generation is memoized and not thread-safe; fill it first
    sets = [candidates(t) for t in texts]

    def one(i: int) -> ReportRow:
        (doc, m), text, cs = items[i], texts[i], sets[i]
        gold = resolve_gold(m, lex)
        pred = rank(model, text, cs, featurizer)
        ok = pred.predicted_id is not None and pred.predicted_id in gold
        return ReportRow(doc.pmid, m.start, m.end, text, m.gold_ids, pred.predicted_id, ok, pred.ranked, cs, gold)

    if jobs > 1:
        for t in set(texts) | {c.synonym for cs in sets for c in cs}:
            featurizer.matrix(t)
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(one, range(len(items))))
    else:
        rows = [one(i) for i in range(len(items))]
    tp = sum(r.correct for r in rows)
    total = len(rows)
    return EvalResult(tp / total if total else 0.0, tp, total, rows)


def write_report(result: EvalResult, out: TextIO) -> None:
    out.write("pmid\tstart\tend\tmention\tgold_ids\tpredicted_id\tcorrect\ttop5\n")
    for r in result.rows:
        top5 = ";".join(f"{cid}:{score:.6f}" for cid, score in r.ranked[:5])
        out.write(
            f"{r.pmid}\t{r.start}\t{r.end}\t{r.mention}\t{'|'.join(r.gold_ids)}\t"
            f"{r.predicted_id or ''}\t{int(r.correct)}\t{top5}\n"
        )


def split_validation(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Hold out ``fraction`` of the documents (by pmid, seeded) for validation."""
    pmids = sorted(d.pmid for d in corpus)
    n_val = int(round(fraction * len(pmids)))
    if fraction > 0 and len(pmids) > 1:
        n_val = min(max(n_val, 1), len(pmids) - 1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    held = set(rng.permutation(pmids)[:n_val].tolist()) if n_val else set()
    train = [d for d in corpus if d.pmid not in held]
    val = [d for d in corpus if d.pmid in held]
    return Corpus(train, corpus.split_name), Corpus(val, corpus.split_name + ":validation")


@dataclass
class TripletPool:
    triplets: list[Triplet]
    skipped: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)
    no_negatives: int = 0


def build_triplets(
    corpus: Corpus, lex: Lexicon, tables: Tables, candidates: CandidateFn, use_abbrev_expansion: bool = False
) -> TripletPool:
    pool = TripletPool([])
    for doc, m in corpus.mentions():
        text = mention_text(m, use_abbrev_expansion)
        try:
            ts = make_triplets(text, resolve_gold(m, lex), candidates(text), lex, tables)
        except UnmappedGold:
            pool.skipped.append((doc.pmid, text, m.gold_ids))
            continue
        if not ts:
            pool.no_negatives += 1
        pool.triplets.extend(ts)
    return pool


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int
    pool: TripletPool


def _fresh_model(dim: int, cfg: TrainConfig, pool: TripletPool, tables: Tables, seed_seq) -> Model:
    params = init_params(dim, cfg.n_filters, cfg.kernel_width, seed=seed_seq)
    model = Model(params, cfg.alpha, cfg.finetune_embeddings)
    if cfg.finetune_embeddings:
        vocab = sorted({tok for t in pool.triplets for s in (t.positive, t.mention, t.negative) for tok in tokenize(s)})
        model.vocab = vocab
        model.embeddings = np.array([embed_token(tables, tok) for tok in vocab]).reshape(len(vocab), dim)
    return model


def train(
    corpus: Corpus,
    lex: Lexicon,
    tables: Tables,
    cfg: TrainConfig = TrainConfig(),
    params: CandGenParams = CandGenParams(),
    *,
    candidates: Optional[CandidateFn] = None,
    validation: Optional[Corpus] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train the encoder on triplets mined from ``corpus``.

    Unless ``validation`` is given, ``cfg.validation_fraction`` of the
    documents are held out.  Each epoch shuffles the full triplet list,
    takes one Adam step per batch on the batch-mean gradient, then scores
    validation accuracy.  The best-validation parameters are returned;
    training stops after ``cfg.patience`` epochs without improvement.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if validation is None:
        corpus, validation = split_validation(corpus, cfg.validation_fraction, cfg.seed)
    candidates = candidates or candidate_fn(lex, tables, params)
    pool = build_triplets(corpus, lex, tables, candidates, cfg.use_abbrev_expansion)
    if not pool.triplets:
        raise ConfigError("no training triplets: every mention lacked negatives or a mappable gold id")
    log.info("%d triplets, %d mentions skipped (unmapped gold)", len(pool.triplets), len(pool.skipped))

    model = _fresh_model(tables.dim, cfg, pool, tables, seeds[0])
    rng = np.random.default_rng(seeds[1])
    adam = AdamState(lr=cfg.lr)
    tensors = model.params.tensors()
    if model.embeddings is not None:
        tensors["embeddings"] = model.embeddings
    feat = Featurizer(model, tables)
    slot = feat.slot

    history: list[EpochRecord] = []
    best_model, best_acc, best_epoch, stale = model.copy(), -np.inf, 0, 0
    n = len(pool.triplets)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            grads = EncoderParams.zeros_like(model.params)
            g_emb = np.zeros_like(model.embeddings) if model.embeddings is not None else None
            for i in batch:
                t = pool.triplets[i]
                xm, xp, xn = feat.matrix(t.mention), feat.matrix(t.positive), feat.matrix(t.negative)
                res = triplet_backward(model.params, xm, xp, xn, model.alpha, with_inputs=g_emb is not None, grads=grads)
                total += res.loss
                if g_emb is not None and res.loss > 0:
                    for text, dx in ((t.mention, res.mention), (t.positive, res.positive), (t.negative, res.negative)):
                        for r, tok in enumerate(feat.tokens(text)):
                            j = slot.get(tok)
                            if j is not None:
                                g_emb[j] += dx[r]
            scale = 1.0 / len(batch)
            g = {"conv_filters": grads.conv_filters * scale, "conv_bias": grads.conv_bias * scale}
            if g_emb is not None:
                g["embeddings"] = g_emb * scale
            adam_step(tensors, g, adam)

        val_acc = float("nan")
        if len(validation):
            val_acc = evaluate(model, validation, lex, tables, params, use_abbrev_expansion=cfg.use_abbrev_expansion, candidates=candidates, featurizer=Featurizer(model, tables)).accuracy
        rec = EpochRecord(epoch, total / n, val_acc)
        history.append(rec)
        log.info("epoch %d loss %.6f val %.4f", epoch, rec.loss, val_acc)
        if on_epoch:
            on_epoch(rec)

        if not len(validation):
            best_model, best_epoch = model.copy(), epoch
            continue
        if val_acc > best_acc:
            best_model, best_acc, best_epoch, stale = model.copy(), val_acc, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best_model, history, best_epoch, pool)


def write_history(history: Sequence[EpochRecord], out: TextIO) -> None:
    out.write("epoch,loss,val_accuracy\n")
    for r in history:
        out.write(f"{r.epoch},{r.loss:.10f},{r.val_accuracy:.6f}\n")
