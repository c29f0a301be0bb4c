import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metriclink.candgen import CandGenParams, Candidate, CandidateSet, Source
from metriclink.corpus import Corpus, Document, Mention
from metriclink.embed import embed_tokens, tokenize
from metriclink.metricnet import Model, init_params, token_matrix
from metriclink.pipeline import (
    ConfigError,
    EpochRecord,
    Featurizer,
    TrainConfig,
    UnmappedGold,
    candidate_fn,
    evaluate,
    make_triplets,
    rank,
    split_validation,
    train,
    write_history,
    write_report,
)
from metriclink.metricnet import write_checkpoint
from metriclink.synthetic import make_fixture
from conftest import lexicon_of, random_tables
from oracles import naive_encode, scalar_distance

NEISSERIA = "bacteremic infections due to Neisseria"


def cset(text, *pairs):
    return CandidateSet(text, tuple(Candidate(cid, syn, 0.5, Source.JACCARD) for cid, syn in pairs))


def one_mention_doc(pmid, text, gold, title="T"):
    return Document(pmid, title, text, (Mention(len(title) + 1, len(title) + 1 + len(text), text, "SpecificDisease", (gold,)),))


def model_for(tables, seed=0, n_filters=16):
    return Model(init_params(tables.dim, n_filters, seed=seed))


# -- triplets -----------------------------------------------------------------


def test_make_triplets_example(neisseria_lexicon, neisseria_tables):
    cs = cset(
        NEISSERIA,
        ("MESH:D016870", "bacterial neisseria infections"),
        ("MESH:D004266", "DNA-virus infections"),
        ("MESH:D009033", "Screw-Worm Infections"),
    )
    ts = make_triplets(NEISSERIA, ["MESH:D016870"], cs, neisseria_lexicon, neisseria_tables)
    assert [(t.positive, t.mention, t.negative) for t in ts] == [
        ("bacterial neisseria infections", NEISSERIA, "DNA-virus infections"),
        ("bacterial neisseria infections", NEISSERIA, "Screw-Worm Infections"),
    ]
    assert [t.negative_id for t in ts] == ["MESH:D004266", "MESH:D009033"]
    assert all(t.gold_id == "MESH:D016870" for t in ts)


def test_make_triplets_only_gold(neisseria_lexicon, neisseria_tables):
    cs = cset("x", ("MESH:D016870", "Neisseriaceae Infections"), ("MESH:D004266", "DNA Virus Infections"))
    assert make_triplets("x", ["MESH:D016870", "MESH:D004266"], cs, neisseria_lexicon, neisseria_tables) == []


@pytest.mark.parametrize("g, n", [(1, 0), (1, 3), (2, 2), (0, 3)])
def test_make_triplets_counts(neisseria_lexicon, neisseria_tables, g, n):
    gold = [("MESH:D016870", "Bacterial Neisseria Infections"), ("MESH:D016870", "Neisseriaceae Infections")][:g]
    other = [("MESH:D004266", "DNA-Virus Infections"), ("MESH:D009033", "Screw-Worm Infections"), ("MESH:D006130", "Stunting")][:n]
    ts = make_triplets(NEISSERIA, ["MESH:D016870"], cset(NEISSERIA, *gold, *other), neisseria_lexicon, neisseria_tables)
    assert len(ts) == n
    for t in ts:
        assert t.gold_id != t.negative_id
        assert t.positive in neisseria_lexicon[t.gold_id].synonyms
        assert t.negative in neisseria_lexicon[t.negative_id].synonyms


def test_injected_positive_is_best_cosine_gold_synonym(neisseria_lexicon, neisseria_tables):
    from metriclink.candgen import cosine
    from metriclink.embed import embed_phrase

    cs = cset(NEISSERIA, ("MESH:D004266", "DNA-Virus Infections"))
    (t,) = make_triplets(NEISSERIA, ["MESH:D016870"], cs, neisseria_lexicon, neisseria_tables)
    m = embed_phrase(neisseria_tables, NEISSERIA)
    best = max(neisseria_lexicon["MESH:D016870"].synonyms, key=lambda s: cosine(m, embed_phrase(neisseria_tables, s)))
    assert t.positive == best


def test_unmapped_gold_raises(neisseria_lexicon, neisseria_tables):
    with pytest.raises(UnmappedGold):
        make_triplets("x", ["MESH:D999999"], cset("x"), neisseria_lexicon, neisseria_tables)


# -- ranking ----------------------------------------------------------------------


def test_identical_synonym_ranked_first(neisseria_lexicon, neisseria_tables):
    model = model_for(neisseria_tables)
    cs = cset("growth disorders", ("MESH:D004266", "DNA-Virus Infections"), ("MESH:D006130", "Growth Disorders"))
    pred = rank(model, "growth disorders", cs, Featurizer(model, neisseria_tables))
    assert pred.predicted_id == "MESH:D006130" and pred.ranked[0][1] == 0.0


def test_single_and_empty(neisseria_tables):
    model = model_for(neisseria_tables)
    f = Featurizer(model, neisseria_tables)
    assert rank(model, "x", cset("x", ("A", "due")), f).predicted_id == "A"
    assert rank(model, "x", cset("x"), f).predicted_id is None


def test_rank_matches_independent_distances(neisseria_lexicon, neisseria_tables):
    model = model_for(neisseria_tables, seed=4)
    syns = [(e.id, s) for e in neisseria_lexicon for s in e.synonyms]
    cs = cset(NEISSERIA, *syns)
    pred = rank(model, NEISSERIA, cs, Featurizer(model, neisseria_tables))

    w, b = model.params.conv_filters, model.params.conv_bias
    enc = lambda s: naive_encode(w, b, token_matrix(embed_tokens(neisseria_tables, tokenize(s))))  # noqa: E731
    m = enc(NEISSERIA)
    best = {}
    for cid, s in syns:
        best[cid] = max(best.get(cid, -np.inf), -scalar_distance(m, enc(s)))
    expect = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    assert [cid for cid, _ in pred.ranked] == [cid for cid, _ in expect]
    np.testing.assert_allclose([s for _, s in pred.ranked], [s for _, s in expect], rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(6))))
def test_rank_permutation_invariant(perm):
    tables = random_tables(["a", "b", "c"], dim=4, seed=1)
    model = model_for(tables)
    # duplicate synonyms across ids force exact score ties
    pairs = [("X:3", "a b"), ("X:1", "a b"), ("X:2", "c"), ("X:4", "b a"), ("X:5", "a"), ("X:0", "c")]
    f = Featurizer(model, tables)
    base = rank(model, "a c", cset("a c", *pairs), f)
    again = rank(model, "a c", cset("a c", *[pairs[i] for i in perm]), f)
    assert again.ranked == base.ranked
    scores = [s for _, s in base.ranked]
    assert scores == sorted(scores, reverse=True)


# -- evaluation -------------------------------------------------------------------


def small_world():
    lex = lexicon_of([("MESH:D1", ["renal failure", "kidney failure"]), ("MESH:D2", ["liver failure"]), ("MESH:D3", ["fever"])])
    tables = random_tables(["renal", "kidney", "liver", "failure", "fever", "acute"], dim=6, seed=2)
    docs = [
        one_mention_doc("1", "kidney failure", "D1"),
        one_mention_doc("2", "acute liver failure", "D2"),
        one_mention_doc("3", "fever", "D3"),
        one_mention_doc("4", "fever", "D999"),  # unmapped gold
    ]
    return lex, tables, Corpus(docs, "test")


def test_evaluate_all_correct():
    lex, tables, corpus = small_world()
    corpus = Corpus(corpus.documents[:3], "test")
    gold_only = {m.text: cset(m.text, ("MESH:" + m.gold_ids[0], lex["MESH:" + m.gold_ids[0]].synonyms[0])) for _, m in corpus.mentions()}
    res = evaluate(model_for(tables), corpus, lex, tables, candidates=gold_only.__getitem__)
    assert (res.accuracy, res.tp, res.total) == (1.0, 3, 3)


def test_evaluate_no_candidates():
    lex, tables, corpus = small_world()
    res = evaluate(model_for(tables), corpus, lex, tables, candidates=lambda t: cset(t))
    assert (res.accuracy, res.total) == (0.0, 4) and len(res.errors) == 4


def test_unmapped_gold_is_a_miss_and_denominator_is_mention_count():
    lex, tables, corpus = small_world()
    res = evaluate(model_for(tables), corpus, lex, tables, CandGenParams(t1=0.0, t2=0.0))
    assert res.total == corpus.n_mentions() == 4
    assert not res.rows[3].correct and res.rows[3].gold_resolved == ()


def test_report_columns():
    lex, tables, corpus = small_world()
    res = evaluate(model_for(tables), corpus, lex, tables)
    buf = io.StringIO()
    write_report(res, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split("\t") == ["pmid", "start", "end", "mention", "gold_ids", "predicted_id", "correct", "top5"]
    assert len(lines) == 5 and all(len(line.split("\t")) == 8 for line in lines)


def test_jobs_do_not_change_results():
    fx = make_fixture(n_concepts=10, dim=8, seed=1)
    model = model_for(fx.tables)
    one = evaluate(model, fx.test, fx.lexicon, fx.tables)
    four = evaluate(model, fx.test, fx.lexicon, fx.tables, jobs=4)
    assert [(r.predicted_id, r.ranked) for r in one.rows] == [(r.predicted_id, r.ranked) for r in four.rows]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_appending_gold_never_lowers_accuracy(seed):
    fx = make_fixture(n_concepts=12, dim=8, seed=seed)
    model = model_for(fx.tables, seed=seed)
    base_fn = candidate_fn(fx.lexicon, fx.tables)
    base = evaluate(model, fx.test, fx.lexicon, fx.tables, candidates=base_fn)
    gold_of = {m.text: "MESH:" + m.gold_ids[0] for _, m in fx.test.mentions()}

    def with_gold(text):
        cs = base_fn(text)
        g = gold_of[text]
        extra = (Candidate(g, fx.lexicon[g].synonyms[0], 1.0, Source.COSINE),)
        return CandidateSet(text, cs.candidates + extra)

    assert evaluate(model, fx.test, fx.lexicon, fx.tables, candidates=with_gold).accuracy >= base.accuracy


# -- training ---------------------------------------------------------------------


def test_split_validation():
    docs = [one_mention_doc(f"{i:03d}", "fever", "D3") for i in range(20)]
    tr, val = split_validation(Corpus(docs, "train"), 0.1, seed=7)
    assert len(val) == 2 and len(tr) == 18
    assert {d.pmid for d in tr}.isdisjoint(d.pmid for d in val)
    again = split_validation(Corpus(list(reversed(docs)), "train"), 0.1, seed=7)[1]
    assert {d.pmid for d in again} == {d.pmid for d in val}
    assert len(split_validation(Corpus(docs, "train"), 0.0, seed=7)[1]) == 0


def test_frozen_validation_metric_stops_after_epoch_two():
    fx = make_fixture(n_concepts=10, dim=8, seed=0)
    # validation candidates hold only the gold concept, so accuracy is 1.0 every epoch
    val = Corpus(fx.test.documents, "val")
    cands = candidate_fn(fx.lexicon, fx.tables)
    gold_only = {}
    for _, m in val.mentions():
        g = "MESH:" + m.gold_ids[0]
        gold_only[m.text] = cset(m.text, (g, fx.lexicon[g].synonyms[0]))

    def lookup(text):
        return gold_only.get(text) or cands(text)

    cfg = TrainConfig(alpha=0.0, patience=1, max_epochs=10, n_filters=8)
    res = train(fx.train, fx.lexicon, fx.tables, cfg, candidates=lookup, validation=val)
    assert [r.epoch for r in res.history] == [1, 2]
    assert [r.val_accuracy for r in res.history] == [1.0, 1.0]
    assert res.best_epoch == 1


def test_empty_pool_is_config_error():
    lex, tables, corpus = small_world()
    with pytest.raises(ConfigError):
        train(corpus, lex, tables, TrainConfig(max_epochs=1), candidates=lambda t: cset(t), validation=Corpus([], "v"))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(validation_fraction=1.0)


def _run(fx, cfg):
    res = train(fx.train, fx.lexicon, fx.tables, cfg)
    buf = io.BytesIO()
    write_checkpoint(res.model, buf)
    hist = io.StringIO()
    write_history(res.history, hist)
    return buf.getvalue(), hist.getvalue(), res


def test_training_deterministic():
    fx = make_fixture(n_concepts=10, dim=8, seed=3)
    cfg = TrainConfig(max_epochs=3, n_filters=8, seed=5)
    a, b = _run(fx, cfg), _run(fx, cfg)
    assert a[0] == b[0] and a[1] == b[1]
    c = _run(fx, TrainConfig(max_epochs=3, n_filters=8, seed=6))
    assert c[0] != a[0]


def test_finetune_embeddings_trains_and_serializes():
    fx = make_fixture(n_concepts=10, dim=8, seed=2)
    raw, hist, res = _run(fx, TrainConfig(max_epochs=2, n_filters=8, finetune_embeddings=True))
    m = res.model
    assert m.finetune_embeddings and m.vocab == sorted(m.vocab) and m.embeddings.shape == (len(m.vocab), 8)
    moved = [tok for i, tok in enumerate(m.vocab) if not np.allclose(m.embeddings[i], fx.tables.word.vectors[tok])]
    assert moved
    from metriclink.metricnet import read_checkpoint

    back = read_checkpoint(io.BytesIO(raw))
    assert back.vocab == m.vocab


def test_history_format():
    buf = io.StringIO()
    write_history([EpochRecord(1, 0.5, 0.25), EpochRecord(2, 0.125, 1.0)], buf)
    assert buf.getvalue() == "epoch,loss,val_accuracy\n1,0.5000000000,0.250000\n2,0.1250000000,1.000000\n"


def test_abbreviation_flag_changes_linking_text():
    from metriclink.corpus import expand_corpus

    fx = make_fixture(n_concepts=10, dim=8, seed=0, abbreviations=True)
    test = expand_corpus(fx.test)
    model = model_for(fx.tables)
    on = evaluate(model, test, fx.lexicon, fx.tables, use_abbrev_expansion=True)
    off = evaluate(model, test, fx.lexicon, fx.tables, use_abbrev_expansion=False)
    long_forms = {d.pmid: d.mentions[0].text for d in test}
    n_abbr = 0
    for a, b in zip(on.rows, off.rows):
        if b.mention.isupper():
            n_abbr += 1
            assert a.mention == long_forms[a.pmid]
        else:
            assert a.mention == b.mention
    assert n_abbr == 10
