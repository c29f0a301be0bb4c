import io

import numpy as np
import pytest

from metriclink.embed import EmbeddingTable, Tables
from metriclink.lexicon import ConceptEntry, Lexicon


def random_tables(vocab, dim=8, seed=0) -> Tables:
    rng = np.random.default_rng(seed)
    return Tables(EmbeddingTable(dim, {w: rng.normal(size=dim).astype(np.float32) for w in sorted(vocab)}))


def lexicon_of(rows) -> Lexicon:
    """``rows``: iterable of (id, [synonyms...]) with the preferred name first."""
    return Lexicon.from_entries(ConceptEntry(cid, syns[0], tuple(syns)) for cid, syns in rows)


@pytest.fixture
def neisseria_lexicon():
    return lexicon_of(
        [
            ("MESH:D016870", ["Bacterial Neisseria Infections", "Neisseriaceae Infections"]),
            ("MESH:D004266", ["DNA-Virus Infections", "DNA Virus Infections"]),
            ("MESH:D009033", ["Screw-Worm Infections", "Screwworm Infestation"]),
            ("MESH:D006130", ["Growth Disorders", "Growth Disorder", "Stunting"]),
        ]
    )


@pytest.fixture
def neisseria_tables(neisseria_lexicon):
    from metriclink.embed import tokenize

    vocab = {t for e in neisseria_lexicon for s in e.synonyms for t in tokenize(s)}
    vocab |= {"bacteremic", "due", "to", "of"}
    vocab.discard("stunting")
    return random_tables(vocab, dim=16, seed=3)


@pytest.fixture
def text_stream():
    return lambda s: io.StringIO(s, newline="")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
