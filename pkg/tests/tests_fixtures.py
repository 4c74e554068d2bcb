"""Fixture data shared across test modules."""

from medres.ingest import CitationRecord


def _rec(pid, authors, venue, year, refs=(), title="a title"):
    return CitationRecord(paper_id=pid, title_tokens=tuple(title.split()),
                          authors=tuple(authors), venue=venue, year=year, refs=tuple(refs))


FOUR_PAPERS = [
    _rec("p1", ["A", "B"], "C", 2001, refs=["p3"]),
    _rec("p2", ["A"], "C", 2002, refs=["p4", "p9"]),
    _rec("p3", ["D"], "E", 2000),
    _rec("p4", ["D", "A"], "E", 2001),
]
