"""Reading and writing the line-based LETOR ranking format.

Grammar per line: `<relevance> qid:<int> <fid>:<float> ... (#<comment>)?`
Feature ids start at 1 and are densified per line: ids absent from a line
become 0.0 up to the largest id seen on that line. Serialization is
canonical (contiguous ids, repr floats), so parse -> serialize -> parse is a
fixed point.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .seeding import substream


class LetorParseError(ValueError):
    """Malformed LETOR input; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class LetorRecord:
    relevance: int
    qid: int
    features: np.ndarray  # dense, index 0 holds feature id 1
    comment: str | None = None

    def __post_init__(self) -> None:
        if self.relevance < 0:
            raise ValueError("relevance must be non-negative")


def _lines(source) -> Iterable[str]:
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def parse_letor(source) -> list[LetorRecord]:
    """Parse lines from a string, file object, or iterable of lines.

    Returns records in file order. Blank lines are skipped. Any malformed
    line raises LetorParseError naming its line number.
    """
    records: list[LetorRecord] = []
    for line_number, raw in enumerate(_lines(source), start=1):
        line = raw.strip()
        if not line:
            continue
        comment: str | None = None
        hash_pos = line.find("#")
        if hash_pos >= 0:
            comment = line[hash_pos + 1:].strip()
            line = line[:hash_pos]
        tokens = line.split()
        if len(tokens) < 3:
            raise LetorParseError(line_number, "expected `<rel> qid:<int> <fid>:<float> ...`")
        try:
            relevance = int(tokens[0])
        except ValueError:
            raise LetorParseError(line_number, f"bad relevance {tokens[0]!r}") from None
        if relevance < 0:
            raise LetorParseError(line_number, "relevance must be non-negative")
        if not tokens[1].startswith("qid:"):
            raise LetorParseError(line_number, f"expected qid:<int>, got {tokens[1]!r}")
        try:
            qid = int(tokens[1][4:])
        except ValueError:
            raise LetorParseError(line_number, f"bad qid {tokens[1]!r}") from None
        values: dict[int, float] = {}
        for token in tokens[2:]:
            fid_str, sep, value_str = token.partition(":")
            if not sep:
                raise LetorParseError(line_number, f"expected <fid>:<float>, got {token!r}")
            try:
                fid = int(fid_str)
                value = float(value_str)
            except ValueError:
                raise LetorParseError(line_number, f"bad feature token {token!r}") from None
            if fid < 1:
                raise LetorParseError(line_number, f"feature id {fid} must be >= 1")
            if not np.isfinite(value):
                raise LetorParseError(line_number, f"non-finite feature value in {token!r}")
            if fid in values:
                raise LetorParseError(line_number, f"duplicate feature id {fid}")
            values[fid] = value
        features = np.zeros(max(values))
        for fid, value in values.items():
            features[fid - 1] = value
        records.append(LetorRecord(relevance, qid, features, comment))
    return records


def serialize_letor(records: Iterable[LetorRecord]) -> str:
    """Canonical text form: contiguous feature ids, repr floats, one trailing newline."""
    lines = []
    for rec in records:
        parts = [str(rec.relevance), f"qid:{rec.qid}"]
        parts += [f"{i + 1}:{float(v)!r}" for i, v in enumerate(rec.features)]
        line = " ".join(parts)
        if rec.comment is not None:
            line += f" #{rec.comment}"
        lines.append(line)
    return "\n".join(lines) + ("\n" if lines else "")


def generate_letor_fixture(n_queries: int, docs_per_query: int, n_features: int,
                           seed: int = 0, n_clusters: int = 4) -> str:
    """Synthetic MQ2007-shaped text with clusterable queries and learnable grades.

    Queries belong to latent clusters (feature means differ per cluster) and
    document grades follow the sum of the first two features, so rankers have
    signal to fit and the domain builder has structure to find.
    """
    rng = substream(seed, "letor_fixture")
    centers = rng.normal(0.0, 2.0, size=(n_clusters, n_features))
    records = []
    for q in range(n_queries):
        cluster = int(rng.integers(n_clusters))
        docs = centers[cluster] + rng.normal(0.0, 0.4, size=(docs_per_query, n_features))
        scores = docs[:, 0] + docs[:, 1] + rng.normal(0.0, 0.1, size=docs_per_query)
        order = np.argsort(-scores)
        grades = np.zeros(docs_per_query, dtype=int)
        n2 = max(1, docs_per_query // 5)
        n1 = max(1, (3 * docs_per_query) // 10)
        grades[order[:n2]] = 2
        grades[order[n2:n2 + n1]] = 1
        for d in range(docs_per_query):
            feats = np.round(docs[d], 6)
            records.append(LetorRecord(int(grades[d]), q + 1, feats,
                                       comment=f"docid = Q{q + 1}-D{d + 1}"))
    return serialize_letor(records)
