"""Corpus handling: tokenization, aligned records, vocabulary, and IDF statistics.

A corpus file is UTF-8 JSONL with one object per line:

    {"id": "p17", "document": "raw text ...", "profile": [["name", "Lee Harding"], ...]}

Documents are tokenized at the word level (whitespace split with punctuation
separated into standalone tokens). Profiles are key/value tables that can be
linearized into a token sequence for encoding and lexical matching.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .stopwords import DEFAULT_STOPWORDS

MASK_TOKEN = "<mask>"

# Maximum encoded length of a linearized profile, in tokens.
MAX_PROFILE_TOKENS = 128

_TOKEN_RE = re.compile(r"\w+|[^\w\s]+")
_ALNUM_RE = re.compile(r"[^\W_]")


class CorpusError(ValueError):
    """Raised for malformed corpus files. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Token:
    """A single word or punctuation run from a document."""

    surface: str
    normalized: str
    is_stopword: bool
    is_punctuation: bool


@dataclass(frozen=True)
class Document:
    """An ordered token sequence."""

    tokens: tuple[Token, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[Token]:
        return iter(self.tokens)

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    def normalized(self) -> list[str]:
        return [t.normalized for t in self.tokens]


@dataclass(frozen=True)
class Profile:
    """A key/value table describing one person."""

    id: str
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        keys = [k for k, _ in self.entries]
        if len(set(keys)) != len(keys):
            raise CorpusError(f"profile {self.id!r} has duplicate keys")


@dataclass(frozen=True)
class AlignedRecord:
    """A document paired with the id of its true profile."""

    document: Document
    profile_id: str
    raw_text: str = ""


class ProfileStore:
    """Ordered collection of unique profiles, addressable by id or index."""

    def __init__(self, profiles: Sequence[Profile]):
        self.profiles: list[Profile] = list(profiles)
        self._index: dict[str, int] = {}
        for i, p in enumerate(self.profiles):
            if p.id in self._index:
                raise CorpusError(f"duplicate profile id {p.id!r}")
            self._index[p.id] = i

    def __len__(self) -> int:
        return len(self.profiles)

    def __iter__(self) -> Iterator[Profile]:
        return iter(self.profiles)

    def __getitem__(self, index: int) -> Profile:
        return self.profiles[index]

    def index_of(self, profile_id: str) -> int:
        if profile_id not in self._index:
            raise KeyError(f"unknown profile id {profile_id!r}")
        return self._index[profile_id]

    def get(self, profile_id: str) -> Profile:
        return self.profiles[self.index_of(profile_id)]


@dataclass
class Corpus:
    """Aligned records plus the store of all candidate profiles."""

    records: list[AlignedRecord]
    store: ProfileStore

    def __len__(self) -> int:
        return len(self.records)


def tokenize(text: str, stopwords: frozenset[str] = DEFAULT_STOPWORDS) -> Document:
    """Split raw text into a Document.

    Words are split on whitespace and punctuation runs become standalone
    tokens, so "John Smith, farmer." yields five tokens. Normalization is
    the casefolded surface. Raises CorpusError when no tokens result.
    """
    tokens = []
    for surface in _TOKEN_RE.findall(text):
        normalized = surface.casefold()
        is_punct = _ALNUM_RE.search(surface) is None
        tokens.append(
            Token(
                surface=surface,
                normalized=normalized,
                is_stopword=normalized in stopwords,
                is_punctuation=is_punct,
            )
        )
    if not tokens:
        raise CorpusError("no tokens in input text")
    return Document(tokens=tuple(tokens))


def linearize_profile(profile: Profile, max_tokens: int = MAX_PROFILE_TOKENS) -> Document:
    """Render a profile as a token sequence "key : value | key : value ...".

    Whole trailing entries are dropped until the sequence fits max_tokens.
    The first entry is kept even if it must be clipped hard.
    """
    if not profile.entries:
        raise CorpusError(f"profile {profile.id!r} has no entries")
    chunks: list[list[Token]] = []
    for key, value in profile.entries:
        chunk = list(tokenize(key).tokens)
        chunk.extend(tokenize(":").tokens)
        chunk.extend(tokenize(str(value)).tokens)
        chunks.append(chunk)

    kept: list[Token] = list(chunks[0])
    separator = tokenize("|").tokens[0]
    for chunk in chunks[1:]:
        if len(kept) + 1 + len(chunk) > max_tokens:
            break
        kept.append(separator)
        kept.extend(chunk)
    if len(kept) > max_tokens:
        kept = kept[:max_tokens]
    return Document(tokens=tuple(kept))


def _parse_record(obj: dict, line: int) -> tuple[AlignedRecord, Profile]:
    if not isinstance(obj, dict):
        raise CorpusError("expected a JSON object", line)
    for key in ("id", "document", "profile"):
        if key not in obj:
            raise CorpusError(f"missing field {key!r}", line)
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise CorpusError("field 'id' must be a nonempty string", line)
    if not isinstance(obj["document"], str):
        raise CorpusError("field 'document' must be a string", line)
    entries = obj["profile"]
    if not isinstance(entries, list) or not entries:
        raise CorpusError("field 'profile' must be a nonempty list", line)
    pairs = []
    for pair in entries:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise CorpusError("profile entries must be [key, value] pairs", line)
        pairs.append((str(pair[0]), str(pair[1])))
    try:
        document = tokenize(obj["document"])
        profile = Profile(id=obj["id"], entries=tuple(pairs))
    except CorpusError as exc:
        raise CorpusError(str(exc), line) from exc
    record = AlignedRecord(document=document, profile_id=obj["id"], raw_text=obj["document"])
    return record, profile


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSONL corpus file.

    Every line must parse and every profile id must be unique; errors name
    the offending line.
    """
    records: list[AlignedRecord] = []
    profiles: list[Profile] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", line_no) from exc
            record, profile = _parse_record(obj, line_no)
            if profile.id in seen:
                raise CorpusError(
                    f"duplicate profile id {profile.id!r} (first seen on line {seen[profile.id]})",
                    line_no,
                )
            seen[profile.id] = line_no
            records.append(record)
            profiles.append(profile)
    if not records:
        raise CorpusError(f"no records in {path}")
    return Corpus(records=records, store=ProfileStore(profiles))


def load_redacted(path: str | Path) -> list[dict]:
    """Load a redacted JSONL file, returning raw dicts with id/mask/method/k."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", line_no) from exc
            if "id" not in obj or "mask" not in obj:
                raise CorpusError("redacted rows need 'id' and 'mask'", line_no)
            rows.append(obj)
    return rows


class IdfTable:
    """Smoothed inverse document frequency statistics.

    idf(t) = ln((1 + D) / (1 + df(t))), which is 0 for a term present in
    every document and maximal (ln(1 + D)) for unseen terms.
    """

    def __init__(self, doc_count: int, df: dict[str, int]):
        self.doc_count = doc_count
        self.df = df

    def idf(self, term: str) -> float:
        return math.log((1 + self.doc_count) / (1 + self.df.get(term, 0)))

    @property
    def max_idf(self) -> float:
        return math.log(1 + self.doc_count)

    @classmethod
    def from_token_documents(cls, docs: Iterable[Sequence[str]]) -> "IdfTable":
        """Build from an iterable of normalized-term sequences."""
        df: dict[str, int] = {}
        count = 0
        for doc in docs:
            count += 1
            for term in set(doc):
                df[term] = df.get(term, 0) + 1
        return cls(doc_count=count, df=df)


def compute_idf(corpus: Corpus) -> IdfTable:
    """IDF over the union of documents and linearized profiles."""
    docs: list[list[str]] = [rec.document.normalized() for rec in corpus.records]
    docs.extend(linearize_profile(p).normalized() for p in corpus.store)
    return IdfTable.from_token_documents(docs)


def check_mask(mask: np.ndarray | Sequence[int], n: int) -> np.ndarray:
    """Validate and canonicalize a 0/1 mask of length n."""
    arr = np.asarray(mask, dtype=np.int8)
    if arr.ndim != 1 or len(arr) != n:
        raise ValueError(f"mask length {arr.shape} does not match document length {n}")
    if np.any((arr != 0) & (arr != 1)):
        raise ValueError("mask entries must be 0 or 1")
    return arr


def apply_mask(document: Document, mask: np.ndarray | Sequence[int], mode: str = "replace") -> str:
    """Render a document with its mask applied.

    Modes: "replace" puts the literal <mask> at each masked position,
    "delete" drops masked words, and "collapse" joins each maximal run of
    masked words into a single <mask>.
    """
    arr = check_mask(mask, len(document))
    if mode not in ("replace", "delete", "collapse"):
        raise ValueError(f"unknown mask mode {mode!r}")
    out: list[str] = []
    prev_masked = False
    for token, bit in zip(document.tokens, arr):
        if bit:
            if mode == "replace":
                out.append(MASK_TOKEN)
            elif mode == "collapse" and not prev_masked:
                out.append(MASK_TOKEN)
            prev_masked = True
        else:
            out.append(token.surface)
            prev_masked = False
    return " ".join(out)


def deflate_size(text: str) -> int:
    """Byte length of the text under DEFLATE at level 6."""
    return len(zlib.compress(text.encode("utf-8"), 6))


def corpus_stats(corpus: Corpus) -> dict:
    """Summary counts used by the CLI stats command."""
    idf = compute_idf(corpus)
    lengths = [len(rec.document) for rec in corpus.records]
    vocab = set()
    for rec in corpus.records:
        vocab.update(rec.document.normalized())
    for profile in corpus.store:
        vocab.update(linearize_profile(profile).normalized())
    return {
        "records": len(corpus.records),
        "profiles": len(corpus.store),
        "vocab_size": len(vocab),
        "idf_documents": idf.doc_count,
        "mean_doc_tokens": sum(lengths) / len(lengths),
        "max_doc_tokens": max(lengths),
        "max_idf": idf.max_idf,
    }


class Vocabulary:
    """Dense term index with hash buckets for unseen terms.

    Known terms occupy indices [0, n_terms); unseen terms hash into
    n_buckets rows after that; the final two rows are the mask symbol and
    padding. Row layout is stable across save/load because terms are
    stored sorted.
    """

    def __init__(self, terms: Sequence[str], hash_buckets: int = 2**18):
        if hash_buckets < 1:
            raise ValueError("hash_buckets must be >= 1")
        self.terms = tuple(terms)
        self.hash_buckets = hash_buckets
        self._index = {t: i for i, t in enumerate(self.terms)}
        if len(self._index) != len(self.terms):
            raise ValueError("vocabulary terms must be unique")

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def mask_index(self) -> int:
        return self.n_terms + self.hash_buckets

    @property
    def pad_index(self) -> int:
        return self.n_terms + self.hash_buckets + 1

    @property
    def n_rows(self) -> int:
        return self.n_terms + self.hash_buckets + 2

    def index_of(self, term: str) -> int:
        idx = self._index.get(term)
        if idx is not None:
            return idx
        return self.n_terms + zlib.crc32(term.encode("utf-8")) % self.hash_buckets

    def indices(self, terms: Iterable[str]) -> np.ndarray:
        return np.array([self.index_of(t) for t in terms], dtype=np.int64)

    @classmethod
    def from_corpus(cls, corpus: Corpus, hash_buckets: int = 2**18) -> "Vocabulary":
        terms: set[str] = set()
        for rec in corpus.records:
            terms.update(rec.document.normalized())
        for profile in corpus.store:
            terms.update(linearize_profile(profile).normalized())
        return cls(sorted(terms), hash_buckets=hash_buckets)
