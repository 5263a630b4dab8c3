"""Build pre-training samples from a sealed record store.

A sample is one answer followed by all of its comments in creation-date
order, joined with the reserved ``<RS>`` separator. Cleaning abstracts URLs
and emails, strips markup, and keeps ``<code>`` span contents byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import statistics
from dataclasses import dataclass
from html import unescape
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .dump_ingest import CommentRecord, PostRecord
from .errors import UsageError
from .record_store import RecordStore
from . import shards

logger = logging.getLogger(__name__)

SEPARATOR = "<RS>"
URL_TOKEN = "[URL]"
EMAIL_TOKEN = "[EMAIL]"

DEFAULT_MIN_SCORE = 1
DEFAULT_MIN_COMMENTS = 1
DEFAULT_BUCKET_EDGES = (512, 1024, 2048)

_CODE_OPEN = re.compile(r"<code\b[^>]*>", re.IGNORECASE)
_CODE_CLOSE = re.compile(r"</code\s*>", re.IGNORECASE)
_TAG = re.compile(r"<[^>]*>")
# Scheme-prefixed or www.-prefixed, running to the next whitespace.
_URL = re.compile(r"\b(?:(?:https?|ftp)://|www\.)\S+", re.IGNORECASE)
_EMAIL = re.compile(r"\b[\w.+-]+@[\w-]+(?:\.[\w-]+)+\b")
_WS = re.compile(r"\s+")


@dataclass
class PretrainSample:
    answer_id: int
    text: str
    n_comments: int
    char_len: int = 0
    token_len: Optional[int] = None

    def __post_init__(self):
        if not self.char_len:
            self.char_len = len(self.text)


@dataclass
class CorpusStats:
    n_samples: int
    n_comments_total: int
    comments_per_post_mean: float
    comments_per_post_median: float
    length_histogram: dict[str, int]
    total_tokens: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_comments_total": self.n_comments_total,
            "comments_per_post_mean": self.comments_per_post_mean,
            "comments_per_post_median": self.comments_per_post_median,
            "length_histogram": self.length_histogram,
            "total_tokens": self.total_tokens,
        }


def _clean_fragment(fragment: str, replace_urls: bool, replace_emails: bool) -> str:
    """Non-code text: drop tags, decode entities, abstract URLs/emails."""
    text = _TAG.sub(" ", fragment)
    text = unescape(text)
    if replace_urls:
        text = _URL.sub(URL_TOKEN, text)
    if replace_emails:
        text = _EMAIL.sub(EMAIL_TOKEN, text)
    return _WS.sub(" ", text)


def clean_comment_text(text: str, *, replace_urls: bool = True, replace_emails: bool = True) -> str:
    """Comments are plain text: URL/email abstraction and whitespace
    collapse only, no tag or entity handling.

    A literal separator string in a comment is defused (lowercased) so the
    assembled sample always contains exactly one separator per comment.
    """
    if replace_urls:
        text = _URL.sub(URL_TOKEN, text)
    if replace_emails:
        text = _EMAIL.sub(EMAIL_TOKEN, text)
    text = text.replace(SEPARATOR, SEPARATOR.lower())
    return _WS.sub(" ", text).strip()


def clean_text(body: str, *, replace_urls: bool = True, replace_emails: bool = True) -> str:
    """Clean post HTML while keeping code span contents verbatim.

    ``<code>`` tags themselves are dropped; everything between an open and
    its close tag passes through untouched, URLs included. An open tag with
    no matching close treats the remainder of the body as code (logged).
    """
    pieces: list[str] = []
    pos = 0
    while True:
        open_m = _CODE_OPEN.search(body, pos)
        if open_m is None:
            pieces.append(_clean_fragment(body[pos:], replace_urls, replace_emails))
            break
        pieces.append(_clean_fragment(body[pos : open_m.start()], replace_urls, replace_emails))
        close_m = _CODE_CLOSE.search(body, open_m.end())
        if close_m is None:
            logger.warning("unbalanced <code> tag; keeping remainder as code")
            pieces.append(body[open_m.end() :])
            break
        pieces.append(body[open_m.end() : close_m.start()])
        pos = close_m.end()
    return "".join(pieces).strip()


def filter_answers(
    store: RecordStore,
    *,
    min_score: int = DEFAULT_MIN_SCORE,
    min_comments: int = DEFAULT_MIN_COMMENTS,
) -> Iterator[tuple[PostRecord, list[CommentRecord]]]:
    """Yield answers meeting the score/comment floor with their comments.

    Comments come back creation-date-ascending. Questions and answers below
    either floor are never yielded; an empty result is valid.
    """
    for answer in store.iter_answers(min_score=min_score):
        comments = store.comments_for(answer.id)
        if len(comments) >= min_comments:
            yield answer, comments


def assemble_sample(
    answer: PostRecord,
    comments: Sequence[CommentRecord],
    *,
    replace_urls: bool = True,
    replace_emails: bool = True,
) -> Optional[PretrainSample]:
    """Join cleaned answer text and comments with space-padded separators.

    Comments are re-sorted by (creation_date, id) defensively. Returns None
    (and logs) when every part cleans down to nothing.
    """
    if not comments:
        raise UsageError(f"answer {answer.id}: assemble_sample requires at least one comment")
    ordered = sorted(comments, key=lambda c: (c.creation_date, c.id))
    parts = [clean_text(answer.body, replace_urls=replace_urls, replace_emails=replace_emails)] + [
        clean_comment_text(c.text, replace_urls=replace_urls, replace_emails=replace_emails)
        for c in ordered
    ]
    if all(not p.strip() for p in parts):
        logger.info("answer %d: empty after cleaning, skipped", answer.id)
        return None
    text = f" {SEPARATOR} ".join(parts)
    return PretrainSample(answer_id=answer.id, text=text, n_comments=len(ordered))


def build_samples(
    store: RecordStore,
    *,
    min_score: int = DEFAULT_MIN_SCORE,
    min_comments: int = DEFAULT_MIN_COMMENTS,
    replace_urls: bool = True,
    replace_emails: bool = True,
    counters: Optional[dict] = None,
) -> Iterator[PretrainSample]:
    """Filter + assemble in one stream; skip counts land in ``counters``."""
    if counters is not None:
        counters.setdefault("skipped_empty", 0)
    for answer, comments in filter_answers(store, min_score=min_score, min_comments=min_comments):
        sample = assemble_sample(
            answer, comments, replace_urls=replace_urls, replace_emails=replace_emails
        )
        if sample is None:
            if counters is not None:
                counters["skipped_empty"] += 1
            continue
        yield sample


def _bucket_labels(edges: Sequence[int]) -> list[str]:
    labels = [f"0-{edges[0]}"]
    labels += [f"{lo + 1}-{hi}" for lo, hi in zip(edges, edges[1:])]
    labels.append(f">{edges[-1]}")
    return labels


def _bucket_index(value: int, edges: Sequence[int]) -> int:
    for i, edge in enumerate(edges):
        if value <= edge:
            return i
    return len(edges)


def corpus_stats(
    samples: Iterable[PretrainSample],
    tokenizer=None,
    bucket_edges: Sequence[int] = DEFAULT_BUCKET_EDGES,
) -> CorpusStats:
    """Comment-count statistics plus a sequence-length histogram.

    With a tokenizer, buckets are over token counts (filling ``token_len``
    on the way through); otherwise over character counts. An empty corpus
    gives all-zero stats.
    """
    edges = [int(e) for e in bucket_edges]
    if any(b <= a for a, b in zip(edges, edges[1:])) or not edges:
        raise UsageError(f"bucket_edges must be strictly increasing, got {bucket_edges}")
    labels = _bucket_labels(edges)
    histogram = {label: 0 for label in labels}

    comment_counts: list[int] = []
    total_tokens = 0
    n_samples = 0
    for sample in samples:
        n_samples += 1
        comment_counts.append(sample.n_comments)
        if tokenizer is not None:
            sample.token_len = len(tokenizer.encode(sample.text))
            length = sample.token_len
            total_tokens += length
        else:
            length = sample.char_len
        histogram[labels[_bucket_index(length, edges)]] += 1

    if n_samples == 0:
        return CorpusStats(0, 0, 0.0, 0.0, histogram, 0 if tokenizer else None)
    return CorpusStats(
        n_samples=n_samples,
        n_comments_total=sum(comment_counts),
        comments_per_post_mean=sum(comment_counts) / n_samples,
        # low median so the reported value is one the distribution attains
        comments_per_post_median=float(statistics.median_low(comment_counts)),
        length_histogram=histogram,
        total_tokens=total_tokens if tokenizer is not None else None,
    )


def sample_to_json(sample: PretrainSample) -> str:
    return json.dumps(
        {"answer_id": sample.answer_id, "n_comments": sample.n_comments, "text": sample.text},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )


def read_corpus_jsonl(path: str | Path) -> Iterator[PretrainSample]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            yield PretrainSample(
                answer_id=obj["answer_id"], text=obj["text"], n_comments=obj["n_comments"]
            )


def write_corpus(
    samples: Iterable[PretrainSample],
    path: str | Path,
    fmt: str = "jsonl",
    tokenizer=None,
    manifest_extra: Optional[dict] = None,
) -> dict:
    """Serialize samples to JSON-Lines or binary token shards.

    Returns the manifest (also written next to the output as
    ``<path>.manifest.json``): counts, a sha256 content checksum, and any
    ``manifest_extra`` entries, which are read *after* the sample stream is
    consumed so lazily-updated counters are final. Output bytes are a pure
    function of the input samples.
    """
    path = Path(path)
    n_samples = 0
    n_comments = 0

    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for sample in samples:
                fh.write(sample_to_json(sample) + "\n")
                n_samples += 1
                n_comments += sample.n_comments
        extra = {}
    elif fmt == "shards":
        if tokenizer is None:
            raise UsageError("shard output requires a tokenizer")

        def encoded() -> Iterator[list[int]]:
            nonlocal n_samples, n_comments
            for sample in samples:
                n_samples += 1
                n_comments += sample.n_comments
                yield tokenizer.encode(sample.text)

        _, total_tokens = shards.write_token_shard(path, encoded(), tokenizer.checksum)
        extra = {"total_tokens": total_tokens}
    else:
        raise UsageError(f"unknown corpus format {fmt!r} (expected 'jsonl' or 'shards')")

    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "format": fmt,
        "n_samples": n_samples,
        "n_comments_total": n_comments,
        "sha256": digest,
        **extra,
        **(manifest_extra or {}),
    }
    manifest_path = Path(str(path) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
