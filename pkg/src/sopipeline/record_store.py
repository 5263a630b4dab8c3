"""Indexed on-disk store for dump records.

The original workflow loads dump tables into a SQL database; here the store
is an embedded sqlite file inside a small versioned directory, giving the
same query surface (post by id, answers by parent, comments/history by post)
without an external database server. A sealed store is read-only and safe
for concurrent readers.
"""

from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .dump_ingest import (
    CommentRecord,
    HistoryType,
    PostHistoryRecord,
    PostRecord,
    PostType,
    format_timestamp,
    parse_timestamp,
)
from .errors import DuplicateIdError, StoreError

FORMAT_VERSION = 1
_DB_NAME = "records.db"
_META_NAME = "meta.json"
_REPORT_NAME = "load_report.txt"
_INSERT_BATCH = 1000

_SCHEMA = """
CREATE TABLE posts (
    id INTEGER PRIMARY KEY,
    post_type_id INTEGER NOT NULL,
    parent_id INTEGER,
    accepted_answer_id INTEGER,
    score INTEGER NOT NULL,
    title TEXT,
    body TEXT NOT NULL,
    tags TEXT,
    creation_date TEXT NOT NULL,
    last_edit_date TEXT
);
CREATE TABLE comments (
    id INTEGER PRIMARY KEY,
    post_id INTEGER NOT NULL,
    text TEXT NOT NULL,
    score INTEGER NOT NULL,
    creation_date TEXT NOT NULL
);
CREATE TABLE post_history (
    id INTEGER PRIMARY KEY,
    post_id INTEGER NOT NULL,
    history_type_id INTEGER NOT NULL,
    text TEXT NOT NULL,
    creation_date TEXT NOT NULL
);
CREATE INDEX idx_posts_parent ON posts(parent_id);
CREATE INDEX idx_comments_post ON comments(post_id, creation_date, id);
CREATE INDEX idx_history_post ON post_history(post_id, creation_date, id);
"""


@dataclass
class LoadReport:
    """Bookkeeping for one build: row counts, skips, referential gaps."""

    n_posts: int = 0
    n_comments: int = 0
    n_history: int = 0
    skipped: list[tuple[str, Optional[int], str]] = field(default_factory=list)
    dangling_comment_ids: list[int] = field(default_factory=list)
    dangling_history_ids: list[int] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"posts loaded: {self.n_posts}",
            f"comments loaded: {self.n_comments}",
            f"history rows loaded: {self.n_history}",
            f"rows skipped: {len(self.skipped)}",
        ]
        for table, row_id, reason in self.skipped:
            lines.append(f"  skip {table} id={row_id}: {reason}")
        lines.append(f"dangling comments (post_id not in posts): {len(self.dangling_comment_ids)}")
        for cid in self.dangling_comment_ids:
            lines.append(f"  comment {cid}")
        lines.append(f"dangling history rows (post_id not in posts): {len(self.dangling_history_ids)}")
        for hid in self.dangling_history_ids:
            lines.append(f"  history {hid}")
        return "\n".join(lines) + "\n"


def _post_to_row(p: PostRecord) -> tuple:
    return (
        p.id,
        p.post_type_id,
        p.parent_id,
        p.accepted_answer_id,
        p.score,
        p.title,
        p.body,
        json.dumps(p.tags) if p.tags is not None else None,
        format_timestamp(p.creation_date),
        format_timestamp(p.last_edit_date) if p.last_edit_date else None,
    )


def _row_to_post(row: sqlite3.Row) -> PostRecord:
    return PostRecord(
        id=row["id"],
        post_type=PostType.from_id(row["post_type_id"]),
        post_type_id=row["post_type_id"],
        parent_id=row["parent_id"],
        accepted_answer_id=row["accepted_answer_id"],
        score=row["score"],
        title=row["title"],
        body=row["body"],
        tags=json.loads(row["tags"]) if row["tags"] is not None else None,
        creation_date=parse_timestamp(row["creation_date"]),
        last_edit_date=parse_timestamp(row["last_edit_date"]) if row["last_edit_date"] else None,
    )


def _row_to_comment(row: sqlite3.Row) -> CommentRecord:
    return CommentRecord(
        id=row["id"],
        post_id=row["post_id"],
        text=row["text"],
        score=row["score"],
        creation_date=parse_timestamp(row["creation_date"]),
    )


def _row_to_history(row: sqlite3.Row) -> PostHistoryRecord:
    return PostHistoryRecord(
        id=row["id"],
        post_id=row["post_id"],
        history_type=HistoryType.from_id(row["history_type_id"]),
        history_type_id=row["history_type_id"],
        text=row["text"],
        creation_date=parse_timestamp(row["creation_date"]),
    )


class RecordStore:
    """Read view over a sealed store directory."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.load_report: Optional[LoadReport] = None
        meta_path = self.path / _META_NAME
        if not meta_path.exists():
            raise StoreError(f"not a record store: {self.path} (missing {_META_NAME})")
        self.meta = json.loads(meta_path.read_text())
        if self.meta.get("format_version") != FORMAT_VERSION:
            raise StoreError(f"unsupported store version {self.meta.get('format_version')}")
        if not self.meta.get("sealed"):
            raise StoreError(f"store at {self.path} was never sealed")
        self._conn = sqlite3.connect(f"file:{self.path / _DB_NAME}?mode=ro", uri=True)
        self._conn.row_factory = sqlite3.Row

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "RecordStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def sealed(self) -> bool:
        return True

    # -- counts ---------------------------------------------------------

    def count(self, table: str) -> int:
        if table not in ("posts", "comments", "post_history"):
            raise StoreError(f"unknown table {table!r}")
        return self._conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]

    # -- primary lookups --------------------------------------------------

    def get_post(self, post_id: int) -> Optional[PostRecord]:
        row = self._conn.execute("SELECT * FROM posts WHERE id = ?", (post_id,)).fetchone()
        return _row_to_post(row) if row else None

    def iter_posts(self) -> Iterator[PostRecord]:
        for row in self._conn.execute("SELECT * FROM posts ORDER BY id"):
            yield _row_to_post(row)

    def iter_answers(self, min_score: Optional[int] = None) -> Iterator[PostRecord]:
        sql = "SELECT * FROM posts WHERE post_type_id = 2"
        args: tuple = ()
        if min_score is not None:
            sql += " AND score >= ?"
            args = (min_score,)
        for row in self._conn.execute(sql + " ORDER BY id", args):
            yield _row_to_post(row)

    # -- secondary indices ------------------------------------------------

    def answer_ids_for(self, question_id: int) -> list[int]:
        rows = self._conn.execute(
            "SELECT id FROM posts WHERE parent_id = ? ORDER BY id", (question_id,)
        ).fetchall()
        return [r["id"] for r in rows]

    def comments_for(self, post_id: int) -> list[CommentRecord]:
        rows = self._conn.execute(
            "SELECT * FROM comments WHERE post_id = ? ORDER BY creation_date, id", (post_id,)
        ).fetchall()
        return [_row_to_comment(r) for r in rows]

    def comment_count_for(self, post_id: int) -> int:
        return self._conn.execute(
            "SELECT COUNT(*) FROM comments WHERE post_id = ?", (post_id,)
        ).fetchone()[0]

    def history_for(self, post_id: int) -> list[PostHistoryRecord]:
        rows = self._conn.execute(
            "SELECT * FROM post_history WHERE post_id = ? ORDER BY creation_date, id", (post_id,)
        ).fetchall()
        return [_row_to_history(r) for r in rows]

    def load_report_text(self) -> str:
        report = self.path / _REPORT_NAME
        return report.read_text() if report.exists() else ""


def _insert_all(
    conn: sqlite3.Connection,
    table: str,
    sql: str,
    rows: Iterable[tuple],
) -> int:
    """Batch-insert with commit per batch, naming the id on duplicates."""
    n = 0
    batch: list[tuple] = []

    def flush() -> None:
        nonlocal n
        if not batch:
            return
        try:
            conn.executemany(sql, batch)
            conn.commit()
        except sqlite3.IntegrityError:
            # Replay row by row against committed state to find the culprit.
            conn.rollback()
            for row in batch:
                try:
                    conn.execute(sql, row)
                except sqlite3.IntegrityError as exc:
                    conn.rollback()
                    if "UNIQUE" in str(exc):
                        raise DuplicateIdError(table, row[0]) from exc
                    raise StoreError(f"integrity error in {table}: {exc}") from exc
            conn.commit()
        n += len(batch)
        batch.clear()

    for row in rows:
        batch.append(row)
        if len(batch) >= _INSERT_BATCH:
            flush()
    flush()
    return n


def build_store(
    post_iter: Iterable[PostRecord],
    comment_iter: Iterable[CommentRecord],
    history_iter: Iterable[PostHistoryRecord],
    path: str | Path,
    *,
    extra_report_lines: Optional[list[str]] = None,
) -> RecordStore:
    """Load parsed records into a fresh sealed store at ``path``.

    Rebuilds from scratch each time, so re-running on identical inputs is
    idempotent. Comments and history rows whose ``post_id`` is unknown are
    kept but listed in the load report. Duplicate primary ids abort with
    :class:`DuplicateIdError`.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    db_path = path / _DB_NAME
    if db_path.exists():
        db_path.unlink()

    conn = sqlite3.connect(db_path)
    try:
        conn.executescript(_SCHEMA)
        report = LoadReport()
        report.n_posts = _insert_all(
            conn,
            "posts",
            "INSERT INTO posts VALUES (?,?,?,?,?,?,?,?,?,?)",
            (_post_to_row(p) for p in post_iter),
        )
        report.n_comments = _insert_all(
            conn,
            "comments",
            "INSERT INTO comments VALUES (?,?,?,?,?)",
            (
                (c.id, c.post_id, c.text, c.score, format_timestamp(c.creation_date))
                for c in comment_iter
            ),
        )
        report.n_history = _insert_all(
            conn,
            "post_history",
            "INSERT INTO post_history VALUES (?,?,?,?,?)",
            (
                (h.id, h.post_id, h.history_type_id, h.text, format_timestamp(h.creation_date))
                for h in history_iter
            ),
        )

        report.dangling_comment_ids = [
            r[0]
            for r in conn.execute(
                "SELECT c.id FROM comments c LEFT JOIN posts p ON c.post_id = p.id"
                " WHERE p.id IS NULL ORDER BY c.id"
            )
        ]
        report.dangling_history_ids = [
            r[0]
            for r in conn.execute(
                "SELECT h.id FROM post_history h LEFT JOIN posts p ON h.post_id = p.id"
                " WHERE p.id IS NULL ORDER BY h.id"
            )
        ]
        conn.commit()
    finally:
        conn.close()

    text = report.to_text()
    if extra_report_lines:
        text += "\n".join(extra_report_lines) + "\n"
    (path / _REPORT_NAME).write_text(text)
    meta = {
        "format_version": FORMAT_VERSION,
        "sealed": True,
        "counts": {
            "posts": report.n_posts,
            "comments": report.n_comments,
            "post_history": report.n_history,
        },
    }
    (path / _META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    store = RecordStore(path)
    store.load_report = report
    return store
