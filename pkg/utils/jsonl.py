"""
JSONL helpers for metrics streams, lifecycle journals and corpus exports.
Readers report the exact line that failed to parse.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List

from utils.structured_logging import to_jsonable


class CorruptJournalError(Exception):
    """Raised when a JSONL file has a line that is not a JSON object."""

    def __init__(self, path: Path, line_number: int, reason: str):
        self.path = Path(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{self.path}: line {line_number}: {reason}")


def dumps_line(record: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(record), sort_keys=True, allow_nan=False)


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> int:
    """Write records to ``path`` (truncating). Returns the number of lines written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(dumps_line(record) + "\n")
            count += 1
    return count


class JsonlAppender:
    """Append-only writer kept open for the duration of a run."""

    def __init__(self, path: Path, truncate: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w" if truncate else "a", encoding="utf-8")

    def append(self, record: Dict[str, Any]) -> None:
        self._handle.write(dumps_line(record) + "\n")

    def flush(self) -> None:
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "JsonlAppender":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    """
    Yield one dict per non-empty line.

    Raises:
        FileNotFoundError: path does not exist
        CorruptJournalError: a line is not valid JSON or not an object
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptJournalError(path, line_number, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorruptJournalError(path, line_number, "expected a JSON object")
            yield record


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))
