"""Prometheus helpers: shared registry re-exports and a file snapshot writer."""

from pathlib import Path

from prometheus_client import (
    REGISTRY,
    Counter,
    Histogram,
    generate_latest,
)


def write_snapshot(path: Path, registry=REGISTRY) -> Path:
    """Write the text exposition of ``registry`` to ``path`` (no HTTP endpoint)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(generate_latest(registry))
    return path


__all__ = [
    "REGISTRY",
    "Counter",
    "Histogram",
    "generate_latest",
    "write_snapshot",
]
