"""Scene/query corpus export and replay (JSONL, one CorpusRecord per line)."""

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from schemas.config import EnvConfig
from schemas.records import CorpusRecord
from services.scene_env import (
    OracleError,
    Query,
    Scene,
    ground_truth,
    query_from_dict,
    query_to_dict,
    sample_example,
    scene_from_dict,
    scene_to_dict,
)
from utils.jsonl import CorruptJournalError, iter_jsonl, write_jsonl


def corpus_record(scene: Scene, query: Query) -> CorpusRecord:
    scene_data = scene_to_dict(scene)
    return CorpusRecord(
        grid_size=scene_data["grid_size"],
        objects=scene_data["objects"],
        answer_index=ground_truth(scene, query),
        **query_to_dict(query),
    )


def export_corpus(path: Path, n: int, seed: int, env: Optional[EnvConfig] = None) -> int:
    """Write ``n`` generated examples with their oracle answers. Returns the record count."""
    if n < 1:
        raise ValueError("n must be >= 1")
    env = env or EnvConfig()
    rng = np.random.default_rng(seed)
    records = (corpus_record(*sample_example(rng, env)).model_dump() for _ in range(n))
    return write_jsonl(Path(path), records)


def load_corpus(path: Path) -> List[Tuple[Scene, Query]]:
    """
    Read a corpus back; every record is re-checked against the oracle.

    Raises:
        CorruptJournalError: unparsable record or stored answer disagreeing with the oracle
    """
    path = Path(path)
    examples = []
    for number, data in enumerate(iter_jsonl(path), start=1):
        try:
            record = CorpusRecord.model_validate(data)
            scene = scene_from_dict({"grid_size": record.grid_size, "objects": record.objects})
            query = query_from_dict(record.model_dump())
            truth = ground_truth(scene, query)
        except (ValidationError, ValueError, TypeError, OracleError) as exc:
            raise CorruptJournalError(path, number, f"invalid corpus record ({exc})") from exc
        if truth != record.answer_index:
            raise CorruptJournalError(path, number, f"answer_index {record.answer_index} != oracle {truth}")
        examples.append((scene, query))
    if not examples:
        raise CorruptJournalError(path, 0, "corpus is empty")
    return examples
