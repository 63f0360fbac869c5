from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel


class StepMetrics(BaseModel):
    step: int
    mean_r_acc: float
    mean_r_fmt: float
    mean_r_cons: float
    mean_total: float
    kl: float
    selected_op: Optional[str] = None
    spot_check: bool = False
    degenerate: bool = False
    generation_calls: int
    active_ops: List[str] = []


class JournalEntry(BaseModel):
    """One lifecycle state change of a pool operation."""
    step: int
    op_id: str
    from_state: str
    to_state: str
    consistency: float


class ProbeReport(BaseModel):
    op_id: str
    consistency: float
    consistent_count: int
    sample_count: int
    step: int = 0


class ProbeLogEntry(BaseModel):
    """Per-checkpoint probe result with the state the op ended the checkpoint in."""
    step: int
    op_id: str
    consistency: float
    sample_count: int
    state: str


class CorpusRecord(BaseModel):
    grid_size: int
    objects: List[Dict[str, Any]]
    kind: str
    subject_ref: Dict[str, Any]
    object_ref: Optional[Dict[str, Any]] = None
    options: List[str]
    template_variant: int
    negated: bool
    answer_index: int


class RunManifest(BaseModel):
    config: Dict[str, Any]
    seed: int
    tool_version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    outputs: Dict[str, str]
    resumed_from: Optional[str] = None


class VerificationSummary(BaseModel):
    claim: str
    instances: int
    violations: int
    tightest_case: Optional[Dict[str, Any]] = None
    details: Dict[str, Any] = {}
