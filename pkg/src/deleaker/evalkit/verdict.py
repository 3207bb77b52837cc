"""Five-way comparative labels, rank-token parsing and display-order bookkeeping."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class Label(enum.IntEnum):
    """Ordinal 5-point scale; values are the indices used by all statistics."""

    MAJOR_DEGRADE = 1
    MINOR_DEGRADE = 2
    NO_CHANGE = 3
    MINOR_IMPROVE = 4
    MAJOR_IMPROVE = 5


# Reporting order (best first), as in the results tables.
REPORT_ORDER = (Label.MAJOR_IMPROVE, Label.MINOR_IMPROVE, Label.NO_CHANGE,
                Label.MINOR_DEGRADE, Label.MAJOR_DEGRADE)

RANK_TOKENS = ("1min", "1maj", "2min", "2maj", "3")
UNPARSEABLE = "UNPARSEABLE"

_RANK_RE = re.compile(r"rank\s*:\s*(1\s*min|1\s*maj|2\s*min|2\s*maj|3)(?![a-z0-9])", re.IGNORECASE)


def parse_rank(text: str) -> str:
    """Last rank token following a ``Rank:`` marker, or ``UNPARSEABLE``.

    >>> parse_rank("First image looks odd... Rank: 2maj")
    '2maj'
    """
    hits = _RANK_RE.findall(text or "")
    if not hits:
        return UNPARSEABLE
    return re.sub(r"\s+", "", hits[-1]).lower()


# Labels with the candidate shown second.
_SECOND = {
    "2maj": Label.MAJOR_IMPROVE,
    "2min": Label.MINOR_IMPROVE,
    "3": Label.NO_CHANGE,
    "1min": Label.MINOR_DEGRADE,
    "1maj": Label.MAJOR_DEGRADE,
}


def resolve_verdict(token: str, candidate_first: bool) -> Label:
    """Map a raw rank token to a label given where the candidate was shown."""
    if token not in _SECOND:
        raise ValueError(f"not a rank token: {token!r}")
    label = _SECOND[token]
    return Label(6 - label) if candidate_first else label


def randomize_order(seed: int) -> bool:
    """True when the candidate is shown first. Deterministic in ``seed``."""
    return bool(np.random.default_rng([int(seed), 0x0DE7]).integers(2))


@dataclass
class EvalVerdict:
    case_id: str
    label: Optional[Label]
    candidate_first: bool
    raw_token: str
    status: str = "OK"  # OK | FAILED
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    differences: dict = field(default_factory=dict)  # stage -> text
    typicality: dict = field(default_factory=dict)  # "<image>:<entity>" -> text
    ranking_text: str = ""
    attempts: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "OK"

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "status": self.status,
            "label": self.label.name if self.label is not None else None,
            "candidate_first": self.candidate_first,
            "raw_token": self.raw_token,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "differences": dict(sorted(self.differences.items())),
            "typicality": dict(sorted(self.typicality.items())),
            "ranking_text": self.ranking_text,
            "attempts": self.attempts,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EvalVerdict":
        rec = dict(rec)
        rec["label"] = Label[rec["label"]] if rec.get("label") else None
        return cls(**rec)
