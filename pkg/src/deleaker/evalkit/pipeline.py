"""Three-step comparative evaluation: differences, typicality, ranking."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .client import ResponseCache, VLMClient
from .prompts import build_prompts
from .verdict import UNPARSEABLE, EvalVerdict, parse_rank, randomize_order, resolve_verdict


@dataclass(frozen=True)
class ComparisonCase:
    case_id: str
    prompt: str
    entities: tuple[str, str]
    original: object  # image handle (bytes or path)
    candidate: object
    references: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "references", tuple(self.references))
        if len(self.entities) != 2:
            raise ValueError("a comparison case has exactly two entities")
        if len(self.references) not in (0, 2):
            raise ValueError("give one reference image per entity, or none")

    def to_record(self) -> dict:
        def h(x):
            return x if isinstance(x, str) else x.decode("utf-8", "replace")
        return {"case_id": self.case_id, "prompt": self.prompt, "entities": list(self.entities),
                "original": h(self.original), "candidate": h(self.candidate),
                "references": [h(r) for r in self.references], "seed": self.seed}

    @classmethod
    def from_record(cls, rec: dict) -> "ComparisonCase":
        return cls(str(rec["case_id"]), rec.get("prompt", ""), tuple(rec["entities"]),
                   rec["original"], rec["candidate"], tuple(rec.get("references", ())),
                   int(rec.get("seed", 0)))


class _StageFailure(Exception):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage}: {err}")
        self.stage = stage
        self.err = err


def _ask(client: VLMClient, cache: ResponseCache, request) -> str:
    try:
        return cache.get_or_insert(request.digest(), lambda: client.complete(request))
    except Exception as e:  # any client failure fails the whole case
        raise _StageFailure(request.stage, e) from e


def run_comparison(client: VLMClient, case: ComparisonCase, cache: Optional[ResponseCache] = None,
                   max_retries: int = 2) -> EvalVerdict:
    """Evaluate one case; failures are reported in the verdict, never raised."""
    cache = cache if cache is not None else ResponseCache()
    first_is_candidate = randomize_order(case.seed)
    v = EvalVerdict(case.case_id, None, first_is_candidate, "")
    e1, e2 = case.entities
    try:
        refs = {} if case.references else {"reference1": b"", "reference2": b""}
        d1 = _ask(client, cache, build_prompts(case, "step1.1"))
        d2 = _ask(client, cache, build_prompts(case, "step1.2", refs))
        d3 = _ask(client, cache, build_prompts(case, "step1.3", {"source1": d1, "source2": d2}))
        v.differences = {"step1.1": d1, "step1.2": d2, "step1.3": d3}
        for image in ("candidate", "original"):
            for ent in (e1, e2):
                req = build_prompts(case, f"step2.{image}", {"entity": ent, "differences": d3})
                v.typicality[f"{image}:{ent}"] = _ask(client, cache, req)

        def inspection(image):
            return " ".join(f"{ent}: {v.typicality[f'{image}:{ent}']}" for ent in (e1, e2))

        first, second = ("candidate", "original") if first_is_candidate else ("original", "candidate")
        slots = {"first_inspection": inspection(first), "second_inspection": inspection(second),
                 "first": getattr(case, first), "second": getattr(case, second)}
        token = UNPARSEABLE
        for attempt in range(max_retries + 1):
            v.attempts = attempt + 1
            v.ranking_text = _ask(client, cache, build_prompts(case, "step3", slots, attempt))
            token = parse_rank(v.ranking_text)
            if token != UNPARSEABLE:
                break
        v.raw_token = token
        if token == UNPARSEABLE:
            v.status, v.failed_stage, v.error = "FAILED", "step3", "unparseable rank"
            return v
        v.label = resolve_verdict(token, first_is_candidate)
    except _StageFailure as f:
        v.status, v.failed_stage, v.error = "FAILED", f.stage, str(f.err)
    return v


def run_batch(client: VLMClient, cases: Sequence[ComparisonCase], cache: Optional[ResponseCache] = None,
              jobs: int = 1, max_retries: int = 2) -> list[EvalVerdict]:
    """Verdicts in case order; ``jobs`` > 1 evaluates cases on a thread pool."""
    cache = cache if cache is not None else ResponseCache()
    if jobs <= 1:
        return [run_comparison(client, c, cache, max_retries) for c in cases]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(lambda c: run_comparison(client, c, cache, max_retries), cases))


# ---------------------------------------------------------------- files


def read_cases(path: str | Path) -> list[ComparisonCase]:
    """Case manifest: one JSON object per line."""
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(ComparisonCase.from_record(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{n}: bad case record ({e})") from e
    return out


def write_cases(cases: Iterable[ComparisonCase], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(c.to_record(), sort_keys=True) + "\n" for c in cases),
                          encoding="utf-8")


def append_verdicts(verdicts: Iterable[EvalVerdict], path: str | Path) -> None:
    with Path(path).open("a", encoding="utf-8") as f:
        for v in verdicts:
            f.write(json.dumps(v.to_record(), sort_keys=True) + "\n")


def read_verdicts(path: str | Path) -> list[EvalVerdict]:
    return [EvalVerdict.from_record(json.loads(line))
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
