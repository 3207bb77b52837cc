"""Prompt construction from the stored evaluation templates."""
from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Union

ImageHandle = Union[bytes, str]


class MissingSlotError(KeyError):
    pass


@dataclass(frozen=True)
class Request:
    """What is sent to a VLM: a system text plus ordered text / image parts.

    ``parts`` holds ``("text", str)`` and ``("image", handle)`` tuples; image
    handles are opaque (bytes or a path string). ``stage`` and ``attempt`` are
    bookkeeping that also enter the cache digest, so a re-query is a new request.
    """

    system: str
    parts: tuple
    stage: str = ""
    attempt: int = 0

    def texts(self) -> list[str]:
        return [p for kind, p in self.parts if kind == "text"]

    def images(self) -> list[ImageHandle]:
        return [p for kind, p in self.parts if kind == "image"]

    @property
    def text(self) -> str:
        return "".join(self.texts())

    def digest(self) -> str:
        h = hashlib.sha256()
        head = json.dumps({"system": self.system, "stage": self.stage, "attempt": self.attempt},
                          sort_keys=True).encode()
        h.update(len(head).to_bytes(8, "little") + head)
        for kind, p in self.parts:
            blob = p if isinstance(p, bytes) else str(p).encode("utf-8")
            tag = b"B" if isinstance(p, bytes) else kind[0].encode()
            h.update(tag + len(blob).to_bytes(8, "little") + blob)
        return h.hexdigest()


@lru_cache(maxsize=None)
def load_templates() -> dict:
    text = resources.files("deleaker.evalkit").joinpath("templates.json").read_text(encoding="utf-8")
    doc = json.loads(text)
    doc.pop("_comment", None)
    return doc


STAGES = ("step1.1", "step1.2", "step1.3", "step2.candidate", "step2.original", "step3", "leak_check")


def template_slots(stage: str) -> set[str]:
    names = set()
    for part in load_templates()[stage]:
        if isinstance(part, str):
            names |= {f for _, f, _, _ in string.Formatter().parse(part) if f}
        else:
            names.add(part["image"])
    return names


def case_slots(case) -> dict:
    """Slots every stage can draw from a comparison case."""
    e1, e2 = case.entities
    slots = {"entity1": e1, "entity2": e2, "text_entities": f"{e1} and {e2}",
             "candidate": case.candidate, "original": case.original}
    for k, ref in enumerate(case.references, start=1):
        slots[f"reference{k}"] = ref
    return slots


def render(stage: str, slots: dict, attempt: int = 0) -> Request:
    """Fill one template; every slot it names must be present."""
    templates = load_templates()
    if stage not in templates or stage == "system":
        raise ValueError(f"unknown stage {stage!r}")
    missing = sorted(s for s in template_slots(stage) if slots.get(s) is None)
    if missing:
        raise MissingSlotError(f"stage {stage} is missing slot(s): {', '.join(missing)}")
    parts = []
    for part in templates[stage]:
        if isinstance(part, str):
            parts.append(("text", part.format(**{k: v for k, v in slots.items() if isinstance(v, str)})))
        else:
            parts.append(("image", slots[part["image"]]))
    return Request(templates["system"][0], tuple(parts), stage, attempt)


def build_prompts(case, stage: str, slots: dict | None = None, attempt: int = 0) -> Request:
    """Request for ``stage`` of ``case``; ``slots`` adds or overrides case-derived slots."""
    merged = case_slots(case) if case is not None else {}
    merged.update(slots or {})
    return render(stage, merged, attempt)


def system_prompt() -> str:
    return load_templates()["system"][0]
