"""Comparative VLM evaluation of leakage mitigation and rater statistics."""
from .client import ClientError, HttpClient, MockClient, ResponseCache, VLMClient
from .pipeline import (ComparisonCase, append_verdicts, read_cases, read_verdicts, run_batch,
                       run_comparison, write_cases)
from .prompts import MissingSlotError, Request, build_prompts, load_templates, system_prompt
from .stats import fleiss_kappa_qw, majority_vote, spearman_rho
from .verdict import (RANK_TOKENS, REPORT_ORDER, UNPARSEABLE, EvalVerdict, Label, parse_rank,
                      randomize_order, resolve_verdict)

__all__ = [
    "ClientError", "HttpClient", "MockClient", "ResponseCache", "VLMClient",
    "ComparisonCase", "append_verdicts", "read_cases", "read_verdicts", "run_batch",
    "run_comparison", "write_cases", "MissingSlotError", "Request", "build_prompts",
    "load_templates", "system_prompt", "fleiss_kappa_qw", "majority_vote", "spearman_rho",
    "RANK_TOKENS", "REPORT_ORDER", "UNPARSEABLE", "EvalVerdict", "Label", "parse_rank",
    "randomize_order", "resolve_verdict",
]
