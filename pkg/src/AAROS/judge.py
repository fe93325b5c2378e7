from __future__ import annotations

import logging
import math
import threading
import warnings
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Protocol

from .core import Response, Sample
from .endpoints import JsonEndpoint, MockEndpointServer
from .errors import ConfigError, EndpointError, JudgeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str = ""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise JudgeError(f"Judge score must lie in [0, 1], got {self.score}")


@dataclass
class JudgeConfig:
    """
    Which relevance judge scores responses. The reference rubric weights sum to 1.
    """

    backend: str = "reference"
    endpoint: str = ""
    timeout: float = 30.0
    try_max_times: int = 3
    max_in_flight: int = 4
    fallback_to_reference: bool = True
    valid_weight: float = 0.2
    category_weight: float = 0.6
    bbox_weight: float = 0.2

    def validate(self) -> None:
        if self.backend not in ("reference", "remote"):
            raise ConfigError(f"judge.backend must be 'reference' or 'remote', got '{self.backend}'")
        if self.backend == "remote" and not self.endpoint:
            raise ConfigError("judge.endpoint is required for the remote judge")
        weights = (self.valid_weight, self.category_weight, self.bbox_weight)
        if any(weight < 0 for weight in weights) or not math.isclose(sum(weights), 1.0):
            raise ConfigError("judge rubric weights must be non-negative and sum to 1")
        if self.max_in_flight < 1 or self.timeout <= 0:
            raise ConfigError("judge.max_in_flight and judge.timeout must be positive")


class JudgeBackend(Protocol):
    backend_id: str

    def judge(self, response: Response, sample: Sample) -> JudgeVerdict: ...


class ReferenceJudge:
    """
    Rule-based rubric: schema validity, correct category and presence of a bbox each earn their weight.
    """

    backend_id = "reference"

    def __init__(self, valid_weight: float = 0.2, category_weight: float = 0.6, bbox_weight: float = 0.2) -> None:
        self.valid_weight: float = valid_weight
        self.category_weight: float = category_weight
        self.bbox_weight: float = bbox_weight

    def judge(self, response: Response, sample: Sample) -> JudgeVerdict:
        score = 0.0
        reasons: list[str] = []
        if response.schema_valid:
            score += self.valid_weight
            reasons.append("schema valid")
        if response.parsed_category is not None and response.parsed_category == sample.gt_category:
            score += self.category_weight
            reasons.append("category correct")
        if response.parsed_bbox is not None:
            score += self.bbox_weight
            reasons.append("bbox present")
        return JudgeVerdict(min(1.0, score), ", ".join(reasons) or "unparsable response")


class RemoteJudge:
    """
    Client for a JSON-over-HTTP judge: request {query_text, response_text, reference_text}, reply
    {score, rationale}.
    """

    backend_id = "remote"

    def __init__(self, endpoint: JsonEndpoint) -> None:
        self.endpoint: JsonEndpoint = endpoint

    def judge(self, response: Response, sample: Sample) -> JudgeVerdict:
        reply = self.endpoint.post(
            {
                "query_text": " ".join(sample.query),
                "response_text": response.text,
                "reference_text": " ".join(sample.reference_response),
            }
        )
        try:
            score = float(reply["score"])
        except (KeyError, TypeError, ValueError):
            raise JudgeError(f"Malformed judge reply: {reply}") from None
        return JudgeVerdict(score, str(reply.get("rationale", "")))


class FallbackJudge:
    """
    Ask the primary judge and fall back to the reference rubric when the primary fails.
    """

    def __init__(self, primary: JudgeBackend, fallback: ReferenceJudge) -> None:
        self.primary: JudgeBackend = primary
        self.fallback: ReferenceJudge = fallback
        self.backend_id: str = f"{primary.backend_id}+fallback"
        self.fallback_count: int = 0
        self._count_lock: threading.Lock = threading.Lock()

    def judge(self, response: Response, sample: Sample) -> JudgeVerdict:
        try:
            return self.primary.judge(response, sample)
        except EndpointError as error:
            with self._count_lock:
                self.fallback_count += 1
            warnings.warn(
                f"WARNING: relevance judge failed for sample {sample.id}, using the reference rubric ({error})",
                category=UserWarning,
            )
            return self.fallback.judge(response, sample)


def make_judge(config: JudgeConfig) -> JudgeBackend:
    config.validate()
    reference = ReferenceJudge(config.valid_weight, config.category_weight, config.bbox_weight)
    if config.backend == "reference":
        return reference
    remote = RemoteJudge(JsonEndpoint(config.endpoint, config.timeout, config.try_max_times))
    return FallbackJudge(remote, reference) if config.fallback_to_reference else remote


def relevance_judge(response: Response, sample: Sample, backend: JudgeBackend) -> JudgeVerdict:
    """
    The relevance reward of a response, as judged by `backend`.
    """
    return backend.judge(response, sample)


def score_many(
    backend: JudgeBackend,
    pairs: Sequence[tuple[Response, Sample]],
    max_in_flight: int = 1,
) -> list[JudgeVerdict]:
    """
    Judge many (response, sample) pairs, with at most `max_in_flight` requests outstanding. Verdicts keep input order.
    """
    if max_in_flight <= 1 or isinstance(backend, ReferenceJudge):
        return [backend.judge(response, sample) for response, sample in pairs]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda pair: backend.judge(pair[0], pair[1]), pairs))


class MockVerdictServer(MockEndpointServer):
    """
    A judge endpoint replaying canned verdicts keyed by response text, with a default for unknown texts.
    """

    def __init__(self, verdicts: Mapping[str, Mapping[str, Any]], default: Mapping[str, Any] | None = None) -> None:
        self.verdicts: dict[str, dict[str, Any]] = {text: dict(verdict) for text, verdict in verdicts.items()}
        self.default: dict[str, Any] = dict(default or {"score": 0.0, "rationale": "no canned verdict"})
        super().__init__(self._reply)

    def _reply(self, request: dict[str, Any]) -> dict[str, Any]:
        return self.verdicts.get(request.get("response_text", ""), self.default)
