from __future__ import annotations

import json
import logging
import re
import string
import warnings
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol

import polars as pl

from .core import BBox, Sample, iou
from .endpoints import JsonEndpoint, MockEndpointServer
from .errors import BackendError, ConfigError, EndpointError, PrerequisiteError
from .synthworld import WorldConfig, generate_sample, sample_index
from .tokenizer import Vocab, parse_text, response_words

logger = logging.getLogger(__name__)

PENDING = "pending"
ACCEPTED = "accepted"
CORRECTED = "corrected"
REJECTED = "rejected"
REVIEW_STATUSES: tuple[str, ...] = (PENDING, ACCEPTED, CORRECTED, REJECTED)

DIAGNOSIS_SLOTS = frozenset({"descriptor", "category", "bbox"})
REFLECTION_SLOTS = frozenset({"response"})

_CATEGORY_PATTERN = re.compile(r"\bcategory\s+([a-z_]+)")
_BBOX_PATTERN = re.compile(r"\bbbox\s+(\d+)\s+(\d+)\s+(\d+)\s+(\d+)")


def template_slots(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


@dataclass(frozen=True)
class PromptBundle:
    """
    The versioned prompt templates. The diagnosis template receives the image descriptor, the ground-truth category
    and bbox; the reflection template receives the first-pass response.
    """

    diagnosis_template: str = (
        "You are shown a medical image: {descriptor}. The abnormality is a {category} inside bbox {bbox}. "
        "Write a diagnosis that states the abnormality, its bounding box and its category."
    )
    reflection_template: str = (
        "Rewrite the diagnosis so that it first states that an abnormality was detected, then gives the bbox, "
        "and finally names the category, using the form 'abnormality detected bbox x1 y1 x2 y2 category name'. "
        "Diagnosis: {response}"
    )
    version: str = "v1"

    def __post_init__(self) -> None:
        unknown = template_slots(self.diagnosis_template) - DIAGNOSIS_SLOTS
        if unknown:
            raise ConfigError(f"Diagnosis template references unknown slots {sorted(unknown)}")
        unknown = template_slots(self.reflection_template) - REFLECTION_SLOTS
        if unknown:
            raise ConfigError(f"Reflection template references unknown slots {sorted(unknown)}")

    def diagnosis_prompt(self, descriptor: str, category: str, bbox: str) -> str:
        return self.diagnosis_template.format(descriptor=descriptor, category=category, bbox=bbox)

    def reflection_prompt(self, response: str) -> str:
        return self.reflection_template.format(response=response)


@dataclass
class BuildConfig:
    backend: str = "mock"
    endpoint: str = ""
    timeout: float = 60.0
    try_max_times: int = 3
    max_in_flight: int = 4
    iou_threshold: float = 0.99
    num_samples: int = 100
    prompt_version: str = "v1"

    def validate(self) -> None:
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"build.backend must be 'mock' or 'http', got '{self.backend}'")
        if self.backend == "http" and not self.endpoint:
            raise ConfigError("build.endpoint is required for the http backend")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError("build.iou_threshold must lie in [0, 1]")
        if self.max_in_flight < 1 or self.num_samples < 1:
            raise ConfigError("build.max_in_flight and build.num_samples must be positive")


@dataclass(frozen=True)
class GenerationRequest:
    """
    What a generation backend receives. `attachments` verbalises the image for text-only backends and is where a
    deployment would put pixel data.
    """

    kind: str
    prompt: str
    attachments: dict[str, Any] = field(default_factory=dict)


class GenerationBackend(Protocol):
    backend_id: str

    def complete(self, request: GenerationRequest) -> str: ...


class MockBackend:
    """
    A deterministic offline backend. First-pass answers state the category before the bbox, so reflection has real
    reordering work to do; reflections emit the canonical order when both fields can be found.
    """

    backend_id = "mock"

    def complete(self, request: GenerationRequest) -> str:
        match request.kind:
            case "diagnosis":
                category = request.attachments["category"]
                bbox = request.attachments["bbox"]
                return f"The image shows a {category}, so category {category} is reported; it lies in bbox {bbox} and an abnormality is detected."
            case "reflection":
                text = request.attachments["response"].lower()
                category = _CATEGORY_PATTERN.search(text)
                bbox = _BBOX_PATTERN.search(text)
                if category is None or bbox is None:
                    return text
                return f"abnormality detected bbox {' '.join(bbox.groups())} category {category.group(1)}"
            case _:
                raise BackendError(f"Unknown request kind '{request.kind}'")


class HttpBackend:
    """
    Client for a JSON-over-HTTP generation service: request {kind, prompt, attachments}, reply {text}.
    """

    backend_id = "http"

    def __init__(self, endpoint: JsonEndpoint) -> None:
        self.endpoint: JsonEndpoint = endpoint

    def complete(self, request: GenerationRequest) -> str:
        reply = self.endpoint.post({"kind": request.kind, "prompt": request.prompt, "attachments": request.attachments})
        text = reply.get("text")
        if not isinstance(text, str):
            raise BackendError(f"Malformed backend reply: {reply}")
        return text


class MockGenerationServer(MockEndpointServer):
    """
    A generation endpoint answering with the mock backend, for exercising `HttpBackend` offline.
    """

    def __init__(self) -> None:
        self.backend: MockBackend = MockBackend()
        super().__init__(self._reply)

    def _reply(self, request: dict[str, Any]) -> dict[str, Any]:
        generation = GenerationRequest(request["kind"], request["prompt"], request.get("attachments", {}))
        return {"text": self.backend.complete(generation)}


def make_backend(config: BuildConfig) -> GenerationBackend:
    config.validate()
    if config.backend == "mock":
        return MockBackend()
    return HttpBackend(JsonEndpoint(config.endpoint, config.timeout, config.try_max_times))


def image_descriptor(sample: Sample) -> str:
    image = sample.image
    region = " ".join(str(value) for value in image.abnormal_region.quantized())
    return (
        f"a {image.width_patches}x{image.height_patches} patch grid from dataset {sample.dataset_family or 'unknown'} "
        f"with a highlighted region at {region}"
    )


def build_diagnosis(sample: Sample, backend: GenerationBackend, prompts: PromptBundle = PromptBundle()) -> str:
    """
    Ask the backend for a first-pass diagnosis, conditioned on the ground-truth category and bbox.

    :raises EndpointError: on transport failure
    :raises BackendError: on an empty reply
    """
    bbox = " ".join(str(value) for value in sample.gt_bbox.quantized())
    descriptor = image_descriptor(sample)
    request = GenerationRequest(
        kind="diagnosis",
        prompt=prompts.diagnosis_prompt(descriptor, sample.category_name, bbox),
        attachments={"descriptor": descriptor, "category": sample.category_name, "bbox": bbox},
    )
    text = backend.complete(request).strip()
    if not text:
        raise BackendError(f"Backend {backend.backend_id} returned an empty diagnosis for {sample.id}")
    return text


def reflect(raw: str, backend: GenerationBackend, prompts: PromptBundle = PromptBundle()) -> str:
    """
    Ask the backend to restructure a diagnosis into detection, bbox, category order.
    """
    if not raw.strip():
        raise ValueError("reflect needs a non-empty response")
    request = GenerationRequest(kind="reflection", prompt=prompts.reflection_prompt(raw), attachments={"response": raw})
    text = backend.complete(request).strip()
    if not text:
        raise BackendError(f"Backend {backend.backend_id} returned an empty reflection")
    return text


@dataclass(frozen=True)
class Provenance:
    backend: str
    prompt_version: str
    raw: str
    reflected: str
    review_status: str = PENDING
    note: str = ""

    def __post_init__(self) -> None:
        if self.review_status not in REVIEW_STATUSES:
            raise ValueError(f"Unknown review status '{self.review_status}'")


@dataclass(frozen=True)
class BuiltRecord:
    """
    A sample together with the diagnosis text it is trained on and the provenance of that text.
    """

    sample: Sample
    response: str
    provenance: Provenance

    @property
    def id(self) -> str:
        return self.sample.id

    def with_review(self, status: str, note: str = "", response: str | None = None) -> BuiltRecord:
        return BuiltRecord(
            self.sample,
            self.response if response is None else response,
            replace(self.provenance, review_status=status, note=note),
        )

    def to_json(self) -> dict[str, Any]:
        seed = int(self.sample.id.rsplit("-", 1)[0])
        image = self.sample.image
        return {
            "id": self.sample.id,
            "image": {
                "h": image.height_patches,
                "w": image.width_patches,
                "generator": {"seed": seed, "index": sample_index(self.sample.id)},
                "region": list(image.abnormal_region.as_tuple()),
                "category": image.category_id,
            },
            "query": " ".join(self.sample.query),
            "response": self.response,
            "category_name": self.sample.category_name,
            "category_family": self.sample.category_family,
            "dataset_family": self.sample.dataset_family,
            "provenance": {
                "backend": self.provenance.backend,
                "prompt_version": self.provenance.prompt_version,
                "raw": self.provenance.raw,
                "reflected": self.provenance.reflected,
                "review_status": self.provenance.review_status,
                "note": self.provenance.note,
            },
            "split_tags": sorted(self.sample.split_tags),
        }


def synthetic_record(sample: Sample) -> BuiltRecord:
    """
    A generated sample stored with its own reference diagnosis, accepted as is.
    """
    text = " ".join(sample.reference_response)
    return BuiltRecord(sample, text, Provenance("synthworld", "-", text, text, ACCEPTED))


def write_records(path: str | Path, records: Iterable[BuiltRecord]) -> Path:
    """
    Write one JSON object per line with sorted keys, so equal records give byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        for record in records:
            file.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    return path


def write_samples(path: str | Path, samples: Iterable[Sample]) -> Path:
    return write_records(path, (synthetic_record(sample) for sample in samples))


def read_records(path: str | Path, world: WorldConfig) -> list[BuiltRecord]:
    """
    Read a JSONL dataset, regenerating every image from its generator seed and index and checking it against the
    stored region and category.
    """
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"Dataset not found: {path}")
    records: list[BuiltRecord] = []
    with open(path, "r", encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                generator = data["image"]["generator"]
                provenance = Provenance(**data["provenance"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
                raise ConfigError(f"{path}:{line_number} is not a valid record ({error})") from None
            if int(generator["seed"]) != world.seed:
                raise ConfigError(
                    f"{path}:{line_number} was generated with world seed {generator['seed']}, not {world.seed}"
                )
            sample = generate_sample(world, int(generator["index"]))
            if (
                sample.id != data["id"]
                or list(sample.gt_bbox.as_tuple()) != [float(value) for value in data["image"]["region"]]
                or sample.gt_category != int(data["image"]["category"])
            ):
                raise ConfigError(f"{path}:{line_number} does not match the configured world")
            usable = provenance.review_status in (ACCEPTED, CORRECTED)
            if usable and tuple(data["response"].split()) != sample.reference_response:
                raise ConfigError(f"{path}:{line_number} is usable but its response is not the canonical diagnosis")
            sample = replace(
                sample,
                query=tuple(data["query"].split()),
                split_tags=frozenset(data.get("split_tags", [])),
            )
            records.append(BuiltRecord(sample, data["response"], provenance))
    return records


def read_samples(path: str | Path, world: WorldConfig, usable_only: bool = True) -> list[Sample]:
    """
    The samples of a JSONL dataset; by default only accepted and corrected records.
    """
    return [
        record.sample
        for record in read_records(path, world)
        if not usable_only or record.provenance.review_status in (ACCEPTED, CORRECTED)
    ]


@dataclass
class ReviewRules:
    """
    Automatic review: the parsed category must equal the ground truth and the parsed bbox must overlap it with at
    least `iou_threshold`. Generation is conditioned on the ground truth, hence the strict default.
    """

    iou_threshold: float = 0.99


@dataclass
class ReviewResult:
    accepted: list[BuiltRecord]
    rejected: list[BuiltRecord]
    audit: pl.DataFrame

    @property
    def records(self) -> list[BuiltRecord]:
        return sorted([*self.accepted, *self.rejected], key=lambda record: record.id)


AUDIT_SCHEMA: dict[str, Any] = {"id": pl.String, "decision": pl.String, "reason": pl.String, "iou": pl.Float64}


def canonical_text(record: BuiltRecord, vocab: Vocab) -> str:
    """
    The canonical diagnosis text of a record's parsed response. Only schema-valid responses have one.
    """
    parsed = parse_text(vocab, record.response)
    if not parsed.schema_valid:
        raise ValueError(f"Record {record.id} has no schema-valid response")
    return " ".join(response_words(vocab.category_names[parsed.parsed_category], parsed.parsed_bbox, vocab.max_coordinate))


def judge_record(record: BuiltRecord, rules: ReviewRules, vocab: Vocab) -> tuple[bool, str, float]:
    parsed = parse_text(vocab, record.response)
    overlap = iou(parsed.parsed_bbox, record.sample.gt_bbox) if parsed.parsed_bbox is not None else 0.0
    if not parsed.schema_valid:
        return False, "response does not parse under the schema", overlap
    if parsed.parsed_category != record.sample.gt_category:
        return False, "category differs from ground truth", overlap
    if overlap < rules.iou_threshold:
        return False, f"bbox IoU {overlap:.3f} below {rules.iou_threshold}", overlap
    return True, "matches ground truth", overlap


def review_filter(records: Sequence[BuiltRecord], rules: ReviewRules, vocab: Vocab) -> ReviewResult:
    """
    Partition records by the review rules. Passing records are stored with their canonical diagnosis text, and
    corrected records keep their status; every decision is written to the audit table.
    """
    accepted: list[BuiltRecord] = []
    rejected: list[BuiltRecord] = []
    audit: list[dict[str, Any]] = []
    for record in records:
        passed, reason, overlap = judge_record(record, rules, vocab)
        if passed:
            status = CORRECTED if record.provenance.review_status == CORRECTED else ACCEPTED
            accepted.append(record.with_review(status, reason, response=canonical_text(record, vocab)))
        else:
            status = REJECTED
            rejected.append(record.with_review(status, reason))
        audit.append({"id": record.id, "decision": status, "reason": reason, "iou": overlap})
    return ReviewResult(accepted, rejected, pl.DataFrame(audit, schema=AUDIT_SCHEMA))


def _build_one(sample: Sample, backend: GenerationBackend, prompts: PromptBundle) -> BuiltRecord:
    try:
        raw = build_diagnosis(sample, backend, prompts)
    except EndpointError as error:
        warnings.warn(f"WARNING: generation failed for {sample.id}, record left pending ({error})", category=UserWarning)
        return BuiltRecord(sample, "", Provenance(backend.backend_id, prompts.version, "", "", PENDING, str(error)))
    try:
        reflected = reflect(raw, backend, prompts)
    except EndpointError as error:
        warnings.warn(f"WARNING: reflection failed for {sample.id}, record left pending ({error})", category=UserWarning)
        return BuiltRecord(sample, raw, Provenance(backend.backend_id, prompts.version, raw, "", PENDING, str(error)))
    return BuiltRecord(sample, reflected, Provenance(backend.backend_id, prompts.version, raw, reflected))


@dataclass
class PipelineResult:
    records: list[BuiltRecord]
    audit: pl.DataFrame

    @property
    def accepted(self) -> list[BuiltRecord]:
        return [record for record in self.records if record.provenance.review_status in (ACCEPTED, CORRECTED)]


def run_pipeline(
    samples: Sequence[Sample],
    backend: GenerationBackend,
    vocab: Vocab,
    prompts: PromptBundle = PromptBundle(),
    rules: ReviewRules = ReviewRules(),
    max_in_flight: int = 1,
) -> PipelineResult:
    """
    Generate, reflect and review a diagnosis for every sample. Backend calls run on up to `max_in_flight` threads;
    records come back in input order. Records whose backend calls failed stay pending and skip review.
    """
    if max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            built = list(pool.map(lambda sample: _build_one(sample, backend, prompts), samples))
    else:
        built = [_build_one(sample, backend, prompts) for sample in samples]

    reviewable = [record for record in built if record.provenance.reflected]
    review = review_filter(reviewable, rules, vocab)
    reviewed = {record.id: record for record in [*review.accepted, *review.rejected]}
    records = [reviewed.get(record.id, record) for record in built]
    pending = [
        {"id": record.id, "decision": PENDING, "reason": record.provenance.note, "iou": 0.0}
        for record in built
        if not record.provenance.reflected
    ]
    audit = pl.concat([review.audit, pl.DataFrame(pending, schema=AUDIT_SCHEMA)])
    logger.info(
        "Built %d records: %d accepted, %d rejected, %d pending",
        len(records),
        len(review.accepted),
        len(review.rejected),
        len(pending),
    )
    return PipelineResult(records, audit)


def rereflect(
    records: Sequence[BuiltRecord],
    backend: GenerationBackend,
    vocab: Vocab,
    prompts: PromptBundle = PromptBundle(),
    rules: ReviewRules = ReviewRules(),
) -> PipelineResult:
    """
    Re-run reflection and review on every record that is pending or rejected; accepted and corrected records pass
    through untouched.
    """
    updated: list[BuiltRecord] = []
    for record in records:
        if record.provenance.review_status in (ACCEPTED, CORRECTED):
            updated.append(record)
            continue
        if not record.provenance.raw:
            updated.append(_build_one(record.sample, backend, prompts))
            continue
        try:
            reflected = reflect(record.provenance.raw, backend, prompts)
        except EndpointError as error:
            warnings.warn(f"WARNING: reflection failed for {record.id} ({error})", category=UserWarning)
            updated.append(record)
            continue
        updated.append(
            BuiltRecord(record.sample, reflected, replace(record.provenance, reflected=reflected, review_status=PENDING))
        )
    review = review_filter(
        [record for record in updated if record.provenance.review_status == PENDING and record.provenance.reflected],
        rules,
        vocab,
    )
    reviewed = {record.id: record for record in [*review.accepted, *review.rejected]}
    return PipelineResult([reviewed.get(record.id, record) for record in updated], review.audit)


def find_record(records: Sequence[BuiltRecord], record_id: str) -> int:
    for position, record in enumerate(records):
        if record.id == record_id:
            return position
    raise ConfigError(f"No record with id '{record_id}'")


def accept_record(
    records: Sequence[BuiltRecord], record_id: str, vocab: Vocab, rules: ReviewRules = ReviewRules()
) -> list[BuiltRecord]:
    """
    Manual acceptance. The record must still pass the automatic review rules against its ground truth.
    """
    position = find_record(records, record_id)
    record = records[position]
    passed, reason, _ = judge_record(record, rules, vocab)
    if not passed:
        raise ConfigError(f"Record {record_id} does not match its ground truth ({reason}); use --correct instead")
    updated = list(records)
    updated[position] = record.with_review(ACCEPTED, "accepted by reviewer", response=canonical_text(record, vocab))
    return updated


def reject_record(records: Sequence[BuiltRecord], record_id: str) -> list[BuiltRecord]:
    position = find_record(records, record_id)
    updated = list(records)
    updated[position] = records[position].with_review(REJECTED, "rejected by reviewer")
    return updated


def correct_record(records: Sequence[BuiltRecord], record_id: str, category: str, bbox: BBox) -> list[BuiltRecord]:
    """
    Manual correction: replace the response with the canonical diagnosis for (category, bbox). The correction
    must agree with the record's ground truth.
    """
    position = find_record(records, record_id)
    record = records[position]
    if category.lower() != record.sample.category_name or iou(bbox, record.sample.gt_bbox) < 1.0:
        raise ConfigError(f"Correction of {record_id} disagrees with its ground truth")
    text = " ".join(response_words(category, bbox, max(record.sample.image.width_patches, record.sample.image.height_patches)))
    updated = list(records)
    updated[position] = record.with_review(CORRECTED, "corrected by reviewer", response=text)
    return updated
