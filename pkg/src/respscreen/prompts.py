"""Structured prompts for a multimodal backend and normalization of its JSON diagnoses."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import InvalidParameter
from .features import FeatureParams
from .manifest import RECORDING_POINTS, SEXES, RecordEntry

ASTHMA = "asthma"
NOT_ASTHMA = "not_asthma"
INVALID = "invalid"

# Must not contain demographic or spectrogram-parameter wording: ablation
# checks look for those substrings in the whole prompt. The reply template is
# deliberately not valid JSON so an echoed prompt never parses as an answer.
DEFAULT_INSTRUCTION = (
    "Task: decide whether the breathing sound shown in the picture indicates asthma. "
    'Reply only with JSON of the form {"diagnosis": "asthma" or "not asthma"}.'
)

_POSITIVE = {"asthma"}
_NEGATIVE = {"not asthma", "no asthma", "healthy"}


@dataclass(frozen=True)
class PatientMetadata:
    sex: str
    age_years: int
    recording_point: str

    def __post_init__(self):
        if self.sex not in SEXES:
            raise InvalidParameter(f"sex must be one of {SEXES}")
        if isinstance(self.age_years, bool) or not isinstance(self.age_years, int) or not 0 <= self.age_years <= 120:
            raise InvalidParameter("age_years must be an integer in 0..120")
        if self.recording_point not in RECORDING_POINTS:
            raise InvalidParameter(f"recording_point must be one of {RECORDING_POINTS}")

    @classmethod
    def from_entry(cls, entry: RecordEntry) -> "PatientMetadata":
        return cls(entry.sex, entry.age_years, entry.recording_point)


@dataclass(frozen=True)
class PromptSpec:
    name: str = "full"
    include_demographics: bool = True
    include_technical: bool = True
    technical_params: FeatureParams = field(default_factory=FeatureParams)
    encoding: str = "byte"
    instruction_text: str = DEFAULT_INSTRUCTION


def ablation_specs(which: str = "none", params: FeatureParams | None = None) -> list[PromptSpec]:
    """Full prompt plus the requested ablation(s): ``demographics``, ``technical``, ``all`` or ``none``."""
    params = params or FeatureParams()
    specs = [PromptSpec("full", technical_params=params)]
    if which in ("demographics", "all"):
        specs.append(PromptSpec("no_demographics", include_demographics=False, technical_params=params))
    if which in ("technical", "all"):
        specs.append(PromptSpec("no_technical", include_technical=False, technical_params=params))
    if which not in ("none", "demographics", "technical", "all"):
        raise InvalidParameter(f"unknown ablation {which!r}")
    return specs


def _technical_block(p: FeatureParams, encoding: str) -> dict:
    fmt = lambda v: int(v) if float(v).is_integer() else float(v)  # noqa: E731
    r, g, b = p.window_lengths_ms
    return {
        "spectrogram": {
            "type": "log-mel",
            "channels": {"R": {"window_ms": fmt(r)}, "G": {"window_ms": fmt(g)}, "B": {"window_ms": fmt(b)}},
            "hop_ms": fmt(p.hop_ms),
            "n_mels": p.n_mels,
            "frequency_range_hz": [fmt(p.f_min), fmt(p.f_max)],
            "pixel_range": [0, 255] if encoding == "byte" else [0, 1],
            "orientation": "low frequencies at the bottom, time left to right",
        }
    }


def build_prompt(meta: PatientMetadata, spec: PromptSpec = PromptSpec()) -> str:
    """Technical block, then patient block, then the instruction; one line each."""
    lines = []
    if spec.include_technical:
        lines.append(json.dumps(_technical_block(spec.technical_params, spec.encoding), ensure_ascii=False))
    if spec.include_demographics:
        patient = {"sex": meta.sex, "age": meta.age_years, "recording_point": meta.recording_point}
        lines.append(json.dumps({"patient": patient}, ensure_ascii=False))
    lines.append(spec.instruction_text)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DiagnosisOutput:
    label: str
    raw_text: str


def render_diagnosis(label: str) -> str:
    if label == ASTHMA:
        return '{"diagnosis": "asthma"}'
    if label == NOT_ASTHMA:
        return '{"diagnosis": "not asthma"}'
    return '{"diagnosis": null}'


def _balanced_objects(text: str):
    """Yield every ``{...}`` substring with balanced braces, in order of its opening brace."""
    for start in (m.start() for m in re.finditer(r"\{", text)):
        depth, in_str, esc = 0, None, False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == in_str:
                    in_str = None
            elif ch in "\"'":
                in_str = ch
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield text[start : i + 1]
                    break


def _loads_lenient(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        pass
    repaired = re.sub(r",\s*([}\]])", r"\1", s.replace("'", '"'))
    try:
        return json.loads(repaired)
    except json.JSONDecodeError:
        return None


def normalize_label(value) -> str:
    if not isinstance(value, str):
        return INVALID
    v = " ".join(value.casefold().replace("_", " ").replace("-", " ").split()).strip(" .!")
    if v in _POSITIVE:
        return ASTHMA
    if v in _NEGATIVE:
        return NOT_ASTHMA
    return INVALID


def parse_diagnosis(raw: str) -> DiagnosisOutput:
    """First JSON object carrying a ``diagnosis`` key decides the label."""
    for candidate in _balanced_objects(raw or ""):
        obj = _loads_lenient(candidate)
        if isinstance(obj, dict) and "diagnosis" in obj:
            return DiagnosisOutput(normalize_label(obj["diagnosis"]), raw)
    return DiagnosisOutput(INVALID, raw)
