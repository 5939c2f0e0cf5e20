"""Inference backends (HTTP and deterministic mocks) and the prompt-ablation runner."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BackendError, InvalidParameter
from .features import RgbSpectrogramImage
from .metrics import MetricsReport, confusion, summarize
from .prompts import ASTHMA, INVALID, NOT_ASTHMA, PatientMetadata, PromptSpec, build_prompt, parse_diagnosis, render_diagnosis

log = logging.getLogger(__name__)

TOKEN_ENV = "RESPSCREEN_BACKEND_TOKEN"


def image_digest(img: RgbSpectrogramImage) -> str:
    h = hashlib.sha256()
    h.update(str(img.pixels.shape).encode())
    h.update(np.ascontiguousarray(img.pixels).tobytes())
    return h.hexdigest()


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class Backend:
    """Image + prompt in, raw text out."""

    def generate(self, img: RgbSpectrogramImage, prompt: str) -> str:
        raise NotImplementedError


class HttpBackend(Backend):
    """POSTs ``{"prompt", "image_base64", "image_format"}`` as JSON; the response body is the answer.

    A bearer token is read from ``RESPSCREEN_BACKEND_TOKEN`` when set.
    """

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff_s: float = 0.5):
        if retries < 0 or timeout <= 0:
            raise InvalidParameter("retries must be >= 0 and timeout positive")
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff_s = backoff_s
        self.token = os.environ.get(TOKEN_ENV)

    def _payload(self, img: RgbSpectrogramImage, prompt: str) -> bytes:
        if img.encoding != "byte":
            img = RgbSpectrogramImage(np.round(np.asarray(img.pixels) * 255).astype(np.uint8), "byte")
        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(img.pixels)).save(buf, format="PNG")
        body = {"prompt": prompt, "image_base64": base64.b64encode(buf.getvalue()).decode("ascii"), "image_format": "png"}
        return json.dumps(body).encode("utf-8")

    def generate(self, img: RgbSpectrogramImage, prompt: str) -> str:
        data = self._payload(img, prompt)
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last = None
        for attempt in range(1, self.retries + 2):
            req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read().decode("utf-8", errors="replace")
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
                log.warning("backend attempt %d/%d failed: %s", attempt, self.retries + 1, exc)
                if attempt <= self.retries and self.backoff_s:
                    time.sleep(self.backoff_s * attempt)
        raise BackendError(f"backend {self.url} failed after {self.retries + 1} attempt(s): {last}", self.retries + 1)


class FixedReplyBackend(Backend):
    def __init__(self, reply: str):
        self.reply = reply

    def generate(self, img, prompt):
        return self.reply


class ImageRuleBackend(Backend):
    """Answers asthma when the mean of ``channel`` exceeds ``threshold`` (pixels scaled to [0, 1])."""

    def __init__(self, threshold: float = 0.5, channel: int = 2):
        self.threshold = threshold
        self.channel = channel

    def generate(self, img, prompt):
        value = float(img.as_float()[..., self.channel].mean())
        return render_diagnosis(ASTHMA if value > self.threshold else NOT_ASTHMA)


class OracleBackend(Backend):
    """Returns the ground-truth label looked up by image content."""

    def __init__(self, labels_by_digest: dict[str, int]):
        self.labels = dict(labels_by_digest)

    def generate(self, img, prompt):
        label = self.labels.get(image_digest(img))
        if label is None:
            return "unknown image"
        return render_diagnosis(ASTHMA if label == 1 else NOT_ASTHMA)


class DemographicsGatedBackend(Backend):
    """Answers not-asthma whenever the prompt carries no patient block; otherwise defers to ``inner``."""

    def __init__(self, inner: Backend):
        self.inner = inner

    def generate(self, img, prompt):
        if '"patient"' not in prompt:
            return render_diagnosis(NOT_ASTHMA)
        return self.inner.generate(img, prompt)


def infer(backend: Backend, img: RgbSpectrogramImage, prompt: str) -> str:
    """Raw backend text, verbatim. Non-``BackendError`` failures are wrapped."""
    try:
        return backend.generate(img, prompt)
    except BackendError:
        raise
    except Exception as exc:  # noqa: BLE001 - any backend fault becomes a per-item error
        raise BackendError(f"{type(exc).__name__}: {exc}", 1) from exc


@dataclass(frozen=True)
class AblationItem:
    item_id: str
    image: RgbSpectrogramImage
    meta: PatientMetadata
    label: int  # 1 = asthma


@dataclass
class AblationResult:
    spec_name: str
    report: MetricsReport
    n_items: int
    n_invalid: int
    n_backend_errors: int
    item_ids: list[str]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec_name,
            "n_items": self.n_items,
            "n_invalid": self.n_invalid,
            "invalid_rate": self.n_invalid / self.n_items if self.n_items else None,
            "n_backend_errors": self.n_backend_errors,
            "metrics": self.report.to_dict(),
        }


def _run_one(backend: Backend, item: AblationItem, spec: PromptSpec) -> dict:
    prompt = build_prompt(item.meta, spec)
    record = {"item_id": item.item_id, "spec": spec.name, "prompt_hash": prompt_hash(prompt)}
    try:
        raw = infer(backend, item.image, prompt)
        record.update(raw_output=raw, parsed_label=parse_diagnosis(raw).label, error=None, attempts=None)
    except BackendError as exc:
        record.update(raw_output=None, parsed_label=INVALID, error=str(exc), attempts=exc.attempts)
    return record


def run_ablation(
    items: list[AblationItem],
    backend: Backend,
    specs: list[PromptSpec],
    log_path: str | Path | None = None,
    max_workers: int = 1,
) -> dict[str, AblationResult]:
    """Evaluate every spec over the same items, in the same order.

    Invalid outputs and backend failures count as wrong predictions and are
    tallied separately. Each call is logged as one JSON line.
    """
    if not items:
        raise InvalidParameter("no items to evaluate")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidParameter("prompt spec names must be unique")
    labels = np.array([it.label for it in items], dtype=np.int64)
    results: dict[str, AblationResult] = {}
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for spec in specs:
            if max_workers > 1:
                with ThreadPoolExecutor(max_workers=max_workers) as pool:
                    records = list(pool.map(lambda it: _run_one(backend, it, spec), items))
            else:
                records = [_run_one(backend, it, spec) for it in items]
            preds = []
            for rec, y in zip(records, labels):
                lab = rec["parsed_label"]
                preds.append(1 if lab == ASTHMA else 0 if lab == NOT_ASTHMA else 1 - int(y))
                if log_fh:
                    log_fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n_invalid = sum(r["parsed_label"] == INVALID for r in records)
            n_err = sum(r["error"] is not None for r in records)
            results[spec.name] = AblationResult(
                spec.name, summarize(confusion(labels, preds)), len(items), n_invalid, n_err, [r["item_id"] for r in records]
            )
    finally:
        if log_fh:
            log_fh.close()
    return results
