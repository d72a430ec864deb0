"""Caption -> structured human-behaviour semantics -> final prompt.

Two remote models are driven over a chat-completions style HTTP API: a
captioner that describes an image, and an extractor that turns the caption
into a five-key JSON object guided by one few-shot example.  The composer
joins four of those fields into the training prompt.

Endpoints whose URL starts with ``mock:`` are answered in process from a
fixture table keyed by :func:`request_hash`.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .errors import EmptyResponse, MalformedJson, MissingField, Network, SesaError, Timeout

log = logging.getLogger(__name__)

FIELDS = ("key_entities", "pose", "action", "hand_action", "env")
PROMPT_FIELDS = ("pose", "action", "hand_action", "env")
SEPARATOR = ". "
MAX_FIELD_LENGTH = 512
KEY_ENV = "SESA_ENDPOINT_KEY"

CAPTION_INSTRUCTION = (
    "Describe the image in detail, focusing on the people in it: their pose, what they are "
    "doing, what their hands are doing, and where they are."
)
EXTRACT_INSTRUCTION = (
    "Read the image description and think step by step. First list the key entities. Then "
    "describe the person's body pose, the person's action, what the hands are doing, and the "
    "environment. Leave out objects that do not matter for the person. Answer with a single "
    "JSON object with exactly the keys key_entities, pose, action, hand_action, env, each a "
    "string, and nothing else."
)
REPAIR_INSTRUCTION = "Your previous answer could not be used: {error}. Reply again with only the JSON object."

FEW_SHOT_INPUT = (
    "In the image, the person is holding a pink umbrella with one hand and appears to be "
    "smiling while looking towards the camera..."
)
FEW_SHOT_OUTPUT = {
    "key_entities": "person, umbrella",
    "pose": "standing casually",
    "action": "appears to be smiling while looking towards the camera",
    "hand_action": "One hand is holding a pink umbrella and wraps around the handle...",
    "env": "possibly at sunny beach",
}
DEFAULT_FEW_SHOT = (FEW_SHOT_INPUT, FEW_SHOT_OUTPUT)


# ---------------------------------------------------------------- records

def normalize_text(text):
    return " ".join(str(text).split())


@dataclass
class SemanticsRecord:
    key_entities: str
    pose: str
    action: str
    hand_action: str
    env: str
    repair_count: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        for name in FIELDS:
            value = getattr(self, name)
            if not isinstance(value, str):
                raise MalformedJson(f"field {name!r} is {type(value).__name__}, expected string")
            if len(value) > MAX_FIELD_LENGTH:
                raise MalformedJson(f"field {name!r} longer than {MAX_FIELD_LENGTH} characters")
        if not self.hand_action.strip():
            raise MissingField("hand_action")

    def to_dict(self):
        return {name: getattr(self, name) for name in FIELDS}

    @classmethod
    def from_json_object(cls, obj):
        if not isinstance(obj, dict):
            raise MalformedJson(f"expected a JSON object, got {type(obj).__name__}")
        for name in FIELDS:
            if name not in obj:
                raise MissingField(name)
        extra = sorted(set(obj) - set(FIELDS))
        if extra:
            log.warning("dropping unexpected semantics keys %s", extra)
        values = {}
        for name in FIELDS:
            v = obj[name]
            if isinstance(v, list) and all(isinstance(x, str) for x in v):
                v = ", ".join(v)
            values[name] = v
        return cls(**values)


@dataclass(frozen=True)
class PromptComposition:
    final_text: str
    source: SemanticsRecord
    separator: str = SEPARATOR


def _clean_field(text):
    text = normalize_text(text)
    # one trailing full stop would double up with the separator; ellipses stay
    if text.endswith(".") and not text.endswith(".."):
        text = text[:-1].rstrip()
    return text


def compose(record, separator=SEPARATOR):
    """Join pose, action, hand action and environment into the final prompt."""
    parts = [_clean_field(getattr(record, name)) for name in PROMPT_FIELDS]
    # keep an ellipsis visibly apart from the separator's own full stop
    parts = [p + " " if p.endswith("..") and i < len(parts) - 1 else p for i, p in enumerate(parts)]
    return PromptComposition(separator.join(parts), record, separator)


def split_composition(text, separator=SEPARATOR):
    """Inverse of :func:`compose` for fields that do not contain the separator.

    A separator directly after another full stop belongs to an ellipsis and
    is not a split point.
    """
    pattern = "(?<!\\.)" + re.escape(separator) if separator.startswith(".") else re.escape(separator)
    return dict(zip(PROMPT_FIELDS, (p.strip() for p in re.split(pattern, text))))


# ---------------------------------------------------------------- wire

@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model: str
    role: str
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self):
        if self.role not in ("captioner", "extractor"):
            raise ValueError(f"unknown endpoint role {self.role!r}")
        if self.retries < 0 or not self.timeout > 0:
            raise ValueError("retries must be >= 0 and timeout > 0")

    @property
    def url(self):
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"


def request_body(model, messages):
    return {"model": model, "messages": messages}


def request_hash(model, messages):
    """Stable key for a request: SHA-256 of its canonical JSON body."""
    raw = json.dumps(request_body(model, messages), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


class FixtureTable:
    """Canned responses for ``mock:`` endpoints, keyed by request hash."""

    def __init__(self, responses=None):
        self.responses = dict(responses or {})

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.responses, fh, indent=2, sort_keys=True)

    def add(self, model, messages, content):
        self.responses[request_hash(model, messages)] = content
        return self

    def lookup(self, model, messages):
        return self.responses.get(request_hash(model, messages))


class ChatClient:
    """POSTs chat requests with a bounded retry budget.

    Every attempt is appended to ``self.log`` as a dict with the endpoint,
    attempt number, outcome and request hash.  ``transport`` is passed to
    ``httpx.Client`` (tests use ``httpx.MockTransport``).
    """

    def __init__(self, fixtures=None, transport=None, backoff=0.5, sleep=time.sleep):
        self.fixtures = fixtures if isinstance(fixtures, FixtureTable) else FixtureTable(fixtures)
        self.transport = transport
        self.backoff = backoff
        self.sleep = sleep
        self.log = []

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _record(self, endpoint, attempt, outcome, key):
        entry = {"endpoint": endpoint.base_url, "role": endpoint.role, "attempt": attempt,
                 "outcome": outcome, "request": key}
        self.log.append(entry)
        log.info("%s attempt %d: %s", endpoint.base_url, attempt, outcome)

    def _mock(self, endpoint, messages, key, attempt):
        content = self.fixtures.lookup(endpoint.model, messages)
        if content is None:
            self._record(endpoint, attempt, "no fixture", key)
            raise Network("no fixture for request " + key[:12], endpoint.base_url, attempt, status=404)
        self._record(endpoint, attempt, "ok", key)
        return content

    def chat(self, endpoint, messages):
        """Return the assistant message text for ``messages``."""
        key = request_hash(endpoint.model, messages)
        if endpoint.base_url.startswith("mock:"):
            content = self._mock(endpoint, messages, key, 1)
            if not str(content).strip():
                raise EmptyResponse("empty response", endpoint.base_url, 1)
            return content
        body = request_body(endpoint.model, messages)
        attempts = endpoint.retries + 1
        last = None
        with httpx.Client(transport=self.transport, timeout=endpoint.timeout) as client:
            for attempt in range(1, attempts + 1):
                try:
                    resp = client.post(endpoint.url, json=body, headers=self._headers())
                except httpx.TimeoutException as exc:
                    self._record(endpoint, attempt, "timeout", key)
                    last = Timeout(f"timed out ({exc.__class__.__name__})", endpoint.base_url, attempt)
                except httpx.TransportError as exc:
                    self._record(endpoint, attempt, f"transport error: {exc.__class__.__name__}", key)
                    last = Network(f"transport error: {exc}", endpoint.base_url, attempt)
                else:
                    self._record(endpoint, attempt, f"http {resp.status_code}", key)
                    if resp.status_code == 200:
                        return self._content(resp, endpoint, attempt)
                    last = Network(f"http status {resp.status_code}", endpoint.base_url, attempt,
                                   status=resp.status_code)
                    if resp.status_code < 500 and resp.status_code != 429:
                        raise last
                if attempt < attempts and self.backoff:
                    self.sleep(self.backoff * attempt)
        raise last

    @staticmethod
    def _content(resp, endpoint, attempt):
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise EmptyResponse("response lacks choices[0].message.content", endpoint.base_url, attempt) from None
        if not isinstance(content, str) or not content.strip():
            raise EmptyResponse("empty response", endpoint.base_url, attempt)
        return content


# ---------------------------------------------------------------- pipeline stages

def caption_messages(image_bytes, mime="image/x-portable-pixmap"):
    data = base64.b64encode(image_bytes).decode("ascii")
    return [
        {"role": "system", "content": CAPTION_INSTRUCTION},
        {"role": "user", "content": [
            {"type": "text", "text": "Describe this image."},
            {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}},
        ]},
    ]


def _mime(path):
    return {".pgm": "image/x-portable-graymap", ".ppm": "image/x-portable-pixmap", ".png": "image/png",
            ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}.get(Path(path).suffix.lower(), "application/octet-stream")


def caption(image_path, endpoint, client):
    """Caption one image file with the captioner endpoint."""
    if endpoint.role != "captioner":
        raise ValueError(f"endpoint role is {endpoint.role}, expected captioner")
    messages = caption_messages(Path(image_path).read_bytes(), _mime(image_path))
    return client.chat(endpoint, messages).strip()


def extract_messages(caption_text, few_shot=DEFAULT_FEW_SHOT):
    example_in, example_out = few_shot
    return [
        {"role": "system", "content": EXTRACT_INSTRUCTION},
        {"role": "user", "content": example_in},
        {"role": "assistant", "content": json.dumps(example_out)},
        {"role": "user", "content": caption_text},
    ]


def repair_messages(messages, reply, error):
    return messages + [
        {"role": "assistant", "content": reply},
        {"role": "user", "content": REPAIR_INSTRUCTION.format(error=error)},
    ]


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.S)


def parse_json_reply(reply):
    text = reply.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc.msg} at position {exc.pos}") from None


def extract(caption_text, few_shot, endpoint, client):
    """Structured semantics for a caption; one re-prompt if the reply is not JSON."""
    if endpoint.role != "extractor":
        raise ValueError(f"endpoint role is {endpoint.role}, expected extractor")
    few_shot = few_shot or DEFAULT_FEW_SHOT
    messages = extract_messages(caption_text, few_shot)
    reply = client.chat(endpoint, messages)
    try:
        obj = parse_json_reply(reply)
        repairs = 0
    except MalformedJson as err:
        messages = repair_messages(messages, reply, err)
        obj = parse_json_reply(client.chat(endpoint, messages))
        repairs = 1
    record = SemanticsRecord.from_json_object(obj)
    record.repair_count = repairs
    return record


@dataclass(frozen=True)
class Endpoints:
    captioner: ModelEndpoint
    extractor: ModelEndpoint


def process_image(image_path, endpoints, client, few_shot=DEFAULT_FEW_SHOT):
    """One manifest line: caption, semantics and final prompt, or the error."""
    entry = {"image": str(image_path), "caption": None, "semantics": None, "final_prompt": None}
    try:
        entry["caption"] = caption(image_path, endpoints.captioner, client)
        record = extract(entry["caption"], few_shot, endpoints.extractor, client)
        entry["semantics"] = record.to_dict()
        entry["final_prompt"] = compose(record).final_text
        entry["status"] = "ok"
    except (SesaError, OSError) as exc:
        entry["status"] = "error"
        entry["error"] = f"{exc.__class__.__name__}: {exc}"
    return entry


def build_dataset(image_list, endpoints, out_path, client, few_shot=DEFAULT_FEW_SHOT, parallelism=1):
    """Run the pipeline over ``image_list`` and write a JSON-lines manifest.

    Failures are recorded per line and do not stop the run.  Lines are
    written in input order whatever the completion order.
    """
    images = list(image_list)
    if parallelism > 1 and images:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            entries = list(pool.map(lambda p: process_image(p, endpoints, client, few_shot), images))
    else:
        entries = [process_image(p, endpoints, client, few_shot) for p in images]
    with open(out_path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")
    return entries
