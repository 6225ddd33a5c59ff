"""Expand (subject, target age, condition) into a grounded editing prompt.

High-level conditions like "alcoholism" are not visual enough to steer a
text-to-image model, so each known condition carries a template that spells
out concrete facial attributes.  Template mode is fully deterministic; LLM
mode asks a chat-completion endpoint to do the expansion and falls back to
the template (with a warning flag) when the service is unreachable.

The template table and the LLM system prompt live in
``data/condition_templates.json`` so phrasing can be edited without
touching code.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from importlib import resources
from typing import Literal
from urllib.parse import urlparse

import httpx

AGE_MIN = 20.0
AGE_MAX = 90.0

ENV_LLM_TOKEN = "AMK_LLM_TOKEN"
ENV_LLM_ENDPOINT = "AMK_LLM_ENDPOINT"

RefineMode = Literal["llm", "template"]


@dataclass(frozen=True)
class EditRequest:
    """One requested edit: who, how old, and under what condition."""

    subject_desc: str
    age_target: float
    condition: str = ""

    def __post_init__(self) -> None:
        if not AGE_MIN <= self.age_target <= AGE_MAX:
            raise ValueError(
                f"age_target must be within [{AGE_MIN:.0f}, {AGE_MAX:.0f}], got {self.age_target}"
            )


@dataclass(frozen=True)
class RefinedPrompt:
    prompt: str
    mode_used: RefineMode
    fallback_warning: bool = False
    audit: dict | None = None


def _load_table() -> dict:
    data = resources.files("agingtree").joinpath("data/condition_templates.json").read_text("utf-8")
    return json.loads(data)


class ConditionCatalog:
    """Known conditions in stable order, each with a prompt template.

    The default catalog ships seven lifestyle/environment conditions;
    extras registered at runtime append after them.
    """

    def __init__(self, table: dict | None = None):
        table = table if table is not None else _load_table()
        self.system_prompt: str = table["system_prompt"]
        self._order: list[str] = list(table["order"])
        self._entries: dict[str, dict] = {key: dict(table["conditions"][key]) for key in self._order}

    def keys(self) -> list[str]:
        return list(self._order)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def entry(self, key: str) -> dict:
        return self._entries[key]

    def register(self, key: str, template: str, attributes: list[str]) -> None:
        if key in self._entries:
            raise ValueError(f"condition {key!r} is already registered")
        if "{age}" not in template or "{subject}" not in template:
            raise ValueError("template must use the {age} and {subject} placeholders")
        self._entries[key] = {"template": template, "attributes": list(attributes)}
        self._order.append(key)


_default_catalog: ConditionCatalog | None = None


def default_catalog() -> ConditionCatalog:
    global _default_catalog
    if _default_catalog is None:
        _default_catalog = ConditionCatalog()
    return _default_catalog


def condition_catalog() -> list[str]:
    return default_catalog().keys()


def render_template(req: EditRequest, catalog: ConditionCatalog | None = None) -> str:
    """Deterministic prompt for a request; unknown conditions pass through."""
    catalog = catalog or default_catalog()
    age = f"{req.age_target:g}"
    if req.condition == "":
        return f"{req.subject_desc}, {age} years old"
    if req.condition in catalog:
        template = catalog.entry(req.condition)["template"]
        return template.format(subject=req.subject_desc, age=age)
    return f"{req.subject_desc}, {age} years old, {req.condition}"


class _HostThrottle:
    """Minimum spacing between requests to the same host."""

    def __init__(self, min_interval: float = 0.2):
        self.min_interval = min_interval
        self._last: dict[str, float] = {}
        self._lock = threading.Lock()

    def wait(self, host: str) -> None:
        with self._lock:
            now = time.monotonic()
            ready = self._last.get(host, 0.0) + self.min_interval
            delay = max(0.0, ready - now)
            self._last[host] = max(now, ready)
        if delay > 0:
            time.sleep(delay)


class ChatClient:
    """Minimal chat-completion client; endpoint and model are configurable."""

    def __init__(
        self,
        endpoint: str | None = None,
        model: str = "gpt-4o",
        token: str | None = None,
        timeout: float = 20.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_LLM_ENDPOINT, "")
        self.model = model
        self.token = token if token is not None else os.environ.get(ENV_LLM_TOKEN, "")
        self.timeout = timeout
        self._transport = transport
        self._throttle = _HostThrottle()

    def complete(self, system: str, user: str) -> tuple[str, dict]:
        if not self.endpoint:
            raise RuntimeError("no chat endpoint configured")
        self._throttle.wait(urlparse(self.endpoint).netloc)
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        with httpx.Client(transport=self._transport, timeout=self.timeout) as client:
            response = client.post(self.endpoint, json=payload, headers=headers)
            response.raise_for_status()
            body = response.json()
        text = body["choices"][0]["message"]["content"].strip()
        audit = {"request": payload, "response": body}
        return text, audit


def refine_prompt(
    req: EditRequest,
    mode: RefineMode = "template",
    catalog: ConditionCatalog | None = None,
    client: ChatClient | None = None,
) -> RefinedPrompt:
    """Produce the prompt that drives the edit.

    LLM mode records the raw exchange for audit and degrades to the
    deterministic template (with ``fallback_warning``) on any client error.
    """
    catalog = catalog or default_catalog()
    template_text = render_template(req, catalog)
    if mode == "template":
        return RefinedPrompt(prompt=template_text, mode_used="template")
    client = client or ChatClient()
    user = (
        f"subject: {req.subject_desc}\n"
        f"target age: {req.age_target:g}\n"
        f"condition: {req.condition or 'none'}"
    )
    try:
        text, audit = client.complete(catalog.system_prompt, user)
        if not text:
            raise RuntimeError("empty completion")
        return RefinedPrompt(prompt=text, mode_used="llm", audit=audit)
    except Exception:
        return RefinedPrompt(prompt=template_text, mode_used="template", fallback_warning=True)
