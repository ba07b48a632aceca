"""Mutation operators: deterministic scripted mock and a generic HTTP client."""
from __future__ import annotations

import json
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Sequence

import requests

from .errors import ConfigError, OperatorTransportError
from .prompts import PromptBundle

API_KEY_ENV = "EVPOLICY_API_KEY"


class MutationOperator(ABC):
    """Turns a prompt bundle into a raw text reply."""

    @abstractmethod
    def complete(self, bundle: PromptBundle) -> str:
        ...

    request_count: int = 0


class MockOperator(MutationOperator):
    """Replays canned replies keyed by call order. Fully deterministic.

    Accepts a list of reply strings or a JSON-lines file whose lines are
    either raw JSON strings or objects with a ``reply`` key. When the canned
    replies run out, the last one repeats.
    """

    def __init__(self, replies: Sequence[str]):
        if not replies:
            raise ConfigError("mock operator needs at least one reply")
        self.replies = list(replies)
        self.request_count = 0

    @classmethod
    def from_jsonl(cls, path) -> "MockOperator":
        replies = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                replies.append(obj["reply"] if isinstance(obj, dict) else str(obj))
        return cls(replies)

    def complete(self, bundle: PromptBundle) -> str:
        reply = self.replies[min(self.request_count, len(self.replies) - 1)]
        self.request_count += 1
        return reply


class HttpChatOperator(MutationOperator):
    """Client for any chat-completion style endpoint.

    Sends system/user messages, returns the first choice's content. The API
    key comes from the environment so it never lands in run artifacts.
    """

    def __init__(self, url: str, model: str, temperature: float = 0.2,
                 timeout_s: float = 120.0, api_key_env: str = API_KEY_ENV):
        self.url = url
        self.model = model
        self.temperature = temperature
        self.timeout_s = timeout_s
        self.api_key = os.environ.get(api_key_env, "")
        self.request_count = 0
        self.token_count = 0

    def complete(self, bundle: PromptBundle) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
        }
        try:
            resp = requests.post(self.url, json=payload, headers=headers,
                                 timeout=self.timeout_s)
            resp.raise_for_status()
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError,
                ValueError) as exc:
            raise OperatorTransportError(f"{self.url}: {exc}") from exc
        self.request_count += 1
        usage = body.get("usage") or {}
        self.token_count += usage.get("total_tokens", 0)
        return content


def make_operator(spec: str, http_config: dict | None = None) -> MutationOperator:
    """Build an operator from a CLI spec: ``mock:<replies.jsonl>`` or ``http``."""
    if spec.startswith("mock:"):
        path = Path(spec[5:])
        if not path.exists():
            raise ConfigError(f"mock replies file not found: {path}")
        return MockOperator.from_jsonl(path)
    if spec == "http":
        cfg = http_config or {}
        if "url" not in cfg or "model" not in cfg:
            raise ConfigError("http operator needs 'url' and 'model' settings")
        return HttpChatOperator(
            url=cfg["url"], model=cfg["model"],
            temperature=cfg.get("temperature", 0.2),
            timeout_s=cfg.get("timeout_s", 120.0))
    raise ConfigError(f"unknown operator spec {spec!r}")
