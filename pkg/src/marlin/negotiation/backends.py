"""Chat backends: a remote chat-completions client plus hermetic test doubles."""

from __future__ import annotations

import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "self", "other")
WIRE_ROLES = {"system": "system", "self": "assistant", "other": "user"}


class BackendError(RuntimeError):
    """Transport or protocol failure talking to a chat backend."""

    def __init__(self, message: str, transcript=None):
        super().__init__(message)
        self.transcript = transcript


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


class ChatBackend(ABC):
    @abstractmethod
    def complete(self, messages: Sequence[ChatMessage]) -> str:
        """Reply to a conversation seen from one agent's point of view."""


class ScriptedBackend(ChatBackend):
    """Replays a fixed list of replies in order, ignoring the conversation."""

    def __init__(self, replies: Sequence[str]):
        self.replies = list(replies)
        self.position = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        """One JSON object per line with a ``content`` field."""
        replies = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    replies.append(json.loads(line)["content"])
        return cls(replies)

    def complete(self, messages):
        if self.position >= len(self.replies):
            raise BackendError("scripted backend ran out of replies")
        reply = self.replies[self.position]
        self.position += 1
        return reply


class ConstantBackend(ChatBackend):
    """Always sends the same reply."""

    def __init__(self, reply: str):
        self.reply = reply

    def complete(self, messages):
        return self.reply


class RemoteBackend(ChatBackend):
    """Client for an HTTP chat-completions endpoint.

    Request body: ``{"model", "messages": [{"role", "content"}], "temperature"}``.
    The reply text is read from ``choices[0].message.content``.
    """

    URL_ENV = "MARLIN_CHAT_URL"
    KEY_ENV = "MARLIN_CHAT_API_KEY"
    MODEL_ENV = "MARLIN_CHAT_MODEL"

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        temperature: float = 0.0,
        timeout: float = 60.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.retries = retries
        self.client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteBackend":
        url = os.environ.get(cls.URL_ENV)
        model = os.environ.get(cls.MODEL_ENV)
        if not url or not model:
            raise BackendError(f"set {cls.URL_ENV} and {cls.MODEL_ENV} to use the remote backend")
        return cls(url, model, api_key=os.environ.get(cls.KEY_ENV), **kwargs)

    def wire_messages(self, messages: Sequence[ChatMessage]) -> list[dict]:
        wire = [{"role": WIRE_ROLES[m.role], "content": m.content} for m in messages]
        if not wire or wire[-1]["role"] != "user":
            wire.append({"role": "user", "content": "Your turn. Reply in the required format."})
        return wire

    def complete(self, messages):
        body = {"model": self.model, "messages": self.wire_messages(messages), "temperature": self.temperature}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post(self.url, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_exc = BackendError(f"HTTP {resp.status_code}")
                    log.warning("chat backend attempt %d failed with HTTP %d", attempt + 1, resp.status_code)
                    continue
                if resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except httpx.HTTPError as exc:
                last_exc = exc
                log.warning("chat backend attempt %d failed: %s", attempt + 1, exc)
                continue
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise BackendError(f"malformed chat response: {exc}") from exc
            return content or ""
        raise BackendError(f"chat backend unreachable after {self.retries + 1} attempts: {last_exc}")

