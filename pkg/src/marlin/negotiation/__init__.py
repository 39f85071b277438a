"""Dyadic natural-language negotiation over pluggable chat backends."""

from typing import Sequence

from marlin.negotiation.backends import (
    BackendError,
    ChatBackend,
    ChatMessage,
    ConstantBackend,
    RemoteBackend,
    ScriptedBackend,
)
from marlin.negotiation.oracle import OracleBackend
from marlin.negotiation.protocol import (
    FormatError,
    NegotiationConfig,
    NegotiationSession,
    Plan,
    TranscriptEntry,
    build_system_prompt,
    make_plan,
    negotiate_round,
    parse_moves,
    read_transcript,
    render_moves,
    replay_plan,
    replay_round,
    replay_transcript,
    select_leader,
    write_transcript,
)


def make_backends(kind: str, n_agents: int = 2, scripts: Sequence[str] | None = None) -> list[ChatBackend]:
    """Per-agent backends by name: ``oracle``, ``remote`` or ``scripted``."""
    if kind == "oracle":
        return [OracleBackend() for _ in range(n_agents)]
    if kind == "remote":
        return [RemoteBackend.from_env() for _ in range(n_agents)]
    if kind == "scripted":
        if not scripts or len(scripts) != n_agents:
            raise ValueError("scripted backend needs one script file per agent")
        return [ScriptedBackend.from_file(p) for p in scripts]
    raise ValueError(f"unknown backend {kind!r}")


__all__ = [
    "BackendError",
    "ChatBackend",
    "ChatMessage",
    "ConstantBackend",
    "FormatError",
    "NegotiationConfig",
    "NegotiationSession",
    "Plan",
    "RemoteBackend",
    "ScriptedBackend",
    "TranscriptEntry",
    "build_system_prompt",
    "make_backends",
    "make_plan",
    "negotiate_round",
    "parse_moves",
    "read_transcript",
    "render_moves",
    "replay_plan",
    "replay_round",
    "replay_transcript",
    "select_leader",
    "write_transcript",
]
