"""Turn-taking negotiation between two agents over chat backends.

Every session starts from a shared system prompt (identical apart from the
``You are agent k`` line).  A round is opened by the leader; the agents then
alternate proposals and critiques until the agent that did not author the
current proposal replies with ``AGREE`` and a move block, or the message
limit runs out.  Agreed moves are simulated and the new positions are sent
back to both agents as a state update.

Reply grammar, one line per agent::

    MOVE 0: @NORTH
    MOVE 1: @WAIT
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from marlin.gridworld import (
    GridAction,
    GridWorld,
    JointState,
    all_at_goals,
    performance,
    render,
    step,
)
from marlin.negotiation.backends import BackendError, ChatMessage

TOKENS: dict[GridAction, str] = {
    GridAction.F: "@NORTH",
    GridAction.B: "@SOUTH",
    GridAction.R: "@EAST",
    GridAction.L: "@WEST",
    GridAction.W: "@WAIT",
}
TOKEN_TO_ACTION = {tok[1:]: a for a, tok in TOKENS.items()}

MOVE_RE = re.compile(r"MOVE\s+(\d+)\s*:\s*@([A-Za-z_]+)")
AGREE_RE = re.compile(r"\bAGREE\b")
STATE_BEGIN, STATE_END = "BEGIN STATE", "END STATE"


class FormatError(ValueError):
    """Reply does not contain a usable move block; ``reason`` says why."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class NegotiationConfig:
    message_limit: int = 10
    max_format_retries: int = 3
    leader_rule: str = "deterministic"
    move_cap: int = 50

    def __post_init__(self):
        if self.message_limit < 2:
            raise ValueError("message_limit must be at least 2")
        if self.max_format_retries < 0:
            raise ValueError("max_format_retries must be non-negative")
        if self.leader_rule not in ("deterministic", "random"):
            raise ValueError(f"unknown leader rule {self.leader_rule!r}")
        if self.move_cap < 0:
            raise ValueError("move_cap must be non-negative")


@dataclass(frozen=True)
class TranscriptEntry:
    """One logged message.  ``speaker`` is an agent index, or None for the harness."""

    round: int
    turn: int
    speaker: int | None
    kind: str  # system | proposal | agree | malformed | correction | update
    content: str
    audience: int | None = None  # None: visible to both agents

    def to_record(self, session_id: str) -> dict:
        role = "system" if self.kind == "system" else ("harness" if self.speaker is None else f"agent{self.speaker}")
        return {
            "session": session_id,
            "round": self.round,
            "turn": self.turn,
            "role": role,
            "kind": self.kind,
            "speaker": self.speaker,
            "audience": self.audience,
            "content": self.content,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TranscriptEntry":
        return cls(rec["round"], rec["turn"], rec["speaker"], rec["kind"], rec["content"], rec.get("audience"))


@dataclass(frozen=True)
class Plan:
    """Negotiated joint moves from ``origin`` and the performance they reach."""

    origin: tuple
    moves: tuple
    performance: float
    transcript_ref: str | None = None
    transcript: tuple = field(default=(), compare=False, repr=False)

    def predicted_positions(self, world: GridWorld) -> list[tuple]:
        """Joint positions before each move and after the last one."""
        cur = JointState(self.origin, 0)
        out = [cur.positions]
        for joint in self.moves:
            cur = step(world, cur, joint, step_max=len(self.moves) + 1).next_state
            out.append(cur.positions)
        return out


# ---------------------------------------------------------------------------
# grammar

def render_moves(actions: Sequence[GridAction]) -> str:
    return "\n".join(f"MOVE {i}: {TOKENS[GridAction(a)]}" for i, a in enumerate(actions))


def _move_blocks(message: str) -> list[list[tuple[int, str]]]:
    blocks: list[list[tuple[int, str]]] = []
    current: list[tuple[int, str]] = []
    last_end = None
    for m in MOVE_RE.finditer(message):
        agent, token = int(m.group(1)), m.group(2)
        gap = message[last_end:m.start()] if last_end is not None else ""
        if current and (gap.strip() or any(a == agent for a, _ in current)):
            blocks.append(current)
            current = []
        current.append((agent, token))
        last_end = m.end()
    if current:
        blocks.append(current)
    return blocks


def parse_moves(message: str, n_agents: int = 2) -> tuple[GridAction, ...]:
    """Moves from the last ``MOVE k: @DIR`` block in ``message``; prose is ignored."""
    blocks = _move_blocks(message)
    if not blocks:
        raise FormatError("missing agent", "no MOVE lines found")
    block = blocks[-1]
    moves: dict[int, GridAction] = {}
    for agent, token in block:
        action = TOKEN_TO_ACTION.get(token.upper())
        if action is None or token != token.upper():
            raise FormatError("unknown token", f"@{token}")
        moves[agent] = action
    missing = [k for k in range(n_agents) if k not in moves]
    if missing:
        raise FormatError("missing agent", f"no move for agent(s) {missing}")
    extra = [k for k in moves if k >= n_agents]
    if extra:
        raise FormatError("missing agent", f"unknown agent(s) {extra}")
    return tuple(moves[k] for k in range(n_agents))


def has_agreement(message: str) -> bool:
    return bool(AGREE_RE.search(message))


# ---------------------------------------------------------------------------
# prompts

def render_state_block(world: GridWorld, state: JointState) -> str:
    lines = [
        STATE_BEGIN,
        f"scenario: {world.scenario_id}",
        f"grid: width {world.width}, height {world.height}",
        "map:",
        render(world, state.positions),
    ]
    for k, (p, s, g) in enumerate(zip(state.positions, world.starts, world.goals)):
        lines.append(f"agent {k}: position ({p[0]},{p[1]}) start ({s[0]},{s[1]}) goal ({g[0]},{g[1]})")
    lines.append(STATE_END)
    return "\n".join(lines)


_AGENT_LINE = re.compile(r"agent (\d+): position \((\d+),(\d+)\) start \((\d+),(\d+)\) goal \((\d+),(\d+)\)")


def parse_state_block(text: str) -> dict | None:
    """Last state block in ``text`` as a dict of map rows, positions, starts, goals."""
    end = text.rfind(STATE_END)
    begin = text.rfind(STATE_BEGIN, 0, end) if end >= 0 else -1
    if begin < 0:
        return None
    body = text[begin + len(STATE_BEGIN):end].strip("\n").split("\n")
    scenario = body[0].split(":", 1)[1].strip()
    w, h = (int(v) for v in re.findall(r"\d+", body[1]))
    rows = body[3:3 + h]
    positions, starts, goals = {}, {}, {}
    for line in body[3 + h:]:
        m = _AGENT_LINE.fullmatch(line.strip())
        if m:
            k, px, py, sx, sy, gx, gy = (int(v) for v in m.groups())
            positions[k], starts[k], goals[k] = (px, py), (sx, sy), (gx, gy)
    n = len(positions)
    walls = frozenset((x, y) for y, row in enumerate(rows) for x, ch in enumerate(row) if ch == "#")
    return {
        "scenario": scenario,
        "width": w,
        "height": h,
        "walls": walls,
        "positions": tuple(positions[k] for k in range(n)),
        "starts": tuple(starts[k] for k in range(n)),
        "goals": tuple(goals[k] for k in range(n)),
    }


VOCABULARY = ", ".join(TOKENS[a] for a in (GridAction.F, GridAction.B, GridAction.R, GridAction.L, GridAction.W))


def build_system_prompt(world: GridWorld, state: JointState, agent: int) -> str:
    n = world.n_agents
    example = render_moves([GridAction.W] * n)
    return (
        f"You are agent {agent}.\n"
        f"You are one of {n} robots in a grid of corridors. Robots move one cell per turn, all at the same time. "
        "A robot cannot enter a wall (#), leave the grid, swap cells with another robot, or enter a cell "
        "another robot is also entering; such moves fail and the robot stays where it is.\n"
        "Coordinates are (x, y) with (0,0) at the top-left; y grows downward. Digits on the map mark robots.\n\n"
        f"{render_state_block(world, state)}\n\n"
        f"Actions: {VOCABULARY}. NORTH is y-1, SOUTH is y+1, EAST is x+1, WEST is x-1.\n\n"
        "Work with the other robot until every robot reaches its goal. Take turns: first propose a "
        "Top-Level Plan (a line starting with 'TLP:') describing how you will get past each other, then "
        "the next move for every robot. Critique the other robot's proposal if it is wrong and give your "
        "own. When you accept the other robot's latest proposal, reply with the word AGREE followed by the "
        "same moves.\n"
        "Every reply must end with exactly one move block in this format, one line per robot:\n"
        f"{example}\n"
    )


def correction_prompt(err: FormatError, n_agents: int) -> str:
    return (
        f"Your last reply could not be parsed ({err}). Reply again and end with one move block, "
        f"one line per robot, for example:\n{render_moves([GridAction.W] * n_agents)}"
    )


def update_message(world: GridWorld, state: JointState, actions: Sequence[GridAction]) -> str:
    moved = ", ".join(f"agent {k} {TOKENS[GridAction(a)]}" for k, a in enumerate(actions))
    return f"Moves executed: {moved}. Updated positions:\n{render_state_block(world, state)}\nNegotiate the next move."


# ---------------------------------------------------------------------------
# sessions

def select_leader(n_agents: int, rule: str = "deterministic", rng: np.random.Generator | None = None) -> int:
    if n_agents < 1:
        raise ValueError("need at least one agent")
    if n_agents == 1 or rule == "deterministic":
        return 0
    if rng is None:
        raise ValueError("random leader rule needs an rng")
    return int(rng.integers(n_agents))


class NegotiationSession:
    """Shared transcript of one negotiation plus per-agent chat views."""

    def __init__(self, world: GridWorld, state: JointState, session_id: str = "session"):
        self.world = world
        self.session_id = session_id
        self.entries: list[TranscriptEntry] = []
        self.round = 0
        self._turn = itertools.count()
        for k in range(world.n_agents):
            self.add(k, "system", build_system_prompt(world, state, k), audience=k)

    def add(self, speaker, kind, content, audience=None) -> TranscriptEntry:
        entry = TranscriptEntry(self.round, next(self._turn), speaker, kind, content, audience)
        self.entries.append(entry)
        return entry

    def view(self, agent: int) -> list[ChatMessage]:
        msgs = []
        for e in self.entries:
            if e.audience is not None and e.audience != agent:
                continue
            if e.kind == "system":
                role = "system"
            elif e.speaker == agent:
                role = "self"
            else:
                role = "other"
            msgs.append(ChatMessage(role, e.content))
        return msgs

    def round_entries(self, rnd: int) -> list[TranscriptEntry]:
        return [e for e in self.entries if e.round == rnd and e.kind != "system"]

    def records(self) -> list[dict]:
        return [e.to_record(self.session_id) for e in self.entries]


def negotiate_round(
    world: GridWorld,
    state: JointState,
    backends: Sequence,
    cfg: NegotiationConfig = NegotiationConfig(),
    session: NegotiationSession | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[tuple[GridAction, ...], list[TranscriptEntry]]:
    """Run one proposal/critique round; returns the adopted joint action and the round's messages.

    Adoption: the agreed block if an agreement happened, otherwise the last
    parseable proposal, otherwise every agent waits.  Format retries are a
    per-round budget and do not count toward ``message_limit``.
    """
    n = world.n_agents
    if n != 2:
        raise ValueError("negotiation is dyadic; got %d agents" % n)
    if len(backends) != n:
        raise ValueError("need one backend per agent")
    if session is None:
        session = NegotiationSession(world, state)
    session.round += 1
    rnd = session.round
    speaker = select_leader(n, cfg.leader_rule, rng)
    last_moves = None
    proposal_author = None
    adopted = None
    sent = 0
    retries = 0
    while sent < cfg.message_limit:
        try:
            reply = backends[speaker].complete(session.view(speaker))
        except BackendError as exc:
            exc.transcript = list(session.entries)
            raise
        try:
            moves = parse_moves(reply, n)
        except FormatError as err:
            session.add(speaker, "malformed", reply or "<empty>", audience=speaker)
            if retries >= cfg.max_format_retries:
                break
            retries += 1
            session.add(None, "correction", correction_prompt(err, n), audience=speaker)
            continue
        agreed = proposal_author is not None and proposal_author != speaker and has_agreement(reply)
        session.add(speaker, "agree" if agreed else "proposal", reply)
        sent += 1
        if agreed:
            adopted = moves
            break
        last_moves, proposal_author = moves, speaker
        speaker = (speaker + 1) % n
    if adopted is None:
        adopted = last_moves if last_moves is not None else (GridAction.W,) * n
    return adopted, session.round_entries(rnd)


def make_plan(
    world: GridWorld,
    state: JointState,
    backends: Sequence,
    cfg: NegotiationConfig = NegotiationConfig(),
    rng: np.random.Generator | None = None,
    session_id: str = "session",
) -> Plan:
    """Negotiate and simulate moves until every agent is home or ``move_cap`` is hit.

    A :class:`BackendError` aborts planning and propagates with the partial
    transcript attached.
    """
    cur = JointState(state.positions, 0)
    session = NegotiationSession(world, cur, session_id)
    moves = []
    while not all_at_goals(world, cur) and len(moves) < cfg.move_cap:
        actions, _ = negotiate_round(world, cur, backends, cfg, session, rng)
        cur = step(world, cur, actions, step_max=cfg.move_cap + 1).next_state
        moves.append(tuple(actions))
        session.add(None, "update", update_message(world, cur, actions))
    return Plan(
        origin=tuple(state.positions),
        moves=tuple(moves),
        performance=performance(world, cur),
        transcript_ref=session_id,
        transcript=tuple(session.entries),
    )


# ---------------------------------------------------------------------------
# transcripts

def replay_round(entries: Sequence[TranscriptEntry], n_agents: int = 2) -> tuple[GridAction, ...]:
    """Re-derive a round's adopted action from its messages alone."""
    last_moves = None
    proposal_author = None
    for e in entries:
        if e.speaker is None or e.kind == "system":
            continue
        try:
            moves = parse_moves(e.content, n_agents)
        except FormatError:
            continue
        if proposal_author is not None and proposal_author != e.speaker and has_agreement(e.content):
            return moves
        last_moves, proposal_author = moves, e.speaker
    return last_moves if last_moves is not None else (GridAction.W,) * n_agents


def replay_transcript(entries: Sequence[TranscriptEntry]) -> tuple[GridWorld, JointState, list[tuple[GridAction, ...]]]:
    """Rebuild the world, origin state and adopted moves of a logged session."""
    system = next(e for e in entries if e.kind == "system")
    info = parse_state_block(system.content)
    world = GridWorld(info["width"], info["height"], info["walls"], info["scenario"], info["starts"], info["goals"])
    n = world.n_agents
    rounds = sorted({e.round for e in entries if e.kind != "system"})
    moves = [replay_round([e for e in entries if e.round == r], n) for r in rounds]
    return world, JointState(info["positions"], 0), moves


def replay_plan(entries: Sequence[TranscriptEntry], session_id: str | None = None) -> Plan:
    """Rebuild a plan from its transcript; equal to the original when ``session_id`` matches."""
    world, origin, moves = replay_transcript(entries)
    cur = origin
    for joint in moves:
        cur = step(world, cur, joint, step_max=len(moves) + 1).next_state
    return Plan(tuple(origin.positions), tuple(tuple(m) for m in moves), performance(world, cur), session_id,
                tuple(entries))


def write_transcript(path, sessions: Sequence[tuple[str, Sequence[TranscriptEntry]]], mode: str = "w") -> None:
    with open(path, mode) as fh:
        for session_id, entries in sessions:
            for e in entries:
                fh.write(json.dumps(e.to_record(session_id)) + "\n")


def read_transcript(path) -> dict[str, list[TranscriptEntry]]:
    out: dict[str, list[TranscriptEntry]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(rec["session"], []).append(TranscriptEntry.from_record(rec))
    return out

