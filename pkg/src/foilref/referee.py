"""Right-of-way evaluation over an aligned two-fencer exchange.

A deterministic priority state machine sweeps the merged event timeline:
the first offensive action seizes priority, a defender's parry or beat
transfers it, an attack that falls short surrenders it to the opponent's
next offensive action, and a counterattack never takes it from a live
attack. The touch goes to the priority holder when both land. Each clause
is an auditable rule with its own identifier, and the same rulebook feeds
a deterministic prompt for an optional external text-generation service
whose failures always fall back to the local verdict.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import requests

from .core import BladeLine, ExchangeTranscript, MoveLabel, Side, TranscriptEvent

# Moves that constitute taking the attack forward.
OFFENSIVE_FOOTWORK = frozenset(
    {MoveLabel.STEP_FORWARD, MoveLabel.HALF_STEP_FORWARD, MoveLabel.LUNGE, MoveLabel.FLECHE}
)


@dataclass(frozen=True)
class Rule:
    rule_id: str
    text: str
    predicate: str  # keyword description used for prompt retrieval


@dataclass(frozen=True)
class RuleBook:
    rules: tuple[Rule, ...]

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))

    def get(self, rule_id: str) -> Rule:
        for rule in self.rules:
            if rule.rule_id == rule_id:
                return rule
        raise KeyError(rule_id)


DEFAULT_RULEBOOK = RuleBook(
    (
        Rule(
            "initiation",
            "Priority is given to the fencer who initiates the attack unless it is interrupted.",
            "attack initiation step_forward half_step_forward lunge fleche beat fake advance",
        ),
        Rule(
            "interruption",
            "A parry or a beat on the attacker's blade interrupts the attack and takes priority.",
            "parry beat defend deflect interrupt blade",
        ),
        Rule(
            "falls_short",
            "If an attack is initiated but falls short or misses, priority shifts to the other fencer.",
            "lunge fleche miss fall short renewal step_forward counterattack",
        ),
        Rule(
            "counterattack_no_priority",
            "A counterattack into a continuing attack does not take priority.",
            "counterattack stop hit continuing attack",
        ),
        Rule(
            "simultaneous",
            "When both fencers initiate the attack at the same instant and both hit, no touch is awarded.",
            "simultaneous attack both hit none",
        ),
        Rule(
            "touch_award",
            "The touch is awarded to the fencer who hits while holding priority, or who hits "
            "while the opponent never attacked.",
            "hit touch award priority score",
        ),
        Rule(
            "no_touch",
            "Without a hit by either fencer there is no touch to award.",
            "no hit halt wait none",
        ),
    )
)


class Decision:
    LEFT = "Left"
    RIGHT = "Right"
    NONE = "None"


@dataclass(frozen=True)
class Verdict:
    decision: str  # Left | Right | None
    explanation: str
    fired_rules: tuple[str, ...]
    priority_trace: tuple[tuple[int, str | None], ...]  # (frame, holder side value)
    source: str = "rule_engine"  # rule_engine | external | fallback
    diagnostic: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "decision": self.decision,
                "explanation": self.explanation,
                "fired_rules": list(self.fired_rules),
                "priority_trace": [[frame, holder] for frame, holder in self.priority_trace],
                "source": self.source,
                "diagnostic": self.diagnostic,
            },
            indent=2,
        )


def is_offensive(event: TranscriptEvent) -> bool:
    """Advancing footwork or a beat; a fake counts only with footwork under it."""
    if event.moves & OFFENSIVE_FOOTWORK:
        return True
    return MoveLabel.BEAT in event.moves


@dataclass
class _PriorityState:
    holder: Side | None = None
    pending_falls_short: bool = False
    ever_attacked: dict[Side, bool] = field(default_factory=lambda: {Side.LEFT: False, Side.RIGHT: False})
    hits: dict[Side, int | None] = field(default_factory=lambda: {Side.LEFT: None, Side.RIGHT: None})
    fired: list[str] = field(default_factory=list)
    trace: list[tuple[int, str | None]] = field(default_factory=list)
    notes: list[tuple[str, str]] = field(default_factory=list)  # (rule_id, sentence)

    def fire(self, rule_id: str, sentence: str) -> None:
        if rule_id not in self.fired:
            self.fired.append(rule_id)
        self.notes.append((rule_id, sentence))


def _cite(event: TranscriptEvent) -> str:
    moves = ", ".join(m.token.replace("_", " ") for m in sorted(event.moves))
    return f"{moves} ({event.start_frame}–{event.end_frame})"


def evaluate_priority(transcript: ExchangeTranscript, rules: RuleBook | None = None) -> Verdict:
    """Run the priority state machine and award the touch.

    The sweep is side-symmetric: swapping every event's side swaps the
    decision. Ties at the same start frame where both sides initiate leave
    priority unassigned (simultaneous attack).
    """
    rules = rules or DEFAULT_RULEBOOK
    if not transcript.events:
        raise ValueError("transcript has no events")
    state = _PriorityState()
    events = transcript.events
    state.trace.append((events[0].start_frame, None))

    skip: set[int] = set()
    for i, event in enumerate(events):
        if i in skip:
            continue
        side = event.side
        other = side.opposite
        offensive = is_offensive(event)
        if offensive:
            state.ever_attacked[side] = True

        if MoveLabel.HIT in event.moves:
            state.hits[side] = event.end_frame
            if state.holder is side:
                state.pending_falls_short = False

        if state.holder is None and offensive:
            # Simultaneous initiation: a same-start offensive action by the
            # other side cancels both claims, side-symmetrically.
            partner = next(
                (
                    j
                    for j in range(i + 1, len(events))
                    if events[j].start_frame == event.start_frame
                    and events[j].side is other
                    and is_offensive(events[j])
                ),
                None,
            )
            if partner is not None:
                nxt = events[partner]
                state.ever_attacked[other] = True
                if MoveLabel.HIT in nxt.moves:
                    state.hits[other] = nxt.end_frame
                state.fire(
                    "simultaneous",
                    f"Both fencers initiate at frame {event.start_frame}: "
                    f"{side.value} with {_cite(event)}, {other.value} with {_cite(nxt)}; "
                    "no priority is assigned.",
                )
                skip.add(partner)
                continue
            state.holder = side
            state.pending_falls_short = False
            state.fire(
                "initiation",
                f"The {side.value} fencer initiates the attack with {_cite(event)} and takes priority.",
            )
            state.trace.append((event.start_frame, side.value))
            continue

        if state.holder is not None and side is not state.holder:
            holder = state.holder
            if event.moves & {MoveLabel.PARRY, MoveLabel.BEAT}:
                state.holder = side
                state.pending_falls_short = False
                state.fire(
                    "interruption",
                    f"The {side.value} fencer interrupts with {_cite(event)}; priority transfers "
                    f"from {holder.value} to {side.value}.",
                )
                state.trace.append((event.start_frame, side.value))
                continue
            if state.pending_falls_short and offensive:
                state.holder = side
                state.pending_falls_short = False
                state.fire(
                    "falls_short",
                    f"The {holder.value} fencer's attack falls short; priority shifts to the "
                    f"{side.value} fencer's {_cite(event)}.",
                )
                state.trace.append((event.start_frame, side.value))
                continue
            if MoveLabel.COUNTERATTACK in event.moves:
                state.fire(
                    "counterattack_no_priority",
                    f"The {side.value} fencer's {_cite(event)} is a counterattack into a "
                    "continuing attack and does not take priority.",
                )
                continue

        if state.holder is side:
            attack_moves = event.moves & {MoveLabel.LUNGE, MoveLabel.FLECHE}
            if attack_moves and MoveLabel.HIT not in event.moves:
                state.pending_falls_short = True

    decision = _award_touch(state)
    last_frame = max(e.end_frame for e in events)
    if state.trace[-1][0] != last_frame:
        state.trace.append((last_frame, state.holder.value if state.holder else None))
    explanation = _render(decision, state)
    return Verdict(
        decision=decision,
        explanation=explanation,
        fired_rules=tuple(state.fired),
        priority_trace=tuple(state.trace),
    )


def _award_touch(state: _PriorityState) -> str:
    left_hit = state.hits[Side.LEFT] is not None
    right_hit = state.hits[Side.RIGHT] is not None
    if not left_hit and not right_hit:
        state.fire("no_touch", "Neither fencer hits; no touch.")
        return Decision.NONE
    if left_hit and right_hit:
        if state.holder is None:
            state.fire("simultaneous", "Both fencers hit with no one holding priority; no touch is awarded.")
            return Decision.NONE
        winner = state.holder
        state.fire(
            "touch_award",
            f"Both fencers hit; the {winner.value} fencer holds priority, so the touch is "
            f"awarded to the {winner.value} fencer.",
        )
        return Decision.LEFT if winner is Side.LEFT else Decision.RIGHT
    side = Side.LEFT if left_hit else Side.RIGHT
    if state.holder is side or not state.ever_attacked[side.opposite]:
        reason = (
            "holds priority" if state.holder is side else "hits while the opponent never attacked"
        )
        state.fire(
            "touch_award",
            f"Only the {side.value} fencer hits and {reason}; the touch is awarded to the "
            f"{side.value} fencer.",
        )
        return Decision.LEFT if side is Side.LEFT else Decision.RIGHT
    state.fire(
        "touch_award",
        f"The {side.value} fencer hits without priority while the {side.opposite.value} fencer "
        "holds it; no touch is awarded.",
    )
    return Decision.NONE


def _render(decision: str, state: _PriorityState) -> str:
    lines = [f"Decision: {decision}"]
    for rule_id, sentence in state.notes:
        lines.append(f"[{rule_id}] {sentence}")
    return "\n".join(lines)


def render_explanation(verdict: Verdict, transcript: ExchangeTranscript) -> str:
    """Decision line plus one rule-tagged sentence per fired clause.

    The template is assembled during evaluation (sentences cite moves and
    frame ranges from the transcript); this accessor returns it.
    """
    return verdict.explanation


def format_moves_block(transcript: ExchangeTranscript) -> str:
    lines = []
    for side in (Side.LEFT, Side.RIGHT):
        events = transcript.side_events(side)
        parts = [
            f"[{e.start_frame}–{e.end_frame}] "
            + " + ".join(m.token.replace("_", " ") for m in sorted(e.moves))
            + f" (blade pos. {e.blade.token})"
            for e in events
        ]
        lines.append(f"{side.value.capitalize()}: " + "; ".join(parts) + ".")
    return "\n".join(lines)


def select_rules(transcript: ExchangeTranscript, rules: RuleBook) -> list[Rule]:
    """Keyword retrieval: rules whose predicate mentions a transcript move.

    Falls back to the full rulebook when nothing matches, so the prompt is
    never rule-free.
    """
    tokens = {m.token for e in transcript.events for m in e.moves}
    selected = [
        rule
        for rule in rules.rules
        if any(tok in rule.predicate.split() for tok in tokens)
    ]
    return selected if selected else list(rules.rules)


def format_prompt(transcript: ExchangeTranscript, rules: RuleBook | None = None) -> str:
    """Deterministic three-part prompt: rules, move sequences, answer format."""
    rules = rules or DEFAULT_RULEBOOK
    if not rules.rules:
        raise ValueError("no rules to include in the prompt")
    chosen = select_rules(transcript, rules)
    lines = ["Rules:"]
    lines.extend(f"- {rule.text}" for rule in chosen)
    lines.append("")
    lines.append("Fencing moves:")
    lines.append(format_moves_block(transcript))
    lines.append("")
    lines.append(
        "Answer with a single line 'Decision: Left', 'Decision: Right' or 'Decision: None', "
        "followed by a brief explanation referencing the rules and the moves."
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# External explainer client
# ---------------------------------------------------------------------------

TOKEN_ENV_VAR = "FOILREF_EXPLAINER_TOKEN"


@dataclass
class ExplainerConfig:
    endpoint: str = ""
    timeout: float = 10.0
    max_tokens: int = 256
    fallback_enabled: bool = True


def parse_explainer_response(text: str) -> tuple[str, str]:
    """Extract (decision, explanation) from a response block.

    The first line must read 'Decision: X' with X in {Left, Right, None};
    remaining lines form the explanation and trailing noise is tolerated.
    """
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not lines[0].lower().startswith("decision:"):
        raise ValueError(f"response does not start with a decision line: {text[:80]!r}")
    decision_raw = lines[0].split(":", 1)[1].strip().rstrip(".").capitalize()
    if decision_raw not in (Decision.LEFT, Decision.RIGHT, Decision.NONE):
        raise ValueError(f"unrecognized decision {decision_raw!r}")
    explanation = "\n".join(lines[1:]) if len(lines) > 1 else ""
    return decision_raw, explanation


def query_explainer(
    transcript: ExchangeTranscript,
    config: ExplainerConfig,
    rules: RuleBook | None = None,
) -> Verdict:
    """Ask the external text-generation endpoint for a verdict.

    Sends the deterministic prompt as JSON; any failure (missing endpoint,
    network error, timeout, unparsable reply) returns the local rule-engine
    verdict marked as a fallback with the failure recorded, unless fallback
    is disabled, in which case the failure raises.
    """
    rules = rules or DEFAULT_RULEBOOK
    prompt = format_prompt(transcript, rules)

    def fallback(reason: str) -> Verdict:
        if not config.fallback_enabled:
            raise RuntimeError(f"explainer failed and fallback is disabled: {reason}")
        local = evaluate_priority(transcript, rules)
        return Verdict(
            decision=local.decision,
            explanation=local.explanation,
            fired_rules=local.fired_rules,
            priority_trace=local.priority_trace,
            source="fallback",
            diagnostic=reason,
        )

    if not config.endpoint:
        return fallback("no endpoint configured")
    headers = {}
    token = os.environ.get(TOKEN_ENV_VAR, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    try:
        response = requests.post(
            config.endpoint,
            json={"prompt": prompt, "max_tokens": config.max_tokens, "temperature": 0},
            headers=headers,
            timeout=config.timeout,
        )
        response.raise_for_status()
        text = response.json()["text"]
        decision, explanation = parse_explainer_response(text)
    except Exception as exc:  # network, HTTP, JSON, or parse failure
        return fallback(f"{type(exc).__name__}: {exc}")
    local = evaluate_priority(transcript, rules)
    return Verdict(
        decision=decision,
        explanation=explanation or local.explanation,
        fired_rules=local.fired_rules,
        priority_trace=local.priority_trace,
        source="external",
    )
