"""Deterministic trend-mining agent.

A five-node plan (planning -> retrieval -> filtering -> expansion ->
validation) executed over a small tool suite, with an explicit state
transition function, append-only episode memory, and a persistent
long-term memory that only validation outcomes may touch. Every episode
produces a replayable trace.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Corpus, QueryRecord, hashed_bag_of_tokens
from .encoders import EncoderModel
from .hnsw import HnswIndex

NODES = ("planning", "retrieval", "filtering", "expansion", "validation")
DAG_EDGES = {
    "planning": "retrieval",
    "retrieval": "filtering",
    "filtering": "expansion",
    "expansion": "validation",
    "validation": None,
}
PERMITTED_ACTIONS = {
    "planning": {"plan"},
    "retrieval": {"fetch_trends"},
    "filtering": {"semantic_filter"},
    "expansion": {"expand_query"},
    "validation": {"content_lookup", "validate"},
}
LOW_FIT_CATEGORIES = {"news", "sports", "politics"}

EXPANSION_TEMPLATES = [
    ("Description", "{term} ideas"),
    ("StyleDetail", "{term} aesthetic"),
    ("UseCase", "how to style {term}"),
    ("UseCase", "{term} for beginners"),
    ("StyleDetail", "{term} color palette"),
]


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class TrendSignal:
    term: str
    region: str = "US"
    timespan: str = "7d"
    velocity: float = 0.0
    category: str = ""

    def __post_init__(self) -> None:
        if not self.term.strip():
            raise AgentError("trend term is empty")
        if not np.isfinite(self.velocity):
            raise AgentError(f"velocity for {self.term!r} is not finite")


@dataclass
class AgentState:
    cursor: str = "planning"
    short_memory: list[dict] = field(default_factory=list)
    long_memory: dict[str, dict] = field(default_factory=dict)
    emitted: list[QueryRecord] = field(default_factory=list)


def transition(state: AgentState, action: dict, observation: dict) -> AgentState:
    """Pure state transition: append the (action, observation) pair, advance
    the cursor on moves, and fold validation outcomes into long memory."""
    new = AgentState(
        cursor=state.cursor,
        short_memory=list(state.short_memory),
        long_memory=copy.deepcopy(state.long_memory),
        emitted=list(state.emitted),
    )
    kind = action.get("kind")
    if kind == "move":
        target = action.get("to")
        if DAG_EDGES.get(state.cursor) != target:
            raise AgentError(f"no plan edge {state.cursor} -> {target}")
        new.cursor = target
    elif kind == "tool":
        tool = action.get("tool")
        if tool not in PERMITTED_ACTIONS[state.cursor]:
            raise AgentError(
                f"action {tool!r} not permitted at node {state.cursor!r} "
                f"(allowed: {sorted(PERMITTED_ACTIONS[state.cursor])})"
            )
        if state.cursor == "validation" and tool == "validate":
            for outcome in observation.get("outcomes", []):
                record = new.long_memory.setdefault(
                    outcome["term"],
                    {"accepted": 0, "rejected": 0, "last_velocity": 0.0, "patterns": []},
                )
                record["accepted" if outcome["accepted"] else "rejected"] += 1
                record["last_velocity"] = outcome["velocity"]
                if outcome["accepted"] and outcome["pattern"] not in record["patterns"]:
                    record["patterns"].append(outcome["pattern"])
            for query in observation.get("emitted", []):
                new.emitted.append(QueryRecord.from_json(query))
    else:
        raise AgentError(f"unknown action kind {kind!r}")
    new.short_memory.append(
        {"node": state.cursor, "action": action, "observation": observation}
    )
    return new


@dataclass
class ToolSuite:
    fetch_trends: Callable[[str, str], list[TrendSignal]]
    semantic_filter: Callable[[TrendSignal, float], tuple[float, bool]]
    content_lookup: Callable[[str], tuple[int, float, bool]]
    expand_query: Callable[[TrendSignal, dict[str, dict], int], list[tuple[QueryRecord, str]]]


@dataclass
class AgentConfig:
    regions: list[str] = field(default_factory=lambda: ["US"])
    timespan: str = "7d"
    filter_threshold: float = 0.5
    min_count: int = 25
    relevance_floor: float = 0.4
    velocity_floor: float = 0.2
    expansions_per_trend: int = 3


def make_semantic_filter(taxonomy: list[tuple[str, str]]):
    """Rule-based relevance scorer: zero for low-fit categories, else the
    best token-bag cosine against the taxonomy terms (exact match scores 1)."""
    term_vecs = [(term, hashed_bag_of_tokens(term, 256)) for term, _ in taxonomy]

    def semantic_filter(trend: TrendSignal, threshold: float) -> tuple[float, bool]:
        if not 0.0 <= threshold <= 1.0:
            raise AgentError(f"threshold {threshold} outside [0, 1]")
        if trend.category.lower() in LOW_FIT_CATEGORIES:
            return 0.0, False
        if any(trend.term == term for term, _ in taxonomy):
            return 1.0, True
        vec = hashed_bag_of_tokens(trend.term, 256)
        best = max((float(vec @ tv) for _, tv in term_vecs), default=0.0)
        p = float(np.clip(best, 0.0, 1.0))
        return p, p >= threshold

    return semantic_filter


def make_content_lookup(
    corpus: Corpus,
    index: HnswIndex,
    text_encoder: EncoderModel,
    min_count: int,
    relevance_floor: float,
):
    """Probe the index with the closest known query embedding for the text
    (token-overlap match), count hits above the relevance floor."""
    query_tokens = [(q, set(q.text.lower().split())) for q in corpus.queries if q.embedding is not None]

    def content_lookup(text: str) -> tuple[int, float, bool]:
        tokens = set(text.lower().split())
        best_query, best_overlap = None, 0.0
        for query, qtok in query_tokens:
            overlap = len(tokens & qtok) / max(1, len(tokens | qtok))
            if overlap > best_overlap:
                best_query, best_overlap = query, overlap
        if best_query is None or best_overlap < 0.2 or len(index) == 0:
            return 0, 0.0, min_count <= 0
        probe = text_encoder.encode(best_query.embedding)
        hits = index.search(probe, k=max(4 * min_count, 100))
        counted = [sig for sig, sim in hits if sim >= relevance_floor]
        if not counted:
            return 0, 0.0, min_count <= 0
        mean_quality = float(
            np.mean([corpus.pins[s].perception_score for s in counted if s in corpus.pins])
        )
        return len(counted), mean_quality, len(counted) > min_count

    return content_lookup


def make_expand_query(taxonomy: list[tuple[str, str]]):
    """Deterministic template expander; reuses accepted patterns from long
    memory as few-shot exemplars when available."""
    categories = {term: cat for term, cat in taxonomy}

    def expand_query(
        trend: TrendSignal, long_memory: dict[str, dict], n: int
    ) -> list[tuple[QueryRecord, str]]:
        if not taxonomy:
            raise AgentError("taxonomy is empty")
        templates = list(EXPANSION_TEMPLATES)
        record = long_memory.get(trend.term, {})
        exemplars = record.get("patterns", [])
        for pattern in reversed(exemplars):
            matched = next((t for t in templates if t[1] == pattern), None)
            if matched:
                templates.remove(matched)
                templates.insert(0, matched)
        out: list[tuple[QueryRecord, str]] = []
        seen = set()
        for category, pattern in templates:
            if len(out) >= n:
                break
            text = pattern.format(term=trend.term, cat=categories.get(trend.term, trend.category))
            if text in seen:
                continue
            seen.add(text)
            out.append((QueryRecord(text=text, category=category), pattern))
        return out

    return expand_query


def make_fetch_trends(trends_path: str | Path):
    def fetch_trends(region: str, timespan: str) -> list[TrendSignal]:
        out = []
        with open(trends_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                signal = TrendSignal(
                    term=obj["term"],
                    region=obj.get("region", "US"),
                    timespan=obj.get("timespan", "7d"),
                    velocity=float(obj.get("velocity", 0.0)),
                    category=obj.get("category", ""),
                )
                if signal.region == region and signal.timespan == timespan:
                    out.append(signal)
        return sorted(out, key=lambda s: s.term)

    return fetch_trends


def default_tools(
    corpus: Corpus,
    index: HnswIndex,
    text_encoder: EncoderModel,
    taxonomy: list[tuple[str, str]],
    trends_path: str | Path,
    config: AgentConfig,
) -> ToolSuite:
    return ToolSuite(
        fetch_trends=make_fetch_trends(trends_path),
        semantic_filter=make_semantic_filter(taxonomy),
        content_lookup=make_content_lookup(
            corpus, index, text_encoder, config.min_count, config.relevance_floor
        ),
        expand_query=make_expand_query(taxonomy),
    )


def _trend_json(trend: TrendSignal) -> dict:
    return {
        "term": trend.term,
        "region": trend.region,
        "timespan": trend.timespan,
        "velocity": trend.velocity,
        "category": trend.category,
    }


def run_episode(
    config: AgentConfig,
    tools: ToolSuite,
    long_memory: dict[str, dict] | None = None,
    seed: int = 0,
) -> tuple[list[QueryRecord], list[dict], AgentState]:
    """One pass through the five-node plan. Returns the validated queries,
    a replayable trace, and the final state."""
    state = AgentState(long_memory=copy.deepcopy(long_memory or {}))
    trace: list[dict] = []

    def step(action: dict, observation: dict) -> None:
        nonlocal state
        trace.append({"node": state.cursor, "action": action, "observation": observation})
        state = transition(state, action, observation)

    # planning: fixed strategy over configured regions (fatal on failure)
    plan = {
        "regions": sorted(config.regions),
        "timespan": config.timespan,
        "nodes": list(NODES),
    }
    step({"kind": "tool", "tool": "plan"}, {"plan": plan})
    step({"kind": "move", "to": "retrieval"}, {})

    # retrieval: one fetch per region; observations merge in sorted key order
    trends: list[TrendSignal] = []
    for region in plan["regions"]:
        try:
            fetched = tools.fetch_trends(region, config.timespan)
            observation = {"region": region, "trends": [_trend_json(t) for t in fetched]}
            trends.extend(fetched)
        except Exception as exc:  # fail-soft per tool call
            observation = {"region": region, "error": str(exc)}
        step({"kind": "tool", "tool": "fetch_trends", "region": region}, observation)
    step({"kind": "move", "to": "filtering"}, {})

    kept: list[TrendSignal] = []
    for trend in trends:
        try:
            p, keep = tools.semantic_filter(trend, config.filter_threshold)
            observation = {"term": trend.term, "p": p, "keep": keep}
            if keep:
                kept.append(trend)
        except Exception as exc:
            observation = {"term": trend.term, "error": str(exc)}
        step({"kind": "tool", "tool": "semantic_filter", "term": trend.term}, observation)
    step({"kind": "move", "to": "expansion"}, {})

    expansions: list[tuple[TrendSignal, QueryRecord, str]] = []
    for trend in kept:
        try:
            variants = tools.expand_query(trend, state.long_memory, config.expansions_per_trend)
            observation = {
                "term": trend.term,
                "variants": [
                    {"query": q.to_json(), "pattern": pattern} for q, pattern in variants
                ],
            }
            expansions.extend((trend, q, pattern) for q, pattern in variants)
        except Exception as exc:
            observation = {"term": trend.term, "error": str(exc)}
        step({"kind": "tool", "tool": "expand_query", "term": trend.term}, observation)
    step({"kind": "move", "to": "validation"}, {})

    outcomes: list[dict] = []
    emitted: list[dict] = []
    for trend, query, pattern in expansions:
        try:
            count, mean_quality, sufficient = tools.content_lookup(query.text)
            lookup_obs = {
                "query": query.text,
                "count": count,
                "mean_quality": mean_quality,
                "sufficient": sufficient,
            }
        except Exception as exc:
            lookup_obs = {"query": query.text, "error": str(exc)}
            sufficient = False
        step({"kind": "tool", "tool": "content_lookup", "query": query.text}, lookup_obs)
        accepted = bool(sufficient and trend.velocity >= config.velocity_floor)
        outcomes.append(
            {
                "term": trend.term,
                "query": query.text,
                "pattern": pattern,
                "velocity": trend.velocity,
                "accepted": accepted,
            }
        )
        if accepted:
            emitted.append(query.to_json())
    step(
        {"kind": "tool", "tool": "validate"},
        {"outcomes": outcomes, "emitted": emitted},
    )
    return list(state.emitted), trace, state


def replay_trace(trace: list[dict], long_memory: dict[str, dict] | None = None) -> AgentState:
    """Re-apply every traced transition from the initial state."""
    state = AgentState(long_memory=copy.deepcopy(long_memory or {}))
    for record in trace:
        if record["node"] != state.cursor:
            raise AgentError(
                f"trace node {record['node']!r} diverges from cursor {state.cursor!r}"
            )
        state = transition(state, record["action"], record["observation"])
    return state


def write_trace(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, record in enumerate(trace):
            fh.write(json.dumps({"step": i, **record}, separators=(",", ":")) + "\n")


def load_trace(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                obj.pop("step", None)
                out.append(obj)
    return out


def save_long_memory(memory: dict[str, dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(memory, indent=2, sort_keys=True), encoding="utf-8")


def load_long_memory(path: str | Path) -> dict[str, dict]:
    p = Path(path)
    if not p.exists():
        return {}
    return json.loads(p.read_text(encoding="utf-8"))
