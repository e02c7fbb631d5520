"""Symbolic goto/pickup domain and visit-order sequence enumeration."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Union

START = "Start"


class PreconditionViolation(Exception):
    def __init__(self, fact: str):
        super().__init__(f"precondition violated: {fact}")
        self.fact = fact


@dataclass(frozen=True)
class SymbolicState:
    robot_at: str
    object_at: Mapping[str, str]
    collected: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "object_at", dict(self.object_at))
        object.__setattr__(self, "collected", frozenset(self.collected))
        both = set(self.object_at) & self.collected
        if both:
            raise ValueError(f"objects both placed and collected: {sorted(both)}")

    @classmethod
    def initial(cls, object_assignment: Mapping[str, str]) -> SymbolicState:
        return cls(START, dict(object_assignment), frozenset())

    def all_collected(self) -> bool:
        return not self.object_at


@dataclass(frozen=True)
class Goto:
    from_: str
    to: str

    def __str__(self):
        return f"goto({self.to})"


@dataclass(frozen=True)
class Pickup:
    object: str
    location: str

    def __str__(self):
        return f"pickup({self.object})"


TaskAction = Union[Goto, Pickup]


def apply(state: SymbolicState, a: TaskAction) -> SymbolicState:
    if isinstance(a, Goto):
        if state.robot_at != a.from_:
            raise PreconditionViolation(f"at(robot, {a.from_})")
        if a.to == a.from_:
            raise PreconditionViolation(f"differs({a.from_}, {a.to})")
        return SymbolicState(a.to, state.object_at, state.collected)
    if isinstance(a, Pickup):
        if state.robot_at != a.location:
            raise PreconditionViolation(f"at(robot, {a.location})")
        if state.object_at.get(a.object) != a.location:
            raise PreconditionViolation(f"at({a.object}, {a.location})")
        remaining = {o: l for o, l in state.object_at.items() if o != a.object}
        return SymbolicState(state.robot_at, remaining, state.collected | {a.object})
    raise TypeError(f"unknown action {a!r}")


@dataclass(frozen=True)
class TaskSequence:
    actions: tuple[TaskAction, ...]
    state_space_id: str = ""
    visits: tuple[str, ...] = ()
    heuristic: float = 0.0
    index: int = 0

    def trace(self) -> str:
        return "; ".join(str(a) for a in self.actions)

    def groups(self) -> list[tuple[str, list[str]]]:
        """(location, objects picked there) per visit, in order."""
        out: list[tuple[str, list[str]]] = []
        for a in self.actions:
            if isinstance(a, Goto):
                out.append((a.to, []))
            else:
                out[-1][1].append(a.object)
        return out


def replay(init: SymbolicState, actions) -> SymbolicState:
    s = init
    for a in actions:
        s = apply(s, a)
    return s


def _visit_actions(visits, object_at, prev=START):
    actions: list[TaskAction] = []
    for loc in visits:
        actions.append(Goto(prev, loc))
        for o in sorted(ob for ob, l in object_at.items() if l == loc):
            actions.append(Pickup(o, loc))
        prev = loc
    return tuple(actions)


def enumerate_sequences(
    state_space,
    init: SymbolicState,
    limit: int = 24,
    anchors: Mapping[str, tuple[float, float]] | None = None,
    start_xy: tuple[float, float] = (0.0, 0.0),
) -> list[TaskSequence]:
    """Visit-order permutations, cheapest Euclidean tour first.

    Each location holding an uncollected object is visited exactly once and
    every object there is picked in id order. ``anchors`` gives a point per
    location for the tour heuristic; without it all orders tie and come out
    in lexicographic order.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    locs = sorted({l for l in init.object_at.values()})
    anchors = anchors or {}

    def tour(order):
        if not anchors:
            return 0.0
        total, px, py = 0.0, *start_xy
        for l in order:
            x, y = anchors[l]
            total += math.hypot(x - px, y - py)
            px, py = x, y
        return total

    best = heapq.nsmallest(limit, ((tour(p), p) for p in itertools.permutations(locs)))
    ss_id = getattr(state_space, "id", "")
    out = []
    for i, (h, order) in enumerate(best):
        actions = _visit_actions(order, init.object_at, init.robot_at)
        out.append(TaskSequence(actions, ss_id, tuple(order), h, i))
    return out
