"""Events, finite state machines, bounded trace languages, and machine I/O.

Everything downstream (protocol validation, communicating machines,
projection, the type checker) is built on the two types defined here:
`Event` and `StateMachine`.  Machines are immutable once constructed and
all derived data is precomputed, so they are safe to share freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Union

SEND = "send"
RECV = "recv"
PAIR = "pair"

_KIND_ORDER = {SEND: 0, RECV: 1, PAIR: 2}


@dataclass(frozen=True)
class StateRef:
    """A machine-state used as a payload type (for delegation)."""

    state: str

    def __str__(self) -> str:
        return self.state


Payload = Union[None, str, StateRef]


def _payload_key(payload: Payload) -> str:
    if payload is None:
        return ""
    if isinstance(payload, StateRef):
        return "@" + payload.state
    return "#" + payload


@dataclass(frozen=True)
class Event:
    """A send, receive, or paired message exchange over one channel.

    ``send`` means `sender` enqueues `label` on channel (sender, receiver);
    ``recv`` means `receiver` dequeues it; ``pair`` is the two in immediate
    succession and expands to two letters in any trace.
    """

    kind: str
    sender: str
    receiver: str
    label: str
    payload: Payload = None

    def __post_init__(self) -> None:
        if self.kind not in (SEND, RECV, PAIR):
            raise ValueError(f"bad event kind {self.kind!r}")
        if not self.sender or not self.receiver or self.label is None:
            raise ValueError("events need a sender, receiver, and label")
        if self.sender == self.receiver:
            raise ValueError(f"self-channel event {self.sender}>{self.receiver}")

    @property
    def channel(self) -> tuple[str, str]:
        return (self.sender, self.receiver)

    @property
    def subject(self) -> str:
        """The participant performing this action (sender of a send, etc.)."""
        if self.kind == RECV:
            return self.receiver
        return self.sender

    def sort_key(self):
        return (self.sender, self.receiver, self.label,
                _KIND_ORDER[self.kind], _payload_key(self.payload))

    def letters(self) -> tuple["Event", ...]:
        """The trace letters this transition label contributes."""
        if self.kind == PAIR:
            return (Event(SEND, self.sender, self.receiver, self.label, self.payload),
                    Event(RECV, self.sender, self.receiver, self.label, self.payload))
        return (self,)

    def message(self) -> tuple[str, str]:
        return (self.label, _payload_key(self.payload))

    def __str__(self) -> str:
        if self.payload is None:
            suffix = ""
        elif isinstance(self.payload, StateRef):
            suffix = f"<@{self.payload.state}>"
        else:
            suffix = f"<{self.payload}>"
        if self.kind == SEND:
            return f"{self.sender}>{self.receiver}!{self.label}{suffix}"
        if self.kind == RECV:
            return f"{self.sender}>{self.receiver}?{self.label}{suffix}"
        return f"{self.sender}->{self.receiver}:{self.label}{suffix}"


def send(sender: str, receiver: str, label: str, payload: Payload = None) -> Event:
    return Event(SEND, sender, receiver, label, payload)


def recv(sender: str, receiver: str, label: str, payload: Payload = None) -> Event:
    return Event(RECV, sender, receiver, label, payload)


def pair(sender: str, receiver: str, label: str, payload: Payload = None) -> Event:
    return Event(PAIR, sender, receiver, label, payload)


Word = tuple[Event, ...]

Transition = tuple[str, Optional[Event], str]


def _transition_key(t: Transition):
    src, ev, dst = t
    return (src, (1,) if ev is None else (0,) + ev.sort_key(), dst)


class StateMachine:
    """A finite state machine over events, with epsilon transitions.

    States are opaque strings.  The transition list is normalised to a
    canonical order so that two machines built from the same data compare
    and serialise identically.
    """

    __slots__ = ("states", "initial", "finals", "transitions", "_out", "_key")

    def __init__(self, states: Iterable[str], initial: str,
                 finals: Iterable[str], transitions: Iterable[Transition]):
        self.states = frozenset(states)
        self.initial = initial
        self.finals = frozenset(finals)
        self.transitions = tuple(sorted(set(transitions), key=_transition_key))
        if self.initial not in self.states:
            raise ValueError(f"initial state {initial!r} not a state")
        if not self.finals <= self.states:
            raise ValueError("final states must be states")
        out: dict[str, list[tuple[Optional[Event], str]]] = {q: [] for q in self.states}
        for src, ev, dst in self.transitions:
            if src not in self.states or dst not in self.states:
                raise ValueError(f"transition endpoint not a state: {(src, ev, dst)}")
            out[src].append((ev, dst))
        self._out = {q: tuple(v) for q, v in out.items()}
        self._key = (self.states, self.initial, self.finals, self.transitions)

    def out(self, q: str) -> tuple[tuple[Optional[Event], str], ...]:
        return self._out[q]

    def __eq__(self, other) -> bool:
        return isinstance(other, StateMachine) and self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return (f"StateMachine({len(self.states)} states, "
                f"{len(self.transitions)} transitions, initial={self.initial!r})")

    # -- structural predicates ------------------------------------------

    def alphabet(self) -> frozenset[Event]:
        return frozenset(ev for _, ev, _ in self.transitions if ev is not None)

    def participants(self) -> tuple[str, ...]:
        seen = set()
        for ev in self.alphabet():
            seen.add(ev.sender)
            seen.add(ev.receiver)
        return tuple(sorted(seen))

    def is_sink(self, q: str) -> bool:
        return not self._out[q]

    def is_sink_final(self) -> bool:
        return all((q in self.finals) == self.is_sink(q) for q in self.states)

    def is_dense(self) -> bool:
        """Epsilon transitions are only allowed as a state's sole exit."""
        for q in self.states:
            outs = self._out[q]
            if any(ev is None for ev, _ in outs) and len(outs) != 1:
                return False
        return True

    def is_deterministic(self) -> bool:
        """No state has two outgoing transitions with the same label."""
        for q in self.states:
            labels = [ev for ev, _ in self._out[q]]
            if len(labels) != len(set(labels)):
                return False
        return True

    def has_pure_eps_cycle(self) -> bool:
        """Detect a cycle consisting solely of epsilon transitions."""
        colour: dict[str, int] = {}

        def visit(q: str) -> bool:
            colour[q] = 1
            for ev, dst in self._out[q]:
                if ev is not None:
                    continue
                c = colour.get(dst, 0)
                if c == 1 or (c == 0 and visit(dst)):
                    return True
            colour[q] = 2
            return False

        return any(visit(q) for q in self.states if colour.get(q, 0) == 0)

    # -- reachability ----------------------------------------------------

    def eps_closure(self, states: Iterable[str]) -> frozenset[str]:
        seen = set(states)
        stack = list(seen)
        while stack:
            q = stack.pop()
            for ev, dst in self._out[q]:
                if ev is None and dst not in seen:
                    seen.add(dst)
                    stack.append(dst)
        return frozenset(seen)

    def reachable_states(self) -> frozenset[str]:
        seen = {self.initial}
        stack = [self.initial]
        while stack:
            q = stack.pop()
            for _, dst in self._out[q]:
                if dst not in seen:
                    seen.add(dst)
                    stack.append(dst)
        return frozenset(seen)

    def useful_states(self) -> frozenset[str]:
        """States from which some maximal run exists (a final, or a cycle)."""
        on_cycle = _states_on_cycles(self)
        good = set(self.finals) | on_cycle
        incoming: dict[str, set[str]] = {q: set() for q in self.states}
        for src, _, dst in self.transitions:
            incoming[dst].add(src)
        stack = list(good)
        while stack:
            q = stack.pop()
            for p in incoming[q]:
                if p not in good:
                    good.add(p)
                    stack.append(p)
        return frozenset(good)

    def trim(self) -> "StateMachine":
        """Drop states that are unreachable or admit no maximal run."""
        keep = self.reachable_states() & self.useful_states()
        if self.initial not in keep:
            # Empty language: keep a lone initial state.
            return StateMachine({self.initial}, self.initial, frozenset(), ())
        trans = [(s, e, d) for s, e, d in self.transitions if s in keep and d in keep]
        return StateMachine(keep, self.initial, self.finals & keep, trans)

    def rename(self, mapping: Mapping[str, str]) -> "StateMachine":
        def m(q: str) -> str:
            return mapping.get(q, q)

        return StateMachine({m(q) for q in self.states}, m(self.initial),
                            {m(q) for q in self.finals},
                            [(m(s), e, m(d)) for s, e, d in self.transitions])


def _states_on_cycles(m: StateMachine) -> set[str]:
    """States lying on some cycle (Tarjan SCCs plus self loops)."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    result: set[str] = set()

    def strongconnect(v: str) -> None:
        work = [(v, 0)]
        while work:
            node, i = work.pop()
            if i == 0:
                index[node] = low[node] = counter[0]
                counter[0] += 1
                stack.append(node)
                on_stack.add(node)
            recurse = False
            outs = m.out(node)
            while i < len(outs):
                _, w = outs[i]
                i += 1
                if w not in index:
                    work.append((node, i))
                    work.append((w, 0))
                    recurse = True
                    break
                if w in on_stack:
                    low[node] = min(low[node], index[w])
            if recurse:
                continue
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                if len(comp) > 1:
                    result.update(comp)
                elif any(d == node for _, d in m.out(node)):
                    result.add(node)
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])

    for q in m.states:
        if q not in index:
            strongconnect(q)
    return result


def expand_pairs(m: StateMachine) -> StateMachine:
    """Split each paired transition into a send and its immediate receive."""
    if all(ev is None or ev.kind != PAIR for _, ev, _ in m.transitions):
        return m
    states = set(m.states)
    trans: list[Transition] = []
    for idx, (src, ev, dst) in enumerate(m.transitions):
        if ev is None or ev.kind != PAIR:
            trans.append((src, ev, dst))
            continue
        mid = f"{src}~{idx}"
        while mid in states:
            mid += "'"
        states.add(mid)
        snd, rcv = ev.letters()
        trans.append((src, snd, mid))
        trans.append((mid, rcv, dst))
    return StateMachine(states, m.initial, m.finals, trans)


# -- bounded trace languages -------------------------------------------


@dataclass(frozen=True)
class TraceFlags:
    complete: bool
    extendable: bool


TraceSet = dict  # Word -> TraceFlags


def maximal_traces_upto(m: StateMachine, k: int) -> TraceSet:
    """All run traces of length <= k, flagged complete and/or extendable.

    A trace is complete when some run with that trace ends in a final
    state, and extendable when some such run can consume a further
    letter.  Epsilon transitions contribute no letters.
    """
    if k < 0:
        raise ValueError("bound must be non-negative")
    m = expand_pairs(m)
    result: TraceSet = {}
    frontier: dict[Word, frozenset[str]] = {(): m.eps_closure({m.initial})}
    for length in range(k + 1):
        nxt: dict[Word, frozenset[str]] = {}
        for word, stateset in frontier.items():
            moves: dict[Event, set[str]] = {}
            for q in stateset:
                for ev, dst in m.out(q):
                    if ev is not None:
                        moves.setdefault(ev, set()).add(dst)
            result[word] = TraceFlags(
                complete=bool(stateset & m.finals),
                extendable=bool(moves),
            )
            if length < k:
                for ev in sorted(moves, key=Event.sort_key):
                    nxt[word + (ev,)] = m.eps_closure(moves[ev])
        frontier = nxt
    return result


def complete_traces(traces: TraceSet) -> frozenset[Word]:
    return frozenset(w for w, f in traces.items() if f.complete)


def extendable_traces(traces: TraceSet) -> frozenset[Word]:
    return frozenset(w for w, f in traces.items() if f.extendable)


def languages_equal_upto(a: StateMachine, b: StateMachine, k: int) -> bool:
    """Compare complete-trace sets and extendable-prefix sets up to k."""
    ta = maximal_traces_upto(a, k)
    tb = maximal_traces_upto(b, k)
    return (complete_traces(ta) == complete_traces(tb)
            and extendable_traces(ta) == extendable_traces(tb))


def machine_isomorphic(a: StateMachine, b: StateMachine) -> Optional[dict[str, str]]:
    """Find a state renaming turning `a` into `b`, or None.

    Backtracking search seeded at the initial states; adequate for the
    small machines this library manipulates.
    """
    if (len(a.states) != len(b.states) or len(a.finals) != len(b.finals)
            or len(a.transitions) != len(b.transitions)):
        return None

    def signature(m: StateMachine, q: str):
        labels = tuple(sorted((() if ev is None else ev.sort_key())
                              for ev, _ in m.out(q)))
        return (q in m.finals, labels)

    mapping: dict[str, str] = {}
    used: set[str] = set()

    def extend(qa: str, qb: str) -> bool:
        if qa in mapping:
            return mapping[qa] == qb
        if qb in used or signature(a, qa) != signature(b, qb):
            return False
        mapping[qa] = qb
        used.add(qb)
        outs_a = a.out(qa)
        outs_b = b.out(qb)
        by_label: dict = {}
        for ev, dst in outs_b:
            key = None if ev is None else ev.sort_key()
            by_label.setdefault(key, []).append(dst)

        def assign(i: int) -> bool:
            if i == len(outs_a):
                return True
            ev, dst = outs_a[i]
            key = None if ev is None else ev.sort_key()
            for cand in by_label.get(key, []):
                snapshot = dict(mapping), set(used)
                if extend(dst, cand) and assign(i + 1):
                    return True
                mapping.clear()
                mapping.update(snapshot[0])
                used.clear()
                used.update(snapshot[1])
            return False

        if assign(0):
            return True
        del mapping[qa]
        used.discard(qb)
        return False

    if extend(a.initial, b.initial) and len(mapping) == len(a.states):
        return dict(mapping)
    return None


# -- serialisation ------------------------------------------------------


def _payload_to_json(payload: Payload):
    if payload is None:
        return None
    if isinstance(payload, StateRef):
        return {"state": payload.state}
    return payload


def _payload_from_json(data) -> Payload:
    if data is None:
        return None
    if isinstance(data, dict):
        return StateRef(data["state"])
    return data


def machine_to_json(m: StateMachine) -> dict:
    m = expand_pairs(m)
    transitions = []
    for src, ev, dst in m.transitions:
        if ev is None:
            event = {"kind": "eps"}
        else:
            event = {
                "kind": ev.kind,
                "sender": ev.sender,
                "receiver": ev.receiver,
                "label": ev.label,
                "payload": _payload_to_json(ev.payload),
            }
        transitions.append({"from": src, "event": event, "to": dst})
    return {
        "states": sorted(m.states),
        "initial": m.initial,
        "finals": sorted(m.finals),
        "transitions": transitions,
    }


def machine_from_json(data: dict) -> StateMachine:
    transitions: list[Transition] = []
    for t in data["transitions"]:
        event = t["event"]
        if event["kind"] == "eps":
            ev = None
        else:
            ev = Event(event["kind"], event["sender"], event["receiver"],
                       event["label"], _payload_from_json(event.get("payload")))
        transitions.append((t["from"], ev, t["to"]))
    return StateMachine(data["states"], data["initial"], data["finals"], transitions)


def dump_machine(m: StateMachine) -> str:
    return json.dumps(machine_to_json(m), indent=2, sort_keys=True) + "\n"


def load_machine(text: str) -> StateMachine:
    return machine_from_json(json.loads(text))


def machine_to_dot(m: StateMachine, name: str = "machine") -> str:
    lines = [f"digraph \"{name}\" {{", "  rankdir=LR;",
             "  __start [shape=point];"]
    for q in sorted(m.states):
        shape = "doublecircle" if q in m.finals else "circle"
        lines.append(f"  \"{q}\" [shape={shape}];")
    lines.append(f"  __start -> \"{m.initial}\";")
    for src, ev, dst in m.transitions:
        label = "ε" if ev is None else str(ev)
        lines.append(f"  \"{src}\" -> \"{dst}\" [label=\"{label}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"
