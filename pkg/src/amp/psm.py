"""Protocol state machine validation: buffer bounds, density, feasible
eventual reception, choice classification, channel-bound inference.

Validation walks a word-level configuration graph: each node holds the
set of machine states a word can reach together with the word's channel
contents.  Because channel contents are a function of the word alone,
this determinised view answers language-level questions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (Event, PAIR, RECV, SEND, StateMachine, Word, expand_pairs)

DEFAULT_CONFIG_CAP = 1_000_000

Channel = tuple[str, str]
Msg = tuple[str, str]  # (label, payload key)


class PsmError(Exception):
    """A validation diagnostic, carrying a witness where one exists."""

    def __init__(self, message: str, witness: Optional[Word] = None):
        super().__init__(message)
        self.witness = witness


class NotDense(PsmError):
    pass


class NonFifo(PsmError):
    pass


class UnboundedChannel(PsmError):
    pass


class FerViolation(PsmError):
    pass


class UnboundedLoop(PsmError):
    """Channel-bound inference failed on a loop with no return traffic."""


@dataclass(frozen=True)
class Psm:
    """A validated protocol machine with its certified buffer bounds."""

    machine: StateMachine
    bound_total: int
    bound_by_channel: dict
    dense: bool = True
    fer: bool = True

    @property
    def sum_one(self) -> bool:
        return self.bound_total <= 1


Config = tuple[frozenset, tuple]  # (state set, sorted non-empty channel queues)


@dataclass
class ConfigGraph:
    """Reachable (state set, channel contents) nodes of a machine."""

    machine: StateMachine
    nodes: list = field(default_factory=list)
    index: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)   # node id -> tuple[(Event, id)]
    parent: dict = field(default_factory=dict)  # node id -> (id, Event)

    def word_to(self, node_id: int) -> Word:
        events = []
        while node_id in self.parent:
            node_id, ev = self.parent[node_id]
            events.append(ev)
        return tuple(reversed(events))


def _queues_get(queues: tuple, channel: Channel) -> tuple:
    for ch, content in queues:
        if ch == channel:
            return content
    return ()


def _queues_set(queues: tuple, channel: Channel, content: tuple) -> tuple:
    rest = [(ch, c) for ch, c in queues if ch != channel]
    if content:
        rest.append((channel, content))
    return tuple(sorted(rest))


def build_config_graph(machine: StateMachine, *,
                       config_cap: int = DEFAULT_CONFIG_CAP,
                       queue_cap: Optional[int] = None) -> ConfigGraph:
    """Explore the word-level configuration graph, checking FIFO discipline.

    Raises NonFifo on a receive that cannot consume its channel head, or
    on a complete trace with unmatched sends; raises UnboundedChannel
    when exploration outgrows the caps.
    """
    machine = expand_pairs(machine).trim()
    if queue_cap is None:
        queue_cap = max(4, 2 * len(machine.states))
    graph = ConfigGraph(machine)
    start: Config = (machine.eps_closure({machine.initial}), ())
    graph.nodes.append(start)
    graph.index[start] = 0
    frontier = [0]
    while frontier:
        node_id = frontier.pop(0)
        stateset, queues = graph.nodes[node_id]
        if stateset & machine.finals and queues:
            raise NonFifo("complete trace leaves unmatched sends",
                          graph.word_to(node_id))
        moves: dict[Event, set] = {}
        for q in stateset:
            for ev, dst in machine.out(q):
                if ev is not None:
                    moves.setdefault(ev, set()).add(dst)
        out = []
        for ev in sorted(moves, key=Event.sort_key):
            targets = machine.eps_closure(moves[ev])
            content = _queues_get(queues, ev.channel)
            if ev.kind == SEND:
                if len(content) >= queue_cap:
                    raise UnboundedChannel(
                        f"channel {ev.channel} exceeded queue cap {queue_cap}",
                        graph.word_to(node_id) + (ev,))
                new_queues = _queues_set(queues, ev.channel, content + (ev.message(),))
            elif ev.kind == RECV:
                if not content or content[0] != ev.message():
                    raise NonFifo(
                        f"receive {ev} does not match the channel head",
                        graph.word_to(node_id) + (ev,))
                new_queues = _queues_set(queues, ev.channel, content[1:])
            else:  # pragma: no cover - pairs were expanded above
                raise AssertionError(ev)
            succ: Config = (targets, new_queues)
            if succ not in graph.index:
                graph.index[succ] = len(graph.nodes)
                graph.nodes.append(succ)
                graph.parent[graph.index[succ]] = (node_id, ev)
                if len(graph.nodes) > config_cap:
                    raise UnboundedChannel(
                        f"exploration exceeded {config_cap} configurations")
                frontier.append(graph.index[succ])
            out.append((ev, graph.index[succ]))
        graph.edges[node_id] = tuple(out)
    return graph


def _maximal_capable(graph: ConfigGraph) -> set[int]:
    """Nodes from which a maximal run exists: reach a final node or a cycle."""
    finals = {i for i, (states, _) in enumerate(graph.nodes)
              if states & graph.machine.finals}
    on_cycle: set[int] = set()
    colour: dict[int, int] = {}

    def visit(v: int) -> None:
        stack = [(v, 0)]
        path: list[int] = []
        on_path: set[int] = set()
        while stack:
            node, i = stack.pop()
            if i == 0:
                colour[node] = 1
                path.append(node)
                on_path.add(node)
            succs = graph.edges.get(node, ())
            advanced = False
            while i < len(succs):
                _, w = succs[i]
                i += 1
                if colour.get(w, 0) == 0:
                    stack.append((node, i))
                    stack.append((w, 0))
                    advanced = True
                    break
                if w in on_path or w == node:
                    on_cycle.add(w)
            if advanced:
                continue
            colour[node] = 2
            path.pop()
            on_path.discard(node)

    for v in range(len(graph.nodes)):
        if colour.get(v, 0) == 0:
            visit(v)

    good = finals | on_cycle
    incoming: dict[int, set[int]] = {i: set() for i in range(len(graph.nodes))}
    for src, succs in graph.edges.items():
        for _, dst in succs:
            incoming[dst].add(src)
    work = list(good)
    while work:
        v = work.pop()
        for p in incoming[v]:
            if p not in good:
                good.add(p)
                work.append(p)
    return good


def check_fer(graph: ConfigGraph) -> tuple[bool, Optional[Word]]:
    """Feasible eventual reception on the configuration graph.

    From every node with pending messages, each channel's backlog must be
    fully consumable along some continuation that still extends to a
    maximal run.  Returns a witness word reaching the stuck send if not.
    """
    capable = _maximal_capable(graph)
    for node_id, (_, queues) in enumerate(graph.nodes):
        for channel, content in queues:
            need = len(content)
            seen = {(node_id, 0)}
            stack = [(node_id, 0)]
            found = False
            while stack and not found:
                v, consumed = stack.pop()
                if consumed == need:
                    if v in capable:
                        found = True
                    continue
                for ev, w in graph.edges.get(v, ()):
                    c2 = consumed + (1 if ev.kind == RECV and ev.channel == channel
                                     else 0)
                    c2 = min(c2, need)
                    if c2 == need and w in capable:
                        found = True
                        break
                    if (w, c2) not in seen:
                        seen.add((w, c2))
                        stack.append((w, c2))
            if not found:
                return False, graph.word_to(node_id)
    return True, None


def validate(machine: StateMachine, *,
             config_cap: int = DEFAULT_CONFIG_CAP,
             queue_cap: Optional[int] = None) -> Psm:
    """Certify a machine as a protocol state machine.

    Checks density syntactically, then walks the configuration graph to
    certify the least buffer bounds and feasible eventual reception.
    The first violated condition is raised with a witness path.
    """
    machine = expand_pairs(machine)
    if not machine.is_dense():
        raise NotDense("a state with an epsilon transition has other exits")
    if machine.has_pure_eps_cycle():
        raise NotDense("machine contains a cycle of epsilon transitions")
    trimmed = machine.trim()
    graph = build_config_graph(trimmed, config_cap=config_cap, queue_cap=queue_cap)
    per_channel: dict[Channel, int] = {}
    total = 0
    for _, queues in graph.nodes:
        total = max(total, sum(len(c) for _, c in queues))
        for ch, content in queues:
            per_channel[ch] = max(per_channel.get(ch, 0), len(content))
    ok, witness = check_fer(graph)
    if not ok:
        raise FerViolation("a pending send can never be received", witness)
    return Psm(machine=trimmed, bound_total=total,
               bound_by_channel=dict(sorted(per_channel.items())))


# -- choice classification -----------------------------------------------

DIRECTED = "directed"
SENDER_DRIVEN = "sender-driven"
MIXED = "mixed"
NON_DETERMINISTIC = "non-deterministic"


@dataclass(frozen=True)
class ChoiceReport:
    kind: str
    choice: dict  # branching state -> deciding sender, where defined


def _branch_events(machine: StateMachine, q: str) -> list[Event]:
    return [ev for ev, _ in machine.out(q) if ev is not None]


def classify_choice(machine: StateMachine) -> ChoiceReport:
    """Classify branching: directed < sender-driven < mixed < non-deterministic.

    Sender-driven means the machine is deterministic and every branching
    state offers only send actions by a single participant; directed
    additionally fixes the receiver; mixed requires determinism only.
    """
    if isinstance(machine, Psm):
        machine = machine.machine
    if not machine.is_deterministic():
        return ChoiceReport(NON_DETERMINISTIC, {})
    choice: dict[str, str] = {}
    sender_driven = True
    directed = True
    for q in sorted(machine.states):
        events = _branch_events(machine, q)
        senders = {ev.sender for ev in events if ev.kind in (SEND, PAIR)}
        if len(senders) == 1:
            choice[q] = next(iter(senders))
        if events and (any(ev.kind == RECV for ev in events)
                       or len(senders) != 1
                       or len({ev.receiver for ev in events}) != 1):
            directed = False
        if len(events) <= 1:
            continue
        if any(ev.kind == RECV for ev in events) or len(senders) != 1:
            sender_driven = False
    if directed:
        return ChoiceReport(DIRECTED, choice)
    if sender_driven:
        return ChoiceReport(SENDER_DRIVEN, choice)
    return ChoiceReport(MIXED, choice)


def single_sender_branching(machine: StateMachine) -> tuple[bool, Optional[str]]:
    """Every branching state offers only sends by one participant.

    This is the structural half of tameness; unlike sender-driven choice
    it tolerates duplicated actions, which the projection pipeline
    rejects later with a semantic witness instead.
    """
    for q in sorted(machine.states):
        events = _branch_events(machine, q)
        if len(events) <= 1:
            continue
        if any(ev.kind == RECV for ev in events):
            return False, q
        if len({ev.sender for ev in events}) != 1:
            return False, q
    return True, None


# -- channel-bound inference ----------------------------------------------


def detected_channels(machine: StateMachine) -> frozenset[Channel]:
    """Channels where some send is not immediately followed by its
    unique matching receive."""
    machine = expand_pairs(machine)
    detected: set[Channel] = set()
    for src, ev, dst in machine.transitions:
        if ev is None or ev.kind != SEND:
            continue
        outs = machine.out(dst)
        immediate = (len(outs) == 1 and outs[0][0] is not None
                     and outs[0][0].kind == RECV
                     and outs[0][0].channel == ev.channel
                     and outs[0][0].message() == ev.message())
        if not immediate:
            detected.add(ev.channel)
    return frozenset(detected)


def _simple_cycles(machine: StateMachine):
    """Yield simple cycles as lists of (src, event, dst) transitions."""
    order = sorted(machine.states)
    for root in order:
        # Only cycles whose smallest state is `root`, to avoid duplicates.
        path: list = []
        on_path = {root}

        def walk(q: str):
            for ev, dst in machine.out(q):
                if dst == root:
                    yield path + [(q, ev, dst)]
                elif dst > root and dst not in on_path:
                    on_path.add(dst)
                    path.append((q, ev, dst))
                    yield from walk(dst)
                    path.pop()
                    on_path.discard(dst)

        yield from walk(root)


def _has_return_chain(events: list[Event], start: str, goal: str) -> bool:
    """A chain of completed message hops from `start` back to `goal`.

    Looks for a subsequence snd(c0,c1,m1) rcv(c0,c1,m1) ... snd(ck,goal,mk)
    rcv(ck,goal,mk) with c0 = start.
    """
    n = len(events)
    frontier = {(0, start)}
    seen = set(frontier)
    while frontier:
        nxt = set()
        for pos, holder in frontier:
            for i in range(pos, n):
                ev = events[i]
                if ev.kind != SEND or ev.sender != holder:
                    continue
                for j in range(i + 1, n):
                    ev2 = events[j]
                    if (ev2.kind == RECV and ev2.channel == ev.channel
                            and ev2.message() == ev.message()):
                        if ev.receiver == goal:
                            return True
                        state = (j + 1, ev.receiver)
                        if state not in seen:
                            seen.add(state)
                            nxt.add(state)
                        break
        frontier = nxt
    return False


def infer_channel_bounds(psm: Psm) -> dict:
    """Infer per-channel buffer bounds in three phases.

    Detect channels needing a bound; reject loops that send on a detected
    channel without a completed message chain from the receiver back to
    the sender; then bound each detected channel by its maximum backlog
    over loop-free paths from the initial state.
    """
    machine = expand_pairs(psm.machine).trim()
    detected = detected_channels(machine)
    if not detected:
        return {}

    cycles = list(_simple_cycles(machine))
    for p, q in sorted(detected):
        for cycle in cycles:
            events = [ev for _, ev, _ in cycle if ev is not None]
            if not any(ev.kind == SEND and ev.channel == (p, q) for ev in events):
                continue
            rotations = [events[i:] + events[:i] for i in range(len(events))]
            if not any(_has_return_chain(rot, q, p) for rot in rotations):
                witness = tuple(events)
                raise UnboundedLoop(
                    f"loop sends on channel {(p, q)} with no message chain "
                    f"from {q} back to {p}", witness)

    bounds = {ch: 0 for ch in detected}
    counts = {ch: 0 for ch in detected}

    def dfs(q: str, on_path: set[str]) -> None:
        for ev, dst in machine.out(q):
            if dst in on_path:
                continue
            delta = 0
            if ev is not None and ev.channel in detected:
                delta = 1 if ev.kind == SEND else -1
                counts[ev.channel] += delta
                bounds[ev.channel] = max(bounds[ev.channel], counts[ev.channel])
            on_path.add(dst)
            dfs(dst, on_path)
            on_path.discard(dst)
            if delta:
                counts[ev.channel] -= delta

    dfs(machine.initial, {machine.initial})
    return dict(sorted(bounds.items()))


@dataclass(frozen=True)
class TameReport:
    tame: bool
    sink_final: bool
    choice: ChoiceReport
    bounds: Optional[dict]
    failures: tuple[str, ...]


def is_tame(psm: Psm) -> TameReport:
    """Sender-driven, sink-final, and respecting inferable channel bounds."""
    machine = psm.machine
    failures: list[str] = []
    sink_final = machine.trim().is_sink_final()
    if not sink_final:
        failures.append("not sink-final")
    choice = classify_choice(machine)
    if choice.kind not in (SENDER_DRIVEN, DIRECTED):
        failures.append(f"choice is {choice.kind}, not sender-driven")
    bounds: Optional[dict] = None
    try:
        bounds = infer_channel_bounds(psm)
    except UnboundedLoop as exc:
        failures.append(str(exc))
    return TameReport(not failures, sink_final, choice, bounds, tuple(failures))
