"""The channel-participant encoding.

Bounded channels are rewritten to route each message through a ring of
forwarder participants, one per buffer slot, turning deferred receives
into immediately-received exchanges.  Words, whole protocol machines,
and per-participant machines can all be encoded and decoded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import (Event, PAIR, RECV, SEND, StateMachine, Word, pair, recv,
                   send)

Channel = tuple[str, str]

_CP_RE = re.compile(r"^\((?P<src>[^,()]+),(?P<dst>[^,()]+)\)(?P<idx>\d+)$")


@dataclass(frozen=True)
class ChannelParticipant:
    """Forwarder number `index` for the channel source -> target."""

    source: str
    target: str
    index: int

    @property
    def name(self) -> str:
        return f"({self.source},{self.target}){self.index}"


def parse_channel_participant(name: str) -> Optional[ChannelParticipant]:
    m = _CP_RE.match(name)
    if not m:
        return None
    return ChannelParticipant(m["src"], m["dst"], int(m["idx"]))


def channel_participants(bounds: dict) -> tuple[ChannelParticipant, ...]:
    cps = []
    for (p, q), b in sorted(bounds.items()):
        cps.extend(ChannelParticipant(p, q, i) for i in range(b))
    return tuple(cps)


def _bounds_violated(channel: Channel, pending: int, bounds: dict) -> bool:
    return channel in bounds and pending > bounds[channel]


def encode_word(word: Word, bounds: dict) -> Word:
    """Reroute each bounded-channel event through its ring forwarder.

    The i-th send on a bounded channel (p,q) becomes the exchange
    p -> (p,q)_{i mod B}; the i-th receive becomes (p,q)_{i mod B} -> q.
    Events on unbounded channels pass through unchanged.
    """
    sends: dict[Channel, int] = {}
    recvs: dict[Channel, int] = {}
    out: list[Event] = []
    for ev in word:
        if ev.kind == PAIR:
            raise ValueError("encode_word takes send/receive letters")
        channel = ev.channel
        if channel not in bounds:
            out.append(ev)
            continue
        b = bounds[channel]
        if ev.kind == SEND:
            idx = sends.get(channel, 0)
            if idx - recvs.get(channel, 0) >= b:
                raise ValueError(f"word exceeds bound {b} on channel {channel}")
            cp = ChannelParticipant(*channel, idx % b).name
            out.append(send(ev.sender, cp, ev.label, ev.payload))
            out.append(recv(ev.sender, cp, ev.label, ev.payload))
            sends[channel] = idx + 1
        else:
            idx = recvs.get(channel, 0)
            cp = ChannelParticipant(*channel, idx % b).name
            out.append(send(cp, ev.receiver, ev.label, ev.payload))
            out.append(recv(cp, ev.receiver, ev.label, ev.payload))
            recvs[channel] = idx + 1
    return tuple(out)


def decode_word(word: Word) -> Word:
    """Inverse of encode_word on words made of the paired forwarder hops."""
    out: list[Event] = []
    i = 0
    while i < len(word):
        ev = word[i]
        cp_recv = parse_channel_participant(ev.receiver)
        cp_send = parse_channel_participant(ev.sender)
        if ev.kind == SEND and (cp_recv or cp_send):
            if i + 1 >= len(word) or word[i + 1] != recv(
                    ev.sender, ev.receiver, ev.label, ev.payload):
                raise ValueError(f"unpaired encoded event at position {i + 1}")
            if cp_recv is not None:
                out.append(send(cp_recv.source, cp_recv.target, ev.label, ev.payload))
            else:
                out.append(recv(cp_send.source, cp_send.target, ev.label, ev.payload))
            i += 2
        else:
            out.append(ev)
            i += 1
    return tuple(out)


# -- protocol machine encoding ---------------------------------------------


def merge_immediate_pairs(machine: StateMachine, bounds: dict) -> StateMachine:
    """Fuse send transitions on unbounded channels with their immediate
    receives into paired events; bounded-channel events stay separate."""
    replaced: dict = {}
    drop: set[str] = set()
    for src, ev, dst in machine.transitions:
        if ev is None or ev.kind != SEND or ev.channel in bounds:
            continue
        outs = machine.out(dst)
        if not (len(outs) == 1 and outs[0][0] is not None
                and outs[0][0].kind == RECV
                and outs[0][0].channel == ev.channel
                and outs[0][0].message() == ev.message()):
            raise ValueError(
                f"send {ev} on unbounded channel lacks an immediate receive")
        replaced[(src, ev, dst)] = (src, pair(ev.sender, ev.receiver,
                                              ev.label, ev.payload), outs[0][1])
        drop.add(dst)
    for src, ev, dst in machine.transitions:
        if dst in drop and (src, ev, dst) not in replaced:
            raise ValueError(f"state {dst} mixes paired and other traffic")
    transitions = [replaced.get(t, t) for t in machine.transitions
                   if t[0] not in drop]
    states = machine.states - frozenset(drop)
    return StateMachine(states, machine.initial, machine.finals & states,
                        transitions).trim()


def _counter_state(q: str, snd: tuple, rcv_: tuple) -> str:
    def fmt(tag: str, items: tuple) -> str:
        return tag + ",".join(f"({p},{r})={v}" for (p, r), v in items)

    parts = [q]
    if snd:
        parts.append(fmt("s:", snd))
    if rcv_:
        parts.append(fmt("r:", rcv_))
    return "|".join(parts)


def encode_psm(machine: StateMachine, bounds: dict) -> StateMachine:
    """Encode a protocol machine into one over the extended alphabet.

    States carry ring counters for each bounded channel; transitions on
    bounded channels become paired exchanges with the forwarder at the
    current counter.  With empty bounds this is the identity.
    """
    machine = merge_immediate_pairs(machine, bounds)
    # Rings of size one have a constant counter; no need to track them.
    channels = tuple(sorted(ch for ch, b in bounds.items() if b >= 2))
    zero = tuple((ch, 0) for ch in channels)
    start = (machine.initial, zero, zero)
    index = {start: _counter_state(machine.initial, zero, zero)}
    frontier = [start]
    transitions = []
    finals = set()
    while frontier:
        node = frontier.pop(0)
        q, snd, rcv_ = node
        name = index[node]
        if q in machine.finals and snd == zero and rcv_ == zero:
            finals.add(name)
        for ev, dst in machine.out(q):
            if ev is None:
                succ = (dst, snd, rcv_)
                label = None
            elif ev.kind == PAIR:
                succ = (dst, snd, rcv_)
                label = ev
            elif ev.kind == SEND:
                idx = dict(snd).get(ev.channel, 0)
                cp = ChannelParticipant(*ev.channel, idx).name
                label = pair(ev.sender, cp, ev.label, ev.payload)
                snd2 = tuple((ch, (v + 1) % bounds[ch] if ch == ev.channel else v)
                             for ch, v in snd)
                succ = (dst, snd2, rcv_)
            else:
                idx = dict(rcv_).get(ev.channel, 0)
                cp = ChannelParticipant(*ev.channel, idx).name
                label = pair(cp, ev.receiver, ev.label, ev.payload)
                rcv2 = tuple((ch, (v + 1) % bounds[ch] if ch == ev.channel else v)
                             for ch, v in rcv_)
                succ = (dst, snd, rcv2)
            if succ not in index:
                index[succ] = _counter_state(*succ)
                frontier.append(succ)
            transitions.append((name, label, index[succ]))
    return StateMachine(set(index.values()), index[start], finals, transitions)


# -- per-participant machines ----------------------------------------------


def encode_fsm(machine: StateMachine, participant: str, bounds: dict) -> StateMachine:
    """Thread ring counters through a participant's local machine."""
    out_channels = tuple(sorted(ch for ch in bounds
                                if ch[0] == participant and bounds[ch] >= 2))
    in_channels = tuple(sorted(ch for ch in bounds
                               if ch[1] == participant and bounds[ch] >= 2))
    zero_out = tuple((ch, 0) for ch in out_channels)
    zero_in = tuple((ch, 0) for ch in in_channels)
    start = (machine.initial, zero_out, zero_in)
    index = {start: _counter_state(machine.initial, zero_out, zero_in)}
    frontier = [start]
    transitions = []
    finals = set()
    while frontier:
        node = frontier.pop(0)
        q, snd, rcv_ = node
        name = index[node]
        if q in machine.finals and snd == zero_out and rcv_ == zero_in:
            finals.add(name)
        for ev, dst in machine.out(q):
            if ev is None or ev.channel not in bounds:
                label, succ = ev, (dst, snd, rcv_)
            elif ev.kind == SEND:
                idx = dict(snd).get(ev.channel, 0)
                cp = ChannelParticipant(*ev.channel, idx).name
                label = send(participant, cp, ev.label, ev.payload)
                snd2 = tuple((ch, (v + 1) % bounds[ch] if ch == ev.channel else v)
                             for ch, v in snd)
                succ = (dst, snd2, rcv_)
            else:
                idx = dict(rcv_).get(ev.channel, 0)
                cp = ChannelParticipant(*ev.channel, idx).name
                label = recv(cp, participant, ev.label, ev.payload)
                rcv2 = tuple((ch, (v + 1) % bounds[ch] if ch == ev.channel else v)
                             for ch, v in rcv_)
                succ = (dst, snd, rcv2)
            if succ not in index:
                index[succ] = _counter_state(*succ)
                frontier.append(succ)
            transitions.append((name, label, index[succ]))
    return StateMachine(set(index.values()), index[start], finals, transitions)


def decode_fsm(machine: StateMachine) -> StateMachine:
    """Rebend forwarder events back to the original channels, keeping states."""
    transitions = []
    for src, ev, dst in machine.transitions:
        if ev is None:
            transitions.append((src, None, dst))
            continue
        cp_recv = parse_channel_participant(ev.receiver)
        cp_send = parse_channel_participant(ev.sender)
        if ev.kind == SEND and cp_recv is not None:
            ev = send(cp_recv.source, cp_recv.target, ev.label, ev.payload)
        elif ev.kind == RECV and cp_send is not None:
            ev = recv(cp_send.source, cp_send.target, ev.label, ev.payload)
        transitions.append((src, ev, dst))
    return StateMachine(machine.states, machine.initial, machine.finals,
                        transitions)


def channel_participant_machine(cp: ChannelParticipant,
                                messages: Iterable) -> StateMachine:
    """The forwarding hub: receive a message from the source, pass it on.

    `messages` holds (label, payload) pairs or bare labels.
    """
    hub = "idle"
    states = {hub}
    transitions = []
    for msg in sorted(messages, key=str):
        label, payload = msg if isinstance(msg, tuple) else (msg, None)
        hold = f"hold_{label}" if payload is None else f"hold_{label}_{payload}"
        states.add(hold)
        transitions.append((hub, recv(cp.source, cp.name, label, payload), hold))
        transitions.append((hold, send(cp.name, cp.target, label, payload), hub))
    return StateMachine(states, hub, {hub}, transitions)


# -- structural predicates ---------------------------------------------------


def is_channel_ordered(word: Word, bounds: dict) -> bool:
    """Forwarder hops are used in ring order for every bounded channel."""
    families: dict[tuple, list[int]] = {}
    for ev in word:
        for e in ev.letters():
            cp = parse_channel_participant(e.receiver)
            if cp is not None and (cp.source, cp.target) in bounds:
                families.setdefault((cp.source, cp.target, e.kind, "in"),
                                    []).append(cp.index)
            cp = parse_channel_participant(e.sender)
            if cp is not None and (cp.source, cp.target) in bounds:
                families.setdefault((cp.source, cp.target, e.kind, "out"),
                                    []).append(cp.index)
    for (src, dst, _, _), indices in families.items():
        b = bounds[(src, dst)]
        if any(idx != i % b for i, idx in enumerate(indices)):
            return False
    return True


FORWARDING = "forwarding"
ALMOST = "almost"
NO = "no"


def is_forwarding(word: Word, cp: ChannelParticipant) -> str:
    """A forwarder's word alternates receive-from-source, send-to-target
    of the same message; `almost` allows one trailing unanswered receive."""
    for j in range(0, len(word) - 1, 2):
        ev, nxt = word[j], word[j + 1]
        if not (ev.kind == RECV and ev.sender == cp.source
                and ev.receiver == cp.name):
            return NO
        if nxt != send(cp.name, cp.target, ev.label, ev.payload):
            return NO
    if len(word) % 2 == 1:
        last = word[-1]
        if last.kind == RECV and last.sender == cp.source \
                and last.receiver == cp.name:
            return ALMOST
        return NO
    return FORWARDING


def machine_is_forwarding(machine: StateMachine, cp: ChannelParticipant) -> bool:
    """Every reachable path alternates matched receive/forward steps."""
    states = {machine.initial: None}  # state -> held message or None
    stack = [machine.initial]
    while stack:
        q = stack.pop()
        held = states[q]
        for ev, dst in machine.out(q):
            if ev is None:
                return False
            if held is None:
                if not (ev.kind == RECV and ev.sender == cp.source
                        and ev.receiver == cp.name):
                    return False
                nxt = ev.message()
            else:
                if ev != send(cp.name, cp.target, held[0],
                              _payload_from_key(held[1])):
                    return False
                nxt = None
            if dst in states:
                if states[dst] != nxt:
                    return False
            else:
                states[dst] = nxt
                stack.append(dst)
    return True


def _payload_from_key(key: str):
    from .core import StateRef
    if not key:
        return None
    if key.startswith("@"):
        return StateRef(key[1:])
    return key[1:]


def is_amicable(components: dict[str, StateMachine], bounds: dict,
                k: int = 8) -> bool:
    """Bounded sanity check that each forwarder can serve its sender.

    Requires forwarder machines to be structurally forwarding, sender
    languages to be channel-ordered, and every bounded trace's message
    sequence to be accepted by the forwarder's alternation.
    """
    from .core import maximal_traces_upto
    for name, machine in components.items():
        cp = parse_channel_participant(name)
        if cp is None:
            continue
        if not machine_is_forwarding(machine, cp):
            return False
        sender_machine = components.get(cp.source)
        if sender_machine is None:
            continue
        for word in maximal_traces_upto(sender_machine, k):
            if not is_channel_ordered(word, bounds):
                return False
            msgs = [ev.message() for ev in word
                    if ev.kind == SEND and ev.receiver == name]
            run = []
            for label, payload in msgs:
                run.append(recv(cp.source, name, label, _payload_from_key(payload)))
                run.append(send(name, cp.target, label, _payload_from_key(payload)))
            if not _machine_accepts_prefix(machine, tuple(run)):
                return False
    return True


def _machine_accepts_prefix(machine: StateMachine, word: Word) -> bool:
    current = machine.eps_closure({machine.initial})
    for ev in word:
        nxt = {dst for q in current for e, dst in machine.out(q) if e == ev}
        if not nxt:
            return False
        current = machine.eps_closure(nxt)
    return True
