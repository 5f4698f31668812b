"""The session pi-calculus: terms, reduction, and the CSM-based type
system for processes and runtime configurations.

Sessions are annotated with communicating state machines; the states of
those machines are the types of channel capabilities, so delegation is
just sending a capability whose type is a machine state.  The checker is
algorithmic: capability bindings are linear, discharged late (a final
state with no receive left can always be dropped), and the runtime rule
for restrictions searches the machine's reachable configurations,
pinned down by the concrete queue contents.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .core import RECV, SEND, StateMachine, StateRef
from .csm import (Configuration, Csm, explore, is_final_config, step)

# -- terms ---------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Endpoint:
    session: str
    participant: str

    def __str__(self) -> str:
        return f"{self.session}[{self.participant}]"


ChanRef = Union[Var, Endpoint]


@dataclass(frozen=True)
class Unit:
    def __str__(self) -> str:
        return "unit"


Value = Union[Unit, Endpoint]


@dataclass(frozen=True)
class PEnd:
    def __str__(self) -> str:
        return "0"


@dataclass(frozen=True)
class SendBranch:
    receiver: str
    label: str
    payload: Union[None, ChanRef, Unit]
    cont: "Term"


@dataclass(frozen=True)
class RecvBranch:
    sender: str
    label: str
    binder: Optional[str]
    cont: "Term"


@dataclass(frozen=True)
class PSend:
    subject: ChanRef
    branches: tuple  # tuple[SendBranch, ...]

    def __str__(self) -> str:
        parts = []
        for b in self.branches:
            arg = "" if b.payload is None else f"({b.payload})"
            parts.append(f"{self.subject}[{b.receiver}]!{b.label}{arg}. {b.cont}")
        return parts[0] if len(parts) == 1 else "(+ " + "  ".join(parts) + " )"


@dataclass(frozen=True)
class PRecv:
    subject: ChanRef
    branches: tuple  # tuple[RecvBranch, ...]

    def __str__(self) -> str:
        parts = []
        for b in self.branches:
            arg = "" if b.binder is None else f"({b.binder})"
            parts.append(f"{self.subject}[{b.sender}]?{b.label}{arg}. {b.cont}")
        return parts[0] if len(parts) == 1 else "(& " + "  ".join(parts) + " )"


@dataclass(frozen=True)
class PPar:
    parts: tuple

    def __str__(self) -> str:
        return "( " + " | ".join(str(p) for p in self.parts) + " )"


@dataclass(frozen=True)
class PRes:
    session: str
    csm_name: str
    body: "Term"

    def __str__(self) -> str:
        return f"new {self.session} : {self.csm_name} in {self.body}"


@dataclass(frozen=True)
class PCall:
    name: str
    args: tuple  # tuple[ChanRef | Unit, ...]

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


Msg = tuple  # (label, Value | None)


@dataclass(frozen=True)
class RQueue:
    session: str
    contents: tuple  # tuple[((p, q), tuple[Msg, ...]), ...] non-empty, sorted

    def queue(self, channel) -> tuple:
        for ch, msgs in self.contents:
            if ch == channel:
                return msgs
        return ()

    def __str__(self) -> str:
        if not self.contents:
            return f"{self.session}<>"
        cells = "; ".join(
            f"{p}>{q}: " + ",".join(m[0] for m in msgs)
            for (p, q), msgs in self.contents)
        return f"{self.session}<{cells}>"


@dataclass(frozen=True)
class RErr:
    def __str__(self) -> str:
        return "err"


Term = Union[PEnd, PSend, PRecv, PPar, PRes, PCall, RQueue, RErr]


@dataclass(frozen=True)
class Definition:
    params: tuple  # tuple[str, ...]
    body: Term


@dataclass
class Program:
    csms: dict            # name -> Csm
    order: list           # [(smaller, larger)] pairs of csm names
    defs: dict            # name -> Definition
    main: Term
    theta: dict = field(default_factory=dict)  # name -> parameter types


# -- free names, substitution, renaming ------------------------------------


def free_sessions(term: Term) -> frozenset[str]:
    if isinstance(term, Endpoint):
        return frozenset({term.session})
    if isinstance(term, (PEnd, RErr, Var, Unit)) or term is None:
        return frozenset()
    if isinstance(term, PSend):
        out = free_sessions(term.subject)
        for b in term.branches:
            out |= free_sessions(b.payload) | free_sessions(b.cont)
        return out
    if isinstance(term, PRecv):
        out = free_sessions(term.subject)
        for b in term.branches:
            out |= free_sessions(b.cont)
        return out
    if isinstance(term, PPar):
        return frozenset().union(*(free_sessions(p) for p in term.parts))
    if isinstance(term, PRes):
        return free_sessions(term.body) - {term.session}
    if isinstance(term, PCall):
        return frozenset().union(*(free_sessions(a) for a in term.args)) \
            if term.args else frozenset()
    if isinstance(term, RQueue):
        out = {term.session}
        for _, msgs in term.contents:
            for _, value in msgs:
                if isinstance(value, Endpoint):
                    out.add(value.session)
        return frozenset(out)
    raise AssertionError(term)


def free_refs(term: Term) -> frozenset:
    """Free channel references (variables and endpoints) of a term."""
    if isinstance(term, (Var, Endpoint)):
        return frozenset({term})
    if isinstance(term, (PEnd, RErr, Unit)) or term is None:
        return frozenset()
    if isinstance(term, PSend):
        out = free_refs(term.subject)
        for b in term.branches:
            out |= free_refs(b.payload) | free_refs(b.cont)
        return out
    if isinstance(term, PRecv):
        out = free_refs(term.subject)
        for b in term.branches:
            inner = free_refs(b.cont)
            if b.binder is not None:
                inner = inner - {Var(b.binder)}
            out |= inner
        return out
    if isinstance(term, PPar):
        return frozenset().union(*(free_refs(p) for p in term.parts))
    if isinstance(term, PRes):
        return frozenset(r for r in free_refs(term.body)
                         if not (isinstance(r, Endpoint)
                                 and r.session == term.session))
    if isinstance(term, PCall):
        out: frozenset = frozenset()
        for a in term.args:
            out |= free_refs(a)
        return out
    if isinstance(term, RQueue):
        out = set()
        for _, msgs in term.contents:
            for _, value in msgs:
                if isinstance(value, Endpoint):
                    out.add(value)
        return frozenset(out)
    raise AssertionError(term)


def substitute(term: Term, var: str, value) -> Term:
    """Replace the free variable `var` by a closed value."""
    def sub_ref(ref):
        if isinstance(ref, Var) and ref.name == var:
            return value
        return ref

    if isinstance(term, (PEnd, RErr, RQueue)):
        return term
    if isinstance(term, PSend):
        return PSend(sub_ref(term.subject), tuple(
            SendBranch(b.receiver, b.label,
                       sub_ref(b.payload) if isinstance(b.payload, Var)
                       else b.payload,
                       substitute(b.cont, var, value))
            for b in term.branches))
    if isinstance(term, PRecv):
        return PRecv(sub_ref(term.subject), tuple(
            RecvBranch(b.sender, b.label, b.binder,
                       b.cont if b.binder == var
                       else substitute(b.cont, var, value))
            for b in term.branches))
    if isinstance(term, PPar):
        return PPar(tuple(substitute(p, var, value) for p in term.parts))
    if isinstance(term, PRes):
        return PRes(term.session, term.csm_name,
                    substitute(term.body, var, value))
    if isinstance(term, PCall):
        return PCall(term.name, tuple(sub_ref(a) for a in term.args))
    raise AssertionError(term)


def _freshen(term: Term, suffix: str) -> Term:
    """Rename bound sessions and binders so unfoldings never collide."""
    def walk(term: Term, bound_sessions: dict, bound_vars: dict) -> Term:
        def ref(r):
            if isinstance(r, Var) and r.name in bound_vars:
                return Var(bound_vars[r.name])
            if isinstance(r, Endpoint) and r.session in bound_sessions:
                return Endpoint(bound_sessions[r.session], r.participant)
            return r

        if isinstance(term, (PEnd, RErr, RQueue)):
            return term
        if isinstance(term, PSend):
            return PSend(ref(term.subject), tuple(
                SendBranch(b.receiver, b.label,
                           ref(b.payload) if isinstance(b.payload, (Var, Endpoint))
                           else b.payload,
                           walk(b.cont, bound_sessions, bound_vars))
                for b in term.branches))
        if isinstance(term, PRecv):
            branches = []
            for b in term.branches:
                if b.binder is None:
                    branches.append(RecvBranch(
                        b.sender, b.label, None,
                        walk(b.cont, bound_sessions, bound_vars)))
                else:
                    fresh = b.binder + suffix
                    branches.append(RecvBranch(
                        b.sender, b.label, fresh,
                        walk(b.cont, bound_sessions,
                             {**bound_vars, b.binder: fresh})))
            return PRecv(ref(term.subject), tuple(branches))
        if isinstance(term, PPar):
            return PPar(tuple(walk(p, bound_sessions, bound_vars)
                              for p in term.parts))
        if isinstance(term, PRes):
            fresh = term.session + suffix
            return PRes(fresh, term.csm_name,
                        walk(term.body, {**bound_sessions, term.session: fresh},
                             bound_vars))
        if isinstance(term, PCall):
            return PCall(term.name, tuple(ref(a) for a in term.args))
        raise AssertionError(term)

    return walk(term, {}, {})


# -- runtime configurations -------------------------------------------------


def r2c(term: Term) -> Term:
    """Insert an empty queue term beside every active restriction."""
    if isinstance(term, PPar):
        return PPar(tuple(r2c(p) for p in term.parts))
    if isinstance(term, PRes):
        return PRes(term.session, term.csm_name,
                    PPar((r2c(term.body), RQueue(term.session, ()))))
    return term


@dataclass(frozen=True)
class NormalConfig:
    """Canonical multiset form of a runtime configuration: all active
    restrictions hoisted to the top, queues indexed by session."""

    sessions: tuple       # ((name, csm_name), ...) sorted
    queues: tuple         # ((name, contents), ...) sorted
    threads: tuple        # sorted by display string

    def queue_of(self, session: str) -> Optional[tuple]:
        for name, contents in self.queues:
            if name == session:
                return contents
        return None

    def to_term(self) -> Term:
        parts = [RQueue(name, contents) for name, contents in self.queues]
        parts.extend(self.threads)
        if not parts:
            body: Term = PEnd()
        elif len(parts) == 1:
            body = parts[0]
        else:
            body = PPar(tuple(parts))
        for name, csm_name in reversed(self.sessions):
            body = PRes(name, csm_name, body)
        return body

    def __str__(self) -> str:
        return str(self.to_term())


def normalize(term: Term) -> NormalConfig:
    """Apply the structural rules to a canonical form.

    Parallel composition is flattened and sorted, terminated threads
    vanish, active restrictions are hoisted (scope extrusion), and a
    restriction whose session has an empty queue and no users is
    dropped.
    """
    sessions: dict[str, str] = {}
    queues: dict[str, tuple] = {}
    threads: list[Term] = []

    def collect(term: Term) -> None:
        if isinstance(term, PEnd):
            return
        if isinstance(term, PPar):
            for p in term.parts:
                collect(p)
            return
        if isinstance(term, PRes):
            if term.session in sessions:
                raise ValueError(f"duplicate session binder {term.session}")
            sessions[term.session] = term.csm_name
            collect(term.body)
            return
        if isinstance(term, RQueue):
            contents = tuple(sorted((ch, msgs) for ch, msgs in term.contents
                                    if msgs))
            if term.session in queues:
                raise ValueError(f"duplicate queue for session {term.session}")
            queues[term.session] = contents
            return
        threads.append(term)

    collect(term)
    used = set()
    for t in threads:
        used |= free_sessions(t)
    for contents in queues.values():
        for _, msgs in contents:
            for _, value in msgs:
                if isinstance(value, Endpoint):
                    used.add(value.session)
    for name in list(sessions):
        if name not in used and not queues.get(name, ()):
            del sessions[name]
            queues.pop(name, None)
    return NormalConfig(
        tuple(sorted(sessions.items())),
        tuple(sorted((name, queues.get(name, ())) for name in sessions)),
        tuple(sorted(threads, key=str)),
    )


def precongruent(r1: Term, r2: Term) -> bool:
    """Whether the structural rules identify the two configurations."""
    return normalize(r1) == normalize(r2)


class StuckCall(ValueError):
    pass


def reduce_config(config: NormalConfig, defs: Mapping[str, Definition],
                  unfold_depth: int = 0) -> list[tuple[str, NormalConfig]]:
    """All one-step successors, each with a short description.

    Outputs append to queues, inputs pop matching heads, process calls
    unfold and then must step, and the two error rules produce `err`:
    a receiver facing only mismatched queue heads, and a finished
    session with messages left behind.
    """
    successors: list[tuple[str, NormalConfig]] = []
    threads = list(config.threads)
    for i, thread in enumerate(threads):
        rest = threads[:i] + threads[i + 1:]
        if isinstance(thread, PCall):
            if thread.name not in defs:
                raise StuckCall(f"undefined process {thread.name}")
            if unfold_depth > 64:
                raise StuckCall(f"unguarded recursion through {thread.name}")
            d = defs[thread.name]
            if len(d.params) != len(thread.args):
                raise StuckCall(f"arity mismatch calling {thread.name}")
            unfolded = _freshen(d.body, f"~{unfold_depth + 1}")
            for param, arg in zip(d.params, thread.args):
                unfolded = substitute(unfolded, param, arg)
            inner = normalize(PPar(tuple(rest) + (unfolded,)
                                   + _session_terms(config)))
            for desc, succ in reduce_config(inner, defs, unfold_depth + 1):
                successors.append((desc, succ))
            continue
        if isinstance(thread, PSend) and isinstance(thread.subject, Endpoint):
            session = thread.subject.session
            sender = thread.subject.participant
            contents = config.queue_of(session)
            if contents is None:
                continue
            for b in thread.branches:
                channel = (sender, b.receiver)
                queue = _queue_get(contents, channel)
                new_contents = _queue_set(contents, channel,
                                          queue + ((b.label, b.payload),))
                succ = normalize(PPar(
                    tuple(rest) + (r2c(b.cont),)
                    + _session_terms(config, {session: new_contents})))
                successors.append(
                    (f"{thread.subject}!{b.label} to {b.receiver}", succ))
        if isinstance(thread, PRecv) and isinstance(thread.subject, Endpoint):
            session = thread.subject.session
            receiver = thread.subject.participant
            contents = config.queue_of(session)
            if contents is None:
                continue
            candidates = []
            mismatch_everywhere = True
            for b in thread.branches:
                channel = (b.sender, receiver)
                queue = _queue_get(contents, channel)
                if not queue:
                    mismatch_everywhere = False
                    continue
                label, value = queue[0]
                if label == b.label:
                    mismatch_everywhere = False
                    candidates.append((b, channel, queue, value))
            for b, channel, queue, value in candidates:
                new_contents = _queue_set(contents, channel, queue[1:])
                cont = b.cont if b.binder is None else substitute(
                    b.cont, b.binder, value)
                succ = normalize(PPar(
                    tuple(rest) + (r2c(cont),)
                    + _session_terms(config, {session: new_contents})))
                successors.append(
                    (f"{thread.subject}?{b.label} from {b.sender}", succ))
            if mismatch_everywhere and thread.branches:
                succ = normalize(PPar(
                    tuple(rest) + (RErr(),)
                    + _session_terms(config, drop_queue=session)))
                successors.append((f"{thread.subject} stuck: label mismatch",
                                   succ))
    for session, contents in config.queues:
        in_flight = any(isinstance(value, Endpoint) and value.session == session
                        for other, msgs_by_ch in config.queues if other != session
                        for _, msgs in msgs_by_ch for _, value in msgs)
        if contents and not in_flight and not any(
                session in free_sessions(t) for t in config.threads):
            succ = normalize(PPar(
                config.threads + (RErr(),)
                + _session_terms(config, drop_queue=session,
                                 drop_session=session)))
            successors.append((f"orphan messages in {session}", succ))
    unique: dict[NormalConfig, str] = {}
    for desc, succ in successors:
        unique.setdefault(succ, desc)
    return sorted(((desc, succ) for succ, desc in unique.items()),
                  key=lambda pair: str(pair[1]))


def _session_terms(config: NormalConfig, replace: Optional[dict] = None,
                   drop_queue: Optional[str] = None,
                   drop_session: Optional[str] = None) -> tuple:
    """Rebuild the restriction and queue terms for re-normalisation."""
    replace = replace or {}
    terms: list[Term] = []
    for name, csm_name in config.sessions:
        if name == drop_session:
            continue
        contents = replace.get(name)
        if contents is None:
            contents = config.queue_of(name) or ()
        inner: list[Term] = []
        if name != drop_queue:
            inner.append(RQueue(name, contents))
        terms.append(PRes(name, csm_name, PPar(tuple(inner))
                          if len(inner) != 1 else inner[0]))
    return tuple(terms)


def _queue_get(contents: tuple, channel) -> tuple:
    for ch, msgs in contents:
        if ch == channel:
            return msgs
    return ()


def _queue_set(contents: tuple, channel, msgs: tuple) -> tuple:
    rest = [(ch, m) for ch, m in contents if ch != channel]
    if msgs:
        rest.append((channel, msgs))
    return tuple(sorted(rest))


# -- the type system ----------------------------------------------------------


class TypeCheckError(Exception):
    pass


END_TYPE = "end"

Type = Union[str, None]  # a machine state id, or a base-type name


@dataclass
class StateRegistry:
    """All states of a program's annotated machines, with their owners."""

    owner: dict           # state -> (csm name, participant)
    machines: dict        # csm name -> Csm
    base_types: frozenset = frozenset({END_TYPE, "unit", "int", "str", "bool"})

    @classmethod
    def build(cls, csms: Mapping[str, Csm]) -> "StateRegistry":
        owner: dict = {}
        for name, csm in sorted(csms.items()):
            for participant, machine in csm.components.items():
                for q in machine.states:
                    if q in owner:
                        raise TypeCheckError(
                            f"state {q!r} appears in both {owner[q][0]} "
                            f"and {name}; states must be globally distinct")
                    owner[q] = (name, participant)
        return cls(owner, dict(csms))

    def is_state(self, t: Type) -> bool:
        return t in self.owner

    def machine_of(self, state: str) -> StateMachine:
        name, participant = self.owner[state]
        return self.machines[name].components[participant]

    def participant_of(self, state: str) -> str:
        return self.owner[state][1]

    def transitions(self, state: str):
        return self.machine_of(state).out(state)

    def end_state(self, t: Type) -> bool:
        """Final with no outgoing receive; base types are always done."""
        if t is None or not self.is_state(t):
            return True
        machine = self.machine_of(t)
        return t in machine.finals and not any(
            ev is not None and ev.kind == RECV for ev, _ in machine.out(t))

    def payload_matches(self, payload_type, value) -> bool:
        if payload_type is None:
            return value is None
        if isinstance(payload_type, StateRef):
            return isinstance(value, Endpoint)
        return isinstance(value, Unit)


@dataclass
class Checker:
    registry: StateRegistry
    theta: dict  # process name -> tuple of types

    def check_defs(self, defs: Mapping[str, Definition]) -> None:
        for name, d in sorted(defs.items()):
            if name not in self.theta:
                raise TypeCheckError(f"no signature for process {name}")
            sig = self.theta[name]
            if len(sig) != len(d.params):
                raise TypeCheckError(f"signature arity mismatch for {name}")
            if not isinstance(d.body, (PSend, PRecv)):
                raise TypeCheckError(f"definition {name} must be guarded")
            gamma = {Var(p): t for p, t in zip(d.params, sig)}
            self.check_process(gamma, d.body)

    # -- processes ------------------------------------------------------

    def check_process(self, gamma: dict, term: Term) -> None:
        """Check a process against a linear context of capability types."""
        if isinstance(term, PEnd):
            self._discharge(gamma, term)
            return
        if isinstance(term, PPar):
            self._split_parallel(gamma, term.parts, self.check_process)
            return
        if isinstance(term, PRes):
            self._enter_restriction(gamma, term, self.check_process)
            return
        if isinstance(term, PCall):
            self._check_call(gamma, term)
            return
        if isinstance(term, PSend):
            self._check_send(gamma, term, self.check_process)
            return
        if isinstance(term, PRecv):
            self._check_recv(gamma, term, self.check_process)
            return
        if isinstance(term, (RQueue, RErr)):
            raise TypeCheckError(f"runtime term {term} in a process position")
        raise AssertionError(term)

    def _discharge(self, gamma: dict, term: Term) -> None:
        for ref, t in sorted(gamma.items(), key=lambda kv: str(kv[0])):
            if not self.registry.end_state(t):
                raise TypeCheckError(
                    f"capability {ref}:{t} left unused at {term}")

    def _split_parallel(self, gamma: dict, parts, check) -> None:
        remaining = dict(gamma)
        claimed: dict = {}
        for part in parts:
            for ref in free_refs(part):
                if ref in claimed:
                    raise TypeCheckError(
                        f"capability {ref} shared between parallel branches")
                if ref in remaining:
                    claimed[ref] = part
        for part in parts:
            share = {ref: remaining.pop(ref) for ref in list(remaining)
                     if claimed.get(ref) is part}
            check(share, part)
        self._discharge(remaining, PPar(tuple(parts)))

    def _enter_restriction(self, gamma: dict, term: PRes, check) -> None:
        csm = self.registry.machines.get(term.csm_name)
        if csm is None:
            raise TypeCheckError(f"unknown machine {term.csm_name}")
        gamma = dict(gamma)
        for participant, machine in csm.components.items():
            ref = Endpoint(term.session, participant)
            if ref in gamma:
                raise TypeCheckError(f"shadowed endpoint {ref}")
            gamma[ref] = machine.initial
        check(gamma, term.body)

    def _check_call(self, gamma: dict, term: PCall) -> None:
        if term.name not in self.theta:
            raise TypeCheckError(f"unknown process {term.name}")
        sig = self.theta[term.name]
        if len(sig) != len(term.args):
            raise TypeCheckError(f"arity mismatch calling {term.name}")
        gamma = dict(gamma)
        for arg, expected in zip(term.args, sig):
            if isinstance(arg, Unit):
                if self.registry.is_state(expected):
                    raise TypeCheckError(
                        f"{term.name} expects capability of type {expected}, "
                        f"got unit")
                continue
            actual = gamma.pop(arg, None)
            if actual != expected:
                raise TypeCheckError(
                    f"argument {arg} has type {actual}, {term.name} "
                    f"expects {expected}")
        self._discharge(gamma, term)

    def _check_send(self, gamma: dict, term: PSend, check) -> None:
        q = gamma.get(term.subject)
        if q is None:
            raise TypeCheckError(f"no capability for {term.subject} at {term}")
        if not self.registry.is_state(q):
            raise TypeCheckError(f"{term.subject}:{q} cannot send")
        sender = self.registry.participant_of(q)
        outs = {(ev.receiver, ev.label): (ev, dst)
                for ev, dst in self.registry.transitions(q)
                if ev is not None and ev.kind == SEND}
        payload_types: dict = {}
        for b in term.branches:
            hit = outs.get((b.receiver, b.label))
            if hit is None:
                raise TypeCheckError(
                    f"state {q} of {sender} does not allow sending "
                    f"{b.label} to {b.receiver}")
            ev, _ = hit
            if not self.registry.payload_matches(ev.payload, b.payload):
                raise TypeCheckError(
                    f"payload of {b.label} must have type {ev.payload}")
            if isinstance(b.payload, (Var, Endpoint)):
                expected = ev.payload.state
                actual = gamma.get(b.payload)
                if actual != expected:
                    raise TypeCheckError(
                        f"payload {b.payload} has type {actual}, message "
                        f"{b.label} carries {expected}")
                if b.payload in payload_types and \
                        payload_types[b.payload] != expected:
                    raise TypeCheckError(
                        f"payload {b.payload} used at two types")
                payload_types[b.payload] = expected
        base = {ref: t for ref, t in gamma.items()
                if ref != term.subject and ref not in payload_types}
        for b in term.branches:
            _, target = outs[(b.receiver, b.label)]
            ctx = dict(base)
            ctx[term.subject] = target
            for ref, t in payload_types.items():
                if ref != b.payload:
                    ctx[ref] = t
            check(ctx, b.cont)

    def _check_recv(self, gamma: dict, term: PRecv, check) -> None:
        q = gamma.get(term.subject)
        if q is None:
            raise TypeCheckError(f"no capability for {term.subject} at {term}")
        if not self.registry.is_state(q):
            raise TypeCheckError(f"{term.subject}:{q} cannot receive")
        receiver = self.registry.participant_of(q)
        expected = {}
        for ev, dst in self.registry.transitions(q):
            if ev is None or ev.kind != RECV:
                raise TypeCheckError(
                    f"state {q} of {receiver} is not an external choice")
            expected[(ev.sender, ev.label)] = (ev, dst)
        offered = {(b.sender, b.label) for b in term.branches}
        if offered != set(expected):
            raise TypeCheckError(
                f"receive on {term.subject}:{q} offers {sorted(offered)} "
                f"but the machine requires {sorted(expected)}")
        base = {ref: t for ref, t in gamma.items() if ref != term.subject}
        for b in term.branches:
            ev, target = expected[(b.sender, b.label)]
            ctx = dict(base)
            ctx[term.subject] = target
            if ev.payload is None:
                if b.binder is not None:
                    raise TypeCheckError(
                        f"message {b.label} carries no payload to bind")
            else:
                if b.binder is None:
                    raise TypeCheckError(
                        f"message {b.label} carries a payload; bind it")
                ctx[Var(b.binder)] = (ev.payload.state
                                      if isinstance(ev.payload, StateRef)
                                      else ev.payload)
            check(ctx, b.cont)


def typecheck_defs(program: Program,
                   theta: Optional[Mapping] = None) -> Checker:
    if theta is None:
        theta = program.theta
    registry = StateRegistry.build(program.csms)
    checker = Checker(registry, dict(theta))
    checker.check_defs(program.defs)
    return checker


def typecheck_process(program: Program, theta: Optional[Mapping] = None,
                      gamma: Optional[dict] = None) -> Checker:
    checker = typecheck_defs(program, theta)
    checker.check_process(dict(gamma or {}), program.main)
    return checker


# -- runtime typing ------------------------------------------------------------


@dataclass
class RuntimeTypingReport:
    ok: bool
    chosen: dict          # session -> Configuration
    error: Optional[str] = None


def typecheck_runtime(program: Program, config_or_term,
                      theta: Optional[Mapping] = None,
                      explore_cap: int = 50_000) -> RuntimeTypingReport:
    """Type a runtime configuration with empty outer contexts.

    For every active session the checker picks a reachable machine
    configuration whose queue types match the concrete queue contents
    (labels pin them down), seeds the contexts from it, and then types
    queues and threads under the usual linear discipline, backtracking
    over the candidate configurations.
    """
    checker = typecheck_defs(program, theta)
    registry = checker.registry
    config = (config_or_term if isinstance(config_or_term, NormalConfig)
              else normalize(config_or_term))
    if any(isinstance(t, RErr) for t in config.threads):
        return RuntimeTypingReport(False, {}, "configuration contains err")

    candidates: list[list[tuple[str, Configuration]]] = []
    for name, csm_name in config.sessions:
        csm = registry.machines.get(csm_name)
        if csm is None:
            return RuntimeTypingReport(False, {}, f"unknown machine {csm_name}")
        concrete = config.queue_of(name) or ()
        max_len = max((len(m) for _, m in concrete), default=0)
        report = explore(csm, queue_cap=max(2, max_len + 1),
                         config_cap=explore_cap)
        matching = [c for c in report.configs
                    if _queues_compatible(registry, concrete, c)]
        if not matching:
            return RuntimeTypingReport(
                False, {}, f"no reachable configuration of {csm_name} matches "
                           f"the queues of session {name}")
        candidates.append([(name, c) for c in matching])

    last_error = "untypable"
    for choice in itertools.product(*candidates) if candidates else [()]:
        chosen = dict(choice)
        try:
            _check_with_configs(checker, config, chosen)
            return RuntimeTypingReport(True, chosen)
        except TypeCheckError as exc:
            last_error = str(exc)
    return RuntimeTypingReport(False, {}, last_error)


def _queues_compatible(registry: StateRegistry, concrete: tuple,
                       machine_config: Configuration) -> bool:
    channels = {ch for ch, _ in concrete} | {ch for ch, _ in
                                             machine_config.channels}
    for channel in channels:
        actual = _queue_get(concrete, channel)
        typed = machine_config.queue(channel)
        if len(actual) != len(typed):
            return False
        for (label, value), (tl, tp) in zip(actual, typed):
            if label != tl:
                return False
            payload = _payload_from_key_str(tp)
            if not registry.payload_matches(payload, value):
                return False
    return True


def _payload_from_key_str(key: str):
    if not key:
        return None
    if key.startswith("@"):
        return StateRef(key[1:])
    return key[1:]


def _check_with_configs(checker: Checker, config: NormalConfig,
                        chosen: Mapping[str, Configuration]) -> None:
    registry = checker.registry
    gamma: dict = {}
    for name, csm_name in config.sessions:
        for participant, _ in registry.machines[csm_name].components.items():
            gamma[Endpoint(name, participant)] = \
                chosen[name].state_of(participant)

    # Queue values consume capability bindings head-first.
    for name, _ in config.sessions:
        concrete = config.queue_of(name) or ()
        machine_config = chosen[name]
        for channel, msgs in concrete:
            typed = machine_config.queue(channel)
            for (label, value), (tl, tp) in zip(msgs, typed):
                payload = _payload_from_key_str(tp)
                if isinstance(payload, StateRef):
                    actual = gamma.pop(value, None)
                    if actual != payload.state:
                        raise TypeCheckError(
                            f"queued capability {value} has type {actual}, "
                            f"queue type says {payload.state}")

    checker._split_parallel(gamma, config.threads, checker.check_process)


# -- typing-context reductions ---------------------------------------------


def context_reduce(registry: StateRegistry, gamma: Mapping, delta: Mapping
                   ) -> list[tuple[dict, dict]]:
    """One-step reductions of the typing contexts, mirroring the machine.

    A send binding appends its message type to the sender's queue entry;
    a receive binding pops a matching head from the peer's entry.
    """
    successors = []
    for ref, state in sorted(gamma.items(), key=lambda kv: str(kv[0])):
        if not isinstance(ref, Endpoint) or not registry.is_state(state):
            continue
        for ev, target in registry.transitions(state):
            if ev is None:
                continue
            msg = (ev.label, _payload_key_str(ev.payload))
            if ev.kind == SEND:
                key = (ref.session, ev.sender, ev.receiver)
                if key not in delta:
                    continue
                new_gamma = dict(gamma)
                new_gamma[ref] = target
                new_delta = dict(delta)
                new_delta[key] = delta[key] + (msg,)
                successors.append((new_gamma, new_delta))
            else:
                key = (ref.session, ev.sender, ev.receiver)
                entry = delta.get(key, ())
                if entry and entry[0] == msg:
                    new_gamma = dict(gamma)
                    new_gamma[ref] = target
                    new_delta = dict(delta)
                    new_delta[key] = entry[1:]
                    successors.append((new_gamma, new_delta))
    return successors


def _payload_key_str(payload) -> str:
    if payload is None:
        return ""
    if isinstance(payload, StateRef):
        return "@" + payload.state
    return "#" + payload


# -- well-annotation ----------------------------------------------------------


@dataclass(frozen=True)
class AnnotationReport:
    deadlock_free: bool
    fer: bool
    exact: bool


def check_well_annotated(csm: Csm, *, queue_cap: int = 4,
                         config_cap: int = 50_000) -> AnnotationReport:
    """Deadlock freedom and feasible eventual reception for an annotated
    machine; exact when exploration completes within the caps."""
    report = explore(csm, queue_cap=queue_cap, config_cap=config_cap)
    fer = _csm_fer(csm, report)
    return AnnotationReport(not report.deadlocks, fer, not report.truncated)


def _csm_fer(csm: Csm, report) -> bool:
    configs = report.configs
    index = {c: i for i, c in enumerate(configs)}
    edges = {index[c]: tuple((ev, index[d]) for ev, d in report.edges[c]
                             if d in index)
             for c in configs}
    capable = _capable_nodes(csm, configs, edges)
    for i, config in enumerate(configs):
        for channel, content in config.channels:
            need = len(content)
            if not need:
                continue
            seen = {(i, 0)}
            stack = [(i, 0)]
            found = False
            while stack and not found:
                v, consumed = stack.pop()
                if consumed >= need and v in capable:
                    found = True
                    break
                for ev, w in edges.get(v, ()):
                    c2 = consumed + (1 if ev is not None and ev.kind == RECV
                                     and ev.channel == channel else 0)
                    c2 = min(c2, need)
                    if (w, c2) not in seen:
                        seen.add((w, c2))
                        stack.append((w, c2))
            if not found:
                return False
    return True


def _capable_nodes(csm: Csm, configs, edges) -> set[int]:
    finals = {i for i, c in enumerate(configs) if is_final_config(csm, c)}
    n = len(configs)
    on_cycle: set[int] = set()
    colour = [0] * n

    def visit(v: int) -> None:
        stack = [(v, 0)]
        on_path: set[int] = set()
        while stack:
            node, i = stack.pop()
            if i == 0:
                colour[node] = 1
                on_path.add(node)
            succs = edges.get(node, ())
            advanced = False
            while i < len(succs):
                _, w = succs[i]
                i += 1
                if colour[w] == 0:
                    stack.append((node, i))
                    stack.append((w, 0))
                    advanced = True
                    break
                if w in on_path:
                    on_cycle.add(w)
            if advanced:
                continue
            colour[node] = 2
            on_path.discard(node)

    for v in range(n):
        if colour[v] == 0:
            visit(v)
    good = finals | on_cycle
    incoming: dict[int, set[int]] = {i: set() for i in range(n)}
    for src, succs in edges.items():
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


# -- harnesses ------------------------------------------------------------------


@dataclass
class HarnessReport:
    ok: bool
    steps: list
    failure: Optional[str] = None


def subject_reduction_harness(program: Program, steps: int = 30,
                              seed: int = 0,
                              theta: Optional[Mapping] = None) -> HarnessReport:
    """Random reduction walk checking typability at every configuration.

    The starting process must typecheck with empty contexts; every
    reached configuration must typecheck as a runtime configuration and
    never contain `err`.
    """
    typecheck_process(program, theta)
    for name, csm in program.csms.items():
        annotation = check_well_annotated(csm)
        if not (annotation.deadlock_free and annotation.fer):
            return HarnessReport(False, [], f"machine {name} is not "
                                            f"deadlock-free with reception")
    rng = random.Random(seed)
    config = normalize(r2c(program.main))
    walk: list[str] = []
    for _ in range(steps):
        report = typecheck_runtime(program, config, theta)
        if not report.ok:
            return HarnessReport(False, walk,
                                 f"untypable after {walk}: {report.error}")
        if any(isinstance(t, RErr) for t in config.threads):
            return HarnessReport(False, walk, f"reached err after {walk}")
        successors = reduce_config(config, program.defs)
        if not successors:
            break
        desc, config = successors[rng.randrange(len(successors))]
        walk.append(desc)
    report = typecheck_runtime(program, config, theta)
    if not report.ok:
        return HarnessReport(False, walk,
                             f"untypable after {walk}: {report.error}")
    return HarnessReport(True, walk)


# -- session fidelity and progress ------------------------------------------


@dataclass
class SfReport:
    ok: bool
    session: Optional[str] = None
    config: Optional[Configuration] = None
    error: Optional[str] = None


def _contains_restriction(term: Term) -> bool:
    if isinstance(term, PRes):
        return True
    if isinstance(term, PSend):
        return any(_contains_restriction(b.cont) for b in term.branches)
    if isinstance(term, PRecv):
        return any(_contains_restriction(b.cont) for b in term.branches)
    if isinstance(term, PPar):
        return any(_contains_restriction(p) for p in term.parts)
    return False


def sf_typecheck(program: Program, config_or_term,
                 theta: Optional[Mapping] = None) -> SfReport:
    """The restricted judgement: one session, one thread per participant.

    Each participant's thread is typed against its component of the one
    annotated machine, seeded from a reachable configuration matching
    the queues; threads may not open further sessions.
    """
    checker = typecheck_defs(program, theta)
    registry = checker.registry
    config = (config_or_term if isinstance(config_or_term, NormalConfig)
              else normalize(config_or_term))
    if len(config.sessions) != 1:
        return SfReport(False, error="exactly one session is required")
    (session, csm_name), = config.sessions
    csm = registry.machines[csm_name]
    if any(_contains_restriction(t) for t in config.threads):
        return SfReport(False, error="threads may not open new sessions")

    by_participant: dict[str, Term] = {}
    for thread in config.threads:
        owners = {ref.participant for ref in free_refs(thread)
                  if isinstance(ref, Endpoint) and ref.session == session}
        if len(owners) != 1:
            return SfReport(False, error=f"thread {thread} does not act for "
                                         f"exactly one participant")
        owner = owners.pop()
        if owner in by_participant:
            return SfReport(False, error=f"two threads for participant {owner}")
        by_participant[owner] = thread

    concrete = config.queue_of(session) or ()
    max_len = max((len(m) for _, m in concrete), default=0)
    report = explore(csm, queue_cap=max(2, max_len + 1))
    for machine_config in report.configs:
        if not _queues_compatible(registry, concrete, machine_config):
            continue
        try:
            for participant in csm.participants:
                state = machine_config.state_of(participant)
                thread = by_participant.get(participant)
                if thread is None:
                    # A terminated participant's 0 thread was absorbed.
                    if not registry.end_state(state):
                        raise TypeCheckError(
                            f"{participant} has no thread but state {state} "
                            f"is not done")
                    continue
                gamma = {Endpoint(session, participant): state}
                checker.check_process(gamma, thread)
        except TypeCheckError:
            continue
        return SfReport(True, session, machine_config)
    return SfReport(False, error="no reachable configuration types the threads")


def progress_harness(program: Program, max_steps: int = 100,
                     theta: Optional[Mapping] = None) -> HarnessReport:
    """Whenever the seeded machine configuration can step, the process
    must step too, staying typable under the restricted judgement."""
    registry = StateRegistry.build(program.csms)
    config = normalize(r2c(program.main))
    # Peel the single restriction into the flat form sf_typecheck expects.
    walk: list[str] = []
    for _ in range(max_steps):
        if not config.sessions and not config.threads:
            break  # the session ran to completion and was absorbed
        report = sf_typecheck(program, config, theta)
        if not report.ok:
            return HarnessReport(False, walk, report.error)
        csm = registry.machines[dict(config.sessions)[report.session]]
        machine_moves = step(csm, report.config)
        successors = reduce_config(config, program.defs)
        if machine_moves and not successors:
            return HarnessReport(False, walk,
                                 "machine can step but the process is stuck")
        if not successors:
            break
        desc, config = successors[0]
        walk.append(desc)
    return HarnessReport(True, walk)
