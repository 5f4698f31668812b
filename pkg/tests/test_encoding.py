"""Tests for the forwarder encoding of words and machines."""

import pytest

from amp.core import (StateMachine, machine_isomorphic, maximal_traces_upto,
                      complete_traces, recv, send)
from amp.encoding import (ChannelParticipant, FORWARDING, ALMOST, NO,
                          channel_participant_machine, decode_fsm, decode_word,
                          encode_fsm, encode_psm, encode_word, is_amicable,
                          is_channel_ordered, is_forwarding,
                          machine_is_forwarding, merge_immediate_pairs,
                          parse_channel_participant)
from amp.fifo import closure_upto, parse_word
from amp.psm import validate

from .conftest import (kle_encoded_expected, kle_machine, random_fifo_word,
                       three_party_machine)

KLE_BOUNDS = {("e", "o"): 1, ("o", "e"): 1}


def test_channel_participant_names_roundtrip():
    cp = ChannelParticipant("p", "q", 1)
    assert cp.name == "(p,q)1"
    assert parse_channel_participant("(p,q)1") == cp
    assert parse_channel_participant("plain") is None


def test_encode_word_kle_first_event():
    encoded = encode_word(parse_word("e>o!0"), KLE_BOUNDS)
    assert encoded == (send("e", "(e,o)0", "0"), recv("e", "(e,o)0", "0"))


def test_encode_word_alternates_ring_slots():
    word = parse_word("p>q!a p>q!b p>q?a p>q?b")
    encoded = encode_word(word, {("p", "q"): 2})
    receivers = [ev.receiver for ev in encoded if ev.kind == "send"
                 and ev.sender == "p"]
    assert receivers == ["(p,q)0", "(p,q)1"]


def test_encode_word_rejects_bound_violation():
    with pytest.raises(ValueError):
        encode_word(parse_word("p>q!a p>q!b"), {("p", "q"): 1})


def test_encode_word_empty():
    assert encode_word((), KLE_BOUNDS) == ()
    assert decode_word(()) == ()


def test_decode_encode_identity(rng):
    for _ in range(50):
        bounds = {("p", "q"): rng.choice([1, 2]), ("q", "p"): 1}
        word = random_fifo_word(rng, 10, participants=("p", "q", "r"),
                                bounds={**bounds, ("p", "r"): 1,
                                        ("r", "p"): 1, ("q", "r"): 1,
                                        ("r", "q"): 1})
        assert decode_word(encode_word(word, bounds)) == word


def test_encode_decode_identity_on_channel_ordered(rng):
    for _ in range(50):
        bounds = {("p", "q"): rng.choice([1, 2])}
        word = random_fifo_word(rng, 8, participants=("p", "q"),
                                bounds=bounds)
        encoded = encode_word(word, bounds)
        assert is_channel_ordered(encoded, bounds)
        assert encode_word(decode_word(encoded), bounds) == encoded


def test_encode_preserves_swaps(rng):
    """Equivalent bound-respecting words encode to equivalent routed
    words; closure members that overflow the bound are out of scope."""
    from amp.fifo import equivalent, is_b_bounded, project
    bounds = {("p", "q"): 1, ("q", "p"): 1}

    def respects(word):
        return all(is_b_bounded(project(word, channel=ch), b)
                   for ch, b in bounds.items())

    for _ in range(10):
        word = random_fifo_word(rng, 6, participants=("p", "q"),
                                bounds=bounds)
        for other in closure_upto([word]):
            if respects(other):
                assert equivalent(encode_word(word, bounds),
                                  encode_word(other, bounds), cap=200_000)


def test_decode_preserves_swaps(rng):
    """Equivalent routed words decode to equivalent plain words."""
    from amp.fifo import equivalent
    bounds = {("p", "q"): 1, ("q", "p"): 1}
    for _ in range(10):
        word = random_fifo_word(rng, 6, participants=("p", "q"), bounds=bounds)
        encoded = encode_word(word, bounds)
        for other in closure_upto([encoded]):
            try:
                decoded = decode_word(other)
            except ValueError:
                continue  # swaps may tear an exchange apart mid-pair
            assert equivalent(decode_word(encoded), decoded, cap=200_000)


def test_merge_immediate_pairs():
    merged = merge_immediate_pairs(three_party_machine(), {})
    assert all(ev.kind == "pair" for _, ev, _ in merged.transitions
               if ev is not None)
    assert len(merged.states) == 10


def test_merge_rejects_deferred_receive_on_unbounded_channel():
    with pytest.raises(ValueError):
        merge_immediate_pairs(kle_machine(), {})


def test_encode_psm_kle_matches_expected_shape():
    encoded = encode_psm(kle_machine(), KLE_BOUNDS)
    assert machine_isomorphic(encoded, kle_encoded_expected()) is not None


def test_encode_psm_empty_bounds_is_merge():
    machine = three_party_machine()
    encoded = encode_psm(machine, {})
    assert machine_isomorphic(encoded,
                              merge_immediate_pairs(machine, {})) is not None


def test_encode_psm_preserves_sink_finality_and_choice():
    """Routing through dedicated forwarders can only sharpen the choice
    class: the game comes out directed."""
    from amp.psm import DIRECTED, SENDER_DRIVEN, classify_choice
    encoded = encode_psm(kle_machine(), KLE_BOUNDS)
    assert encoded.trim().is_sink_final()
    assert classify_choice(encoded).kind in (SENDER_DRIVEN, DIRECTED)


def test_membership_transfer_on_kle():
    """Complete traces of the machine encode exactly to complete traces
    of the encoded machine, up to swaps."""
    machine = validate(kle_machine())
    encoded = encode_psm(machine.machine, KLE_BOUNDS)
    plain = complete_traces(maximal_traces_upto(machine.machine, 6))
    routed = complete_traces(maximal_traces_upto(encoded, 12))
    encoded_closure = closure_upto(routed)
    for word in plain:
        assert encode_word(word, KLE_BOUNDS) in encoded_closure
    plain_closure = closure_upto(plain)
    for word in routed:
        assert decode_word(word) in plain_closure


def test_encode_fsm_threads_counters():
    local = StateMachine(
        {"x", "y", "z"}, "x", {"z"},
        [("x", send("p", "q", "a"), "y"), ("y", send("p", "q", "b"), "z")])
    encoded = encode_fsm(local, "p", {("p", "q"): 2})
    receivers = sorted(ev.receiver for _, ev, _ in encoded.transitions)
    assert receivers == ["(p,q)0", "(p,q)1"]
    # Two sends wrap the size-two ring back to slot zero: still final.
    assert encoded.finals == {"z|s:(p,q)=0"}


def test_decode_fsm_inverts_encode_fsm():
    local = StateMachine(
        {"x", "y", "z"}, "x", {"z"},
        [("x", send("p", "q", "a"), "y"), ("y", recv("q", "p", "b"), "z")])
    encoded = encode_fsm(local, "p", {("p", "q"): 1, ("q", "p"): 1})
    decoded = decode_fsm(encoded)
    assert machine_isomorphic(decoded, local) is not None


def test_decode_fsm_preserves_determinism(rng):
    from .conftest import random_local_tree
    for _ in range(20):
        local = random_local_tree(rng)
        bounds = {("p", "q"): 1, ("q", "p"): 1, ("p", "r"): 1, ("r", "p"): 1}
        decoded = decode_fsm(encode_fsm(local, "p", bounds))
        assert decoded.is_deterministic()


def test_channel_participant_machine_shape():
    cp = ChannelParticipant("e", "o", 0)
    hub = channel_participant_machine(cp, ["0", "1", "win"])
    assert len(hub.states) == 4
    assert hub.finals == {hub.initial}
    assert machine_is_forwarding(hub, cp)
    hub_empty = channel_participant_machine(cp, [])
    assert len(hub_empty.states) == 1 and hub_empty.finals == {hub_empty.initial}


def test_is_forwarding_words():
    cp = ChannelParticipant("p", "q", 0)
    assert is_forwarding((), cp) == FORWARDING
    good = (recv("p", cp.name, "m"), send(cp.name, "q", "m"))
    assert is_forwarding(good, cp) == FORWARDING
    assert is_forwarding(good[:1], cp) == ALMOST
    bad = (send(cp.name, "q", "m"), recv("p", cp.name, "m"))
    assert is_forwarding(bad, cp) == NO


def test_subset_components_of_encoding_amicable():
    from amp.projection import minimize, subset_construction
    encoded = encode_psm(kle_machine(), KLE_BOUNDS)
    components = {
        name: minimize(subset_construction(encoded, name))
        for name in ("e", "o", "(e,o)0", "(o,e)0")}
    assert is_amicable(components, KLE_BOUNDS, k=8)
