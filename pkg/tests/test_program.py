"""Tests for the program syntax and the shipped program corpus."""

from pathlib import Path

import pytest

from amp.program import ProgramSyntaxError, parse_program
from amp.typecheck import (PRecv, PRes, PSend, TypeCheckError, Unit,
                           subject_reduction_harness, typecheck_process)

from .test_typecheck import inner_csm, outer_csm, ping_program

PROGRAMS = Path(__file__).resolve().parent.parent / "protocols" / "programs"


def test_parse_basic_program():
    program = parse_program(
        """
        # a comment
        main = new s : Ping in
          ( s[p][q]!ping. s[p][q]?pong. 0
          | s[q][p]?ping. s[q][p]!pong. 0 )
        """,
        registry={"Ping": ping_program().csms["Ping"]})
    assert isinstance(program.main, PRes)
    parts = program.main.body.parts
    assert isinstance(parts[0], PSend) and isinstance(parts[1], PRecv)
    typecheck_process(program)


def test_parse_choices_defs_and_values():
    program = parse_program(
        """
        order Inner < Outer
        def Finish(x: q0) = x[q]!l(unit). 0
        main = new s1 : Inner in new s2 : Outer in
          ( (+ s2[p][r]!l1(s1[p]). 0
               s2[p][r]!l2(unit). Finish(s1[p]) )
          | s1[q][p]?l(x). 0
          | (& s2[r][p]?l1(x). x[q]!l(unit). 0
               s2[r][p]?l2(y). 0 ) )
        """,
        registry={"Inner": inner_csm(), "Outer": outer_csm()})
    assert program.theta == {"Finish": ("q0",)}
    send = program.defs["Finish"].body
    assert send.branches[0].payload == Unit()
    typecheck_process(program)


def test_parse_errors():
    with pytest.raises(ProgramSyntaxError):
        parse_program("main = ")
    with pytest.raises(ProgramSyntaxError):
        parse_program("def Q(x) = 0\nmain = 0")  # parameter without a type
    with pytest.raises(ProgramSyntaxError):
        parse_program("")


def test_delegation_order_enforced():
    with pytest.raises(TypeCheckError):
        parse_program(
            "main = new s2 : Outer in 0",
            registry={"Inner": inner_csm(), "Outer": outer_csm()})


def test_shipped_programs_typecheck():
    for path in sorted(PROGRAMS.glob("*.amp")):
        program = parse_program(path.read_text(), base_dir=path.parent)
        typecheck_process(program)


def test_shipped_programs_survive_harness():
    for path in sorted(PROGRAMS.glob("*.amp")):
        program = parse_program(path.read_text(), base_dir=path.parent)
        report = subject_reduction_harness(program, steps=12, seed=1)
        assert report.ok, (path.name, report.failure)
