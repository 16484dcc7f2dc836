import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakfix.asm import ins, parse
from leakfix.machine import (STACK_BASE, STACK_SIZE, DivergenceError, MachineError,
                             MachineState, run, step)

M = 0xFFFFFFFF
u32 = st.integers(0, M)


def ref_alu(m, a, b):
    """Scalar oracle written from the Thumb semantics, independent of the emulator."""
    if m == "eors":
        return a ^ b
    if m == "ands":
        return a & b
    if m == "orrs":
        return a | b
    if m == "bics":
        return a & (~b & M)
    if m == "movs":
        return b
    if m == "adds":
        return (a + b) % 2**32
    if m in ("subs", "cmps"):
        return (a - b) % 2**32
    if m == "muls":
        return (a * b) % 2**32
    s = b & 0xFF
    if m == "lsls":
        return (a << s) & M if s < 32 else 0
    if m == "lsrs":
        return a >> s if s < 32 else 0
    if m == "rors":
        k = s % 32
        return ((a >> k) | (a << (32 - k))) & M
    raise AssertionError(m)


def one(a=0, b=0):
    st_ = MachineState.blank(1)
    st_.set_reg(1, a)
    st_.set_reg(2, b)
    return st_


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["eors", "ands", "orrs", "bics", "movs", "adds", "subs", "muls",
                        "lsls", "lsrs", "rors"]), u32, u32)
def test_alu_matches_oracle(m, a, b):
    s, rec = step(one(a, b), ins(f"{m} r1, r2"))
    want = ref_alu(m, a, b)
    assert int(s.regs[1, 0]) == want
    assert bool(s.flags["Z"][0]) == (want == 0)
    assert bool(s.flags["N"][0]) == bool(want >> 31)
    assert int(rec.op1_value[0]) == a and int(rec.op2_value[0]) == b


@settings(max_examples=200, deadline=None)
@given(u32, u32)
def test_add_sub_flags(a, b):
    s, _ = step(one(a, b), ins("adds r1, r2"))
    assert bool(s.flags["C"][0]) == (a + b > M)
    sa, sb = a - 2**32 * (a >> 31), b - 2**32 * (b >> 31)
    assert bool(s.flags["V"][0]) != (-2**31 <= sa + sb < 2**31)
    s, _ = step(one(a, b), ins("cmps r1, r2"))
    assert int(s.regs[1, 0]) == a  # compare does not write
    assert bool(s.flags["C"][0]) == (a >= b)
    assert bool(s.flags["Z"][0]) == (a == b)


def test_shift_immediate_form():
    s, _ = step(one(0, 0x80000001), ins("lsls r1, r2, #1"))
    assert int(s.regs[1, 0]) == 2
    assert bool(s.flags["C"][0])


@settings(max_examples=100, deadline=None)
@given(u32, st.sampled_from([0, 1, 2, 3]))
def test_byte_store_load_roundtrip(v, off):
    p = parse(".data d 0x1000 4\nstrb r1, [r2]\nldrb r3, [r2]\nldr r4, [r5]\n")
    s = MachineState.blank(1, p)
    s.set_reg(1, v)
    s.set_reg(2, 0x1000 + off)
    s.set_reg(5, 0x1000)
    out, _ = run(p, s)
    assert int(out.regs[3, 0]) == v & 0xFF
    assert int(out.regs[4, 0]) == (v & 0xFF) << (8 * off)


def test_little_endian_word():
    p = parse(".data d 0x1000 4 = 01 02 03 04\nldr r1, [r2]\nldrh r3, [r2, #2]\n")
    s = MachineState.blank(1, p)
    s.set_reg(2, 0x1000)
    out, recs = run(p, s)
    assert int(out.regs[1, 0]) == 0x04030201
    assert int(out.regs[3, 0]) == 0x0403
    assert recs[1].mem.aligned == 0x1000


def test_push_pop():
    p = parse("push {r1}\nmovs r1, #0\npop {r2}\n")
    s = one(0xDEADBEEF)
    out, _ = run(p, s)
    assert int(out.regs[2, 0]) == 0xDEADBEEF
    assert int(out.regs[13, 0]) == STACK_BASE + STACK_SIZE


def test_run_does_not_mutate_input():
    p = parse("movs r1, #5")
    s = one()
    run(p, s)
    assert int(s.regs[1, 0]) == 0


def test_loop_and_step_limit():
    p = parse("movs r1, #3\nloop:\nsubs r1, #1\nbne loop\n")
    out, recs = run(p, one())
    assert int(out.regs[1, 0]) == 0 and len(recs) == 7
    with pytest.raises(MachineError) as exc:
        run(parse("x:\nb x\n"), one(), max_steps=50)
    assert exc.value.kind == "steps"


def test_divergence_detected():
    s = MachineState.blank(2)
    s.set_reg(1, np.array([0, 1]))
    with pytest.raises(DivergenceError):
        run(parse("cmps r1, #0\nbeq done\nnop\ndone:\n"), s)
    with pytest.raises(DivergenceError):
        run(parse(".data d 0x1000 8\nldr r2, [r1]\n"), s)


@pytest.mark.parametrize("src,r2,kind", [
    ("ldr r1, [r2]", 0x5000, "memory"),
    (".data d 0x1000 4\nldr r1, [r2]", 0x1002, "alignment"),
    ("pop {r1}", 0, "stack"),
])
def test_machine_errors(src, r2, kind):
    p = parse(src)
    s = MachineState.blank(1, p)
    s.set_reg(2, r2)
    with pytest.raises(MachineError) as exc:
        run(p, s)
    assert exc.value.kind == kind


@settings(max_examples=50, deadline=None)
@given(st.lists(u32, min_size=3, max_size=3), st.lists(u32, min_size=3, max_size=3))
def test_batch_equals_individual_runs(xs, ys):
    p = parse("eors r1, r2\nrors r1, r2\nmuls r2, r1\nadds r1, r2\n")
    s = MachineState.blank(3)
    s.set_reg(1, np.array(xs))
    s.set_reg(2, np.array(ys))
    batch, _ = run(p, s)
    for i in range(3):
        single, _ = run(p, one(xs[i], ys[i]))
        assert np.array_equal(batch.regs[:, i], single.regs[:, 0])
