import pytest
from hypothesis import given, settings, strategies as st

from leakfix.asm import (AsmError, Instruction, Mem, Reg, RegList, emit, ins, parse,
                         MNEMONICS)
from leakfix.corpus import load_corpus
from leakfix.rewrite import replacement, RULES

LISTING1 = "str r1, [r2]\n" + "nop\n" * 9 + "eors r3, r4\n"


def test_eors_tokens():
    p = parse("eors r3, r4")
    assert p.text == [Instruction("eors", (Reg(3), Reg(4)))]


def test_str_memory_operand():
    p = parse("str r1, [r2]")
    assert p.text[0] == Instruction("str", (Reg(1), Mem(2, 0)))


def test_user_r7_rejected():
    with pytest.raises(AsmError) as exc:
        parse("movs r7, r7")
    assert exc.value.kind == "mask-register-reserved"
    assert exc.value.line == 1


def test_r7_allowed_for_rule_output():
    p = parse("movs r7, r7  ; fix:operand-wipe")
    assert p.text[0].origin == "operand-wipe"


@pytest.mark.parametrize("src,kind", [
    ("frob r1, r2", "mnemonic"),
    ("b nowhere", "label"),
    ("movs r1, #256", "immediate"),
    ("ldr r1, [r2, #3]", "immediate"),
    ("eors r1, r16", "syntax"),
    ("eors r1, pc", "register"),
    ("eors r1", "syntax"),
])
def test_parse_errors(src, kind):
    with pytest.raises(AsmError) as exc:
        parse("nop\n" + src)
    assert exc.value.kind == kind
    assert exc.value.line == 2


def test_sp_only_in_stack_ops():
    with pytest.raises(AsmError):
        parse("movs r1, sp")
    assert parse("push {r1}").text[0].operands == (RegList((1,)),)


def test_multi_register_lists_expand():
    p = parse("push {r1, r2}\npop {r1, r2}")
    assert [i.text() for i in p.text] == ["push {r2}", "push {r1}", "pop {r1}", "pop {r2}"]


def test_labels_and_branches():
    p = parse("loop:\n subs r1, #1\n bne loop\n")
    assert p.labels == {"loop": 0}
    assert len(p.text) == 2


def test_data_regions():
    p = parse(".data a 0x100 8 = 01 02\n.data b 0x200 4\nnop")
    assert p.data["a"].init == b"\x01\x02"
    with pytest.raises(AsmError):
        parse(".data a 0x100 8\n.data b 0x104 4\nnop")
    with pytest.raises(AsmError):
        parse(".data a 0x102 8\nnop")


def test_instruction_count_excludes_directives():
    src = "; header\n.data d 0x1000 4\n\nx:\n  ldr r1, [r2]\n  nop\n"
    assert len(parse(src).text) == 2


def test_listing1_emits_eleven_lines():
    out = emit(parse(LISTING1)).strip().splitlines()
    assert len(out) == 11
    assert out[-1].strip() == "eors r3, r4"


def test_empty_program():
    assert emit(parse("")) == ""


def test_rotation_fix_emits_four_line_sequence():
    seq = replacement("rotation-mask", ins("rors r2, r3"))
    text = [i.text().split(";")[0].strip() for i in seq]
    assert text == ["eors r2, r7", "rors r2, r3", "rors r7, r3", "eors r2, r7"]
    again = parse("\n".join(i.text() for i in seq))
    assert again.text == seq


def test_corpus_round_trip():
    for entry in load_corpus():
        p = entry.program
        assert parse(emit(p)) == p


def test_rule_output_parses():
    cases = {"rors r2, r3": ["rotation-mask", "operand-wipe", "register-wipe"],
             "ldr r2, [r3]": ["load-shadow", "operand-wipe"],
             "str r2, [r3, #4]": ["store-shadow", "byte-split-store", "latch-wipe"]}
    for src, rules in cases.items():
        for rule in rules:
            seq = replacement(rule, ins(src))
            text = "\n".join(i.text() for i in seq)
            assert parse(text).text == seq
    assert set(RULES) >= {"rotation-mask", "store-shadow"}


_regs = st.sampled_from([0, 1, 2, 3, 4, 5, 6])


@st.composite
def instructions(draw):
    m = draw(st.sampled_from([m for m in MNEMONICS if m not in ("b", "beq", "bne")]))
    rd, rm = draw(_regs), draw(_regs)
    if m == "nop":
        return "nop"
    if m in ("push", "pop"):
        return f"{m} {{r{rd}}}"
    if m.startswith(("ldr", "str")):
        width = {"b": 1, "h": 2}.get(m[-1], 4)
        off = draw(st.integers(0, 31 if width == 1 else 31)) * width
        return f"{m} r{rd}, [r{rm}, #{off}]"
    if m in ("lsls", "lsrs") and draw(st.booleans()):
        return f"{m} r{rd}, r{rm}, #{draw(st.integers(0, 31))}"
    if m in ("movs", "adds", "subs", "cmps") and draw(st.booleans()):
        return f"{m} r{rd}, #{draw(st.integers(0, 255))}"
    return f"{m} r{rd}, r{rm}"


@settings(max_examples=200, deadline=None)
@given(st.lists(instructions(), max_size=12))
def test_round_trip_property(lines):
    p = parse("\n".join(lines))
    q = parse(emit(p))
    assert q == p
    assert parse(emit(q)) == q
