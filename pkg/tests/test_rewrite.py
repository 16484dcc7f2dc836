import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakfix.asm import emit, ins, parse
from leakfix.model import COMPONENTS, IDX
from leakfix.rewrite import (RULES, RewriteError, already_applied, apply_rule, fix_iteration,
                             replacement, rule_for, semantic_equiv_check, strip_inserted, z_live)
from leakfix.tvla import SlotResult, TTestReport, classify


def texts(seq):
    return [i.text().split(";")[0].strip() for i in seq]


def report_for(program, flagged):
    """A synthetic report: ``flagged`` maps pc -> component name."""
    slots = []
    for pc, instr in enumerate(program.text):
        tc = np.zeros(len(COMPONENTS))
        cause = "none"
        if pc in flagged:
            tc[IDX[flagged[pc]]] = 9.0
            cause = classify(instr.mnemonic, 0.0, tc, 4.5)
        slots.append(SlotResult(pc, instr.mnemonic, instr.line, pc, 0.0, tc, 10, 10, cause,
                                instr=instr))
    return TTestReport(slots, 4.5)


@pytest.mark.parametrize("rule,src,want", [
    ("operand-wipe", "eors r1, r2", ["movs r7, r7", "eors r1, r2"]),
    ("register-wipe", "movs r3, r5", ["movs r3, r7", "movs r3, r5"]),
    ("latch-wipe", "eors r1, r2", ["push {r7}", "pop {r7}", "eors r1, r2"]),
    ("load-shadow", "ldrb r2, [r3]", ["push {r7}", "pop {r2}", "ldrb r2, [r3]"]),
    ("store-shadow", "str r2, [r3, #4]", ["str r7, [r3, #4]", "str r2, [r3, #4]"]),
    ("rotation-mask", "rors r2, r3",
     ["eors r2, r7", "rors r2, r3", "rors r7, r3", "eors r2, r7"]),
])
def test_rule_templates(rule, src, want):
    seq = replacement(rule, ins(src))
    assert texts(seq) == want
    assert all(i.origin == rule for i in seq[:-1])


def test_byte_split_template():
    seq = replacement("byte-split-store", ins("str r1, [r2]"))
    t = texts(seq)
    assert t[:2] == ["push {r6}", "push {r0}"] and t[-2:] == ["pop {r0}", "pop {r6}"]
    assert [x for x in t if x.startswith("strb")] == [
        f"strb r{r}, [r2{f', #{k}' if k else ''}]" for k in range(4) for r in (0, 6)]
    half = texts(replacement("byte-split-store", ins("strh r1, [r2, #2]")))
    assert sum(x.startswith("strb") for x in half) == 4


def test_byte_split_register_collision():
    with pytest.raises(RewriteError) as exc:
        replacement("byte-split-store", ins("str r0, [r2]"))
    assert exc.value.kind == "register-collision"
    with pytest.raises(RewriteError):
        replacement("byte-split-store", ins("str r1, [r6]"))


def test_rule_dispatch():
    assert rule_for("rotation-alignment", ins("rors r2, r3")) == "rotation-mask"
    assert rule_for("rotation-alignment", ins("rors r3, r3")) is None
    assert rule_for("bus", ins("ldr r1, [r2]")) == "load-shadow"
    assert rule_for("bus", ins("ldr r2, [r2]")) is None
    assert rule_for("memory-overwrite", ins("strb r1, [r2]")) == "store-shadow"
    assert rule_for("byte-adjacency", ins("strb r1, [r2]")) is None
    assert rule_for("store-latch", ins("eors r1, r2")) == "latch-wipe"
    assert rule_for("register-overwrite", ins("eors r1, r2")) is None  # rd is read
    assert rule_for("register-overwrite", ins("movs r1, r2")) == "register-wipe"
    assert rule_for("none", ins("eors r1, r2")) is None
    assert set(RULES) == {"byte-split-store", "store-shadow", "load-shadow", "rotation-mask",
                          "register-wipe", "latch-wipe", "operand-wipe"}


_EQUIV_CASES = [
    ("rotation-mask", "rors r2, r3"),
    ("rotation-mask", "lsls r2, #5"),
    ("rotation-mask", "lsrs r2, r4"),
    ("operand-wipe", "eors r1, r2"),
    ("register-wipe", "movs r3, r5"),
    ("latch-wipe", "adds r1, r2"),
    ("load-shadow", "ldr r1, [r2]"),
    ("load-shadow", "ldrh r1, [r2, #2]"),
    ("store-shadow", "strb r1, [r2, #3]"),
    ("byte-split-store", "str r1, [r2]"),
    ("byte-split-store", "strh r1, [r2, #2]"),
]


@pytest.mark.parametrize("rule,src", _EQUIV_CASES)
def test_rules_preserve_semantics(rule, src):
    p = parse(".data d 0x1000 8\n" + src + "\neors r4, r1\n")
    q = apply_rule(p, 0, rule)
    assert len(q.text) > len(p.text)
    res = semantic_equiv_check(p, q, 1000, seed=3)
    assert res, res.detail


def test_equivalence_check_detects_difference():
    p = parse("eors r1, r2")
    q = parse("orrs r1, r2")
    res = semantic_equiv_check(p, q, 100)
    assert not res and "r1" in res.detail


def test_idempotent_fix():
    p = parse(".data d 0x1000 4\nldr r1, [r2]\nrors r1, r3\neors r4, r1\n")
    rep = report_for(p, {0: "T_bus", 1: "T_dest", 2: "T_op1"})
    q, log = fix_iteration(p, rep)
    assert [e.rule for e in log] == ["operand-wipe", "rotation-mask", "load-shadow"]
    # the same findings on the rewritten program add nothing
    rep2 = TTestReport([s for s in rep.slots], 4.5)
    q2, log2 = fix_iteration(q, rep2)
    assert q2.text == q.text
    for pc, rule in ((q.text.index(p.text[0]), "load-shadow"),
                     (q.text.index(p.text[2]), "operand-wipe")):
        assert already_applied(q, pc, rule)


def test_located_by_pc_when_loaded_from_csv():
    p = parse("eors r1, r2\nadds r1, r3\n")
    rep = TTestReport.from_csv(report_for(p, {1: "T_op2"}).to_csv())
    q, log = fix_iteration(p, rep)
    assert texts(q.text) == ["eors r1, r2", "movs r7, r7", "adds r1, r3"]
    assert log[0].pc == 1


def test_unfixable_cause_is_logged():
    p = parse(".data d 0x1000 4\nstrb r1, [r2]\n")
    q, log = fix_iteration(p, report_for(p, {0: "B_adj"}))
    assert q == p and log[0].rule == "unfixed"


def test_labels_shift_with_insertions():
    p = parse("movs r1, #2\nloop:\neors r4, r2\nsubs r1, #1\nbne loop\n")
    q = apply_rule(p, 1, "operand-wipe")
    assert q.labels["loop"] == 1
    q = apply_rule(p, 0, "register-wipe")
    assert q.labels["loop"] == 2
    assert semantic_equiv_check(p, q, 200)


def test_flags_guard():
    p = parse("cmps r1, #0\nmovs r1, r2\nbeq out\nnop\nout:\n")
    assert not z_live(p, 1)
    # movs sets Z itself, so a prefix is harmless
    apply_rule(p, 1, "register-wipe")
    p2 = parse(".data d 0x1000 4\ncmps r1, #0\nldr r3, [r2]\nbeq out\nnop\nout:\n")
    assert z_live(p2, 1)
    with pytest.raises(RewriteError) as exc:
        apply_rule(p2, 1, "load-shadow")
    assert exc.value.kind == "flags"


def test_strip_inserted_undoes_insertions():
    p = parse(".data d 0x1000 4\nldr r1, [r2]\nx:\neors r4, r1\nstr r4, [r2]\n")
    q = apply_rule(apply_rule(apply_rule(p, 2, "store-shadow"), 1, "latch-wipe"), 0,
                   "load-shadow")
    back = strip_inserted(q)
    assert back.text == p.text and back.labels == p.labels


def test_emitted_fix_reparses():
    p = parse(".data d 0x1000 4\nrors r1, r3\nstr r1, [r2]\n")
    q = apply_rule(apply_rule(p, 1, "byte-split-store"), 0, "rotation-mask")
    assert parse(emit(q), allow_mask_register=True).text == q.text


_ALU = ["eors", "adds", "ands", "orrs", "subs", "movs", "rors", "lsls", "lsrs", "muls"]


@st.composite
def programs(draw):
    lines = []
    for _ in range(draw(st.integers(1, 8))):
        kind = draw(st.sampled_from(["alu", "ldr", "str"]))
        a, b = draw(st.sampled_from([1, 3, 4, 5])), draw(st.sampled_from([1, 3, 4, 5]))
        if kind == "alu":
            lines.append(f"{draw(st.sampled_from(_ALU))} r{a}, r{b}")
        else:
            m = draw(st.sampled_from(["", "b", "h"]))
            w = {"": 4, "b": 1, "h": 2}[m]
            lines.append(f"{kind}{m} r{a}, [r2, #{w * draw(st.integers(0, 3 // w))}]")
    return parse(".data d 0x1000 4\n" + "\n".join(lines) + "\n")


@settings(max_examples=60, deadline=None)
@given(programs(), st.data())
def test_random_fixes_are_equivalent_and_grow(p, data):
    comps = ["T_op1", "T_dest", "T_bus", "T_memcell", "T_latch", "B_adj"]
    flagged = data.draw(st.dictionaries(st.integers(0, len(p.text) - 1), st.sampled_from(comps)))
    q, log = fix_iteration(p, report_for(p, flagged))
    assert len(q.text) >= len(p.text)
    assert len(q.text) - len(p.text) == sum(e.inserted for e in log)
    assert semantic_equiv_check(p, q, 200, seed=1)
