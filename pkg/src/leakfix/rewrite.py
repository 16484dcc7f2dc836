"""Leak-fixing rewrite rules driven by per-slot leakage causes.

Rules either insert a short sequence in front of a leaky instruction or
replace it with an equivalent longer one.  Every inserted instruction carries
the id of the rule that produced it.  All rules use r7 as the source of fresh
randomness.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .asm import (LOADS, MASK_REG, SHIFTS, STORES, Instruction, Mem, Program,
                  Reg, RegList, ins)
from .machine import MachineError, MachineState, run
from .tvla import TTestReport, slot_causes

RULES = (
    "byte-split-store", "store-shadow", "load-shadow", "rotation-mask",
    "register-wipe", "latch-wipe", "operand-wipe",
)
PRECEDENCE = {r: i for i, r in enumerate(RULES)}
SCRATCH = (0, 6)

_Z_SETTERS = ("eors", "adds", "ands", "bics", "cmps", "movs", "orrs", "subs", "muls") + SHIFTS


class RewriteError(ValueError):
    def __init__(self, message: str, kind: str = "rule"):
        super().__init__(message)
        self.kind = kind


@dataclass
class LogEntry:
    source_line: int | None
    pc: int
    rule: str
    inserted: int
    note: str = ""
    iteration: int = 0

    def __str__(self):
        line = "-" if self.source_line is None else self.source_line
        text = f"line {line} pc {self.pc}: {self.rule} +{self.inserted}"
        return text + (f" ({self.note})" if self.note else "")


@dataclass
class RewriteLog:
    entries: list = field(default_factory=list)
    fixpoint_reached: bool = False
    iterations: int = 0

    def inserted_total(self) -> int:
        return sum(e.inserted for e in self.entries)

    def text(self) -> str:
        head = f"iterations: {self.iterations}\nfixpoint_reached: {self.fixpoint_reached}\n"
        return head + "".join(f"{e}\n" for e in self.entries)


def _t(template: str, rule: str) -> list:
    return [ins(line, origin=rule) for line in template.split(";")]


def _mem(instr: Instruction) -> Mem:
    return instr.operands[1]


def _rd(instr: Instruction) -> int:
    ops = instr.operands
    return ops[0].regs[0] if isinstance(ops[0], RegList) else ops[0].n


def rule_for(cause: str, instr: Instruction) -> str | None:
    """The rule that addresses ``cause`` at ``instr``, or None if nothing applies."""
    m = instr.mnemonic
    if cause == "byte-adjacency":
        return "byte-split-store" if m in ("str", "strh") else None
    if cause in ("memory-overwrite", "bus"):
        if m in STORES:
            return "store-shadow"
        if m in LOADS or m == "pop":
            return "load-shadow" if _shadow_ok(instr) else None
        if m == "push":
            return "latch-wipe"
        return None
    if cause == "register-overwrite":
        if m in LOADS or m == "pop":
            return "load-shadow" if _shadow_ok(instr) else None
        if instr.regs_written() - {13} and _rd(instr) not in instr.regs_read():
            return "register-wipe"
        return None
    if cause == "rotation-alignment":
        if m in SHIFTS and _rd(instr) not in _shift_amount_regs(instr):
            ops = instr.operands
            if len(ops) == 2 or ops[0] == ops[1]:
                return "rotation-mask"
            return "register-wipe"
        return None
    if cause == "store-latch":
        return "latch-wipe"
    if cause == "operand-interaction":
        return "operand-wipe"
    return None


def _shadow_ok(instr: Instruction) -> bool:
    # popping the mask into the destination must not destroy the load's base
    return instr.mnemonic == "pop" or _rd(instr) != _mem(instr).base


def _shift_amount_regs(instr: Instruction) -> set:
    ops = instr.operands
    if len(ops) == 2 and isinstance(ops[1], Reg):
        return {ops[1].n}
    return set()


def replacement(rule: str, instr: Instruction) -> list:
    """Instruction sequence that takes the place of ``instr`` under ``rule``."""
    m, ops = instr.mnemonic, instr.operands
    if rule == "operand-wipe":
        return _t("movs r7, r7", rule) + [instr]
    if rule == "register-wipe":
        return _t(f"movs r{_rd(instr)}, r7", rule) + [instr]
    if rule == "latch-wipe":
        return _t("push {r7}; pop {r7}", rule) + [instr]
    if rule == "load-shadow":
        return _t(f"push {{r7}}; pop {{r{_rd(instr)}}}", rule) + [instr]
    if rule == "store-shadow":
        return [Instruction(m, (Reg(MASK_REG), ops[1]), None, rule), instr]
    if rule == "rotation-mask":
        rd = ops[0].n
        amount = ops[-1]
        tail = f"r{amount.n}" if isinstance(amount, Reg) else f"#{amount.value}"
        return [
            ins(f"eors r{rd}, r7", rule),
            Instruction(m, ops, instr.line, rule),
            ins(f"{m} r7, {tail}", rule),
            ins(f"eors r{rd}, r7", rule),
        ]
    if rule == "byte-split-store":
        return _byte_split(instr)
    raise RewriteError(f"unknown rule '{rule}'")


def _byte_split(instr: Instruction) -> list:
    rule = "byte-split-store"
    m = instr.mnemonic
    if m not in ("str", "strh"):
        raise RewriteError(f"byte-split-store applies to str/strh, not {m}", "pattern")
    rs, mem = instr.operands[0].n, _mem(instr)
    clash = {rs, mem.base} & set(SCRATCH)
    if clash:
        raise RewriteError(
            f"byte-split-store needs r0/r6 as scratch but the store uses "
            f"r{', r'.join(map(str, sorted(clash)))}; remap those registers first",
            "register-collision")
    nbytes = 4 if m == "str" else 2
    if mem.offset + nbytes - 1 > 31:
        raise RewriteError("byte offsets beyond #31 cannot be encoded for strb", "immediate")
    out = _t("push {r6}; push {r0}", rule)
    for i in range(nbytes):
        off = mem.offset + i
        if i == 0:
            seq = (f"movs r0, #0xff; movs r6, r{rs}; ands r7, r7; ands r6, r0; lsls r0, #0; "
                   f"strb r0, [r{mem.base}, #{off}]; strb r6, [r{mem.base}, #{off}]")
        else:
            k = 8 * i
            seq = (f"movs r6, r7; movs r6, r{rs}; movs r0, #0xff; lsls r0, #{k}; ands r7, r7; "
                   f"ands r6, r0; lsrs r0, #{k}; lsrs r6, #{k}; "
                   f"strb r0, [r{mem.base}, #{off}]; strb r6, [r{mem.base}, #{off}]")
        out += _t(seq, rule)
    out += _t("pop {r0}; pop {r6}", rule)
    return out


def already_applied(program: Program, pc: int, rule: str) -> bool:
    """Idempotence guard: has ``rule`` already been applied at ``pc``?"""
    instr = program.text[pc]
    if instr.origin == rule and rule in ("rotation-mask", "byte-split-store"):
        return True
    if rule in ("rotation-mask", "byte-split-store"):
        return False
    pre = [i for i in replacement(rule, instr)[:-1]]
    start = pc - len(pre)
    return start >= 0 and program.text[start:pc] == pre


def _replaces(rule: str) -> bool:
    return rule in ("rotation-mask", "byte-split-store")


def _keeps_z(rule: str) -> bool:
    # rotation-mask ends with eors rd, r7 which leaves rd (hence Z) as the shift did
    return rule == "rotation-mask"


def z_live(program: Program, pc: int) -> bool:
    """Could a conditional branch read Z before something reassigns it, starting at pc?"""
    seen, work = set(), [pc]
    labels = program.labels
    while work:
        p = work.pop()
        while 0 <= p < len(program.text) and p not in seen:
            seen.add(p)
            i = program.text[p]
            if i.mnemonic in ("beq", "bne"):
                return True
            if i.mnemonic in _Z_SETTERS:
                break
            if i.mnemonic == "b":
                p = labels[i.operands[0].name]
                continue
            p += 1
    return False


def _flag_safe(program: Program, pc: int, rule: str) -> bool:
    if _keeps_z(rule):
        return True
    instr = program.text[pc]
    # insertion in front: the flagged instruction still runs afterwards, so if it
    # sets Z itself nothing is disturbed; otherwise Z must be dead at pc
    if not _replaces(rule) and instr.mnemonic in _Z_SETTERS:
        return True
    start = pc + 1 if _replaces(rule) else pc
    return not z_live(program, start)


def apply_rule(program: Program, pc: int, rule_or_cause: str) -> Program:
    """Apply a rule (or the rule for a cause) to the instruction at ``pc``."""
    instr = program.text[pc]
    rule = rule_or_cause
    if rule not in RULES:
        rule = rule_for(rule_or_cause, instr)
        if rule is None:
            raise RewriteError(f"no rule fixes '{rule_or_cause}' at {instr.text()}", "pattern")
    elif rule not in _applicable_rules(instr):
        raise RewriteError(f"rule {rule} does not match {instr.text()}", "pattern")
    if not _flag_safe(program, pc, rule):
        raise RewriteError(f"{rule} at pc {pc} would clobber live flags", "flags")
    seq = replacement(rule, instr)
    return _splice(program, pc, seq, keep_original=not _replaces(rule))


def _applicable_rules(instr: Instruction) -> set:
    causes = ("byte-adjacency", "memory-overwrite", "bus", "register-overwrite",
              "rotation-alignment", "store-latch", "operand-interaction")
    return {r for r in (rule_for(c, instr) for c in causes) if r}


def _splice(program: Program, pc: int, seq: list, keep_original: bool) -> Program:
    line = program.text[pc].line
    seq = [i if i.line is not None else Instruction(i.mnemonic, i.operands, line, i.origin)
           for i in seq]
    text = program.text[:pc] + seq + program.text[pc + 1:]
    grow = len(seq) - 1
    labels = {k: (v + grow if v > pc else v) for k, v in program.labels.items()}
    out = program.copy(text)
    out.labels = labels
    return out


def _locate(program: Program, slot) -> int | None:
    if slot.instr is not None:
        for pc, i in enumerate(program.text):
            if i is slot.instr:
                return pc
        return None  # the instruction has been replaced already
    if 0 <= slot.pc < len(program.text) and program.text[slot.pc].mnemonic == slot.mnemonic:
        return slot.pc
    return None


def fix_iteration(program: Program, report: TTestReport) -> tuple:
    """Rewrite every flagged instruction once; returns (program', log entries)."""
    threshold = report.threshold
    per_pc = {}
    for s in report.flagged():
        pc = _locate(program, s)
        if pc is None:
            continue
        per_pc.setdefault(pc, set()).update(slot_causes(s, threshold))
    entries = []
    out = program
    for pc in sorted(per_pc, reverse=True):
        instr = out.text[pc]
        rules = sorted({r for r in (rule_for(c, instr) for c in per_pc[pc]) if r},
                       key=PRECEDENCE.get)
        done = False
        notes = []
        for rule in rules:
            if already_applied(out, pc, rule):
                notes.append(f"{rule} already applied")
                continue
            try:
                new = apply_rule(out, pc, rule)
            except RewriteError as exc:
                notes.append(str(exc))
                continue
            entries.append(LogEntry(instr.line, pc, rule, len(new) - len(out)))
            out = new
            done = True
            break
        if not done:
            why = "; ".join(notes) or "no rule for " + ", ".join(sorted(per_pc[pc]))
            entries.append(LogEntry(instr.line, pc, "unfixed", 0, why))
    return out, entries


def _default_states(program: Program, n: int, rng: np.random.Generator) -> MachineState:
    st = MachineState.blank(n, program)
    bases = {o.base for i in program.text for o in i.operands if isinstance(o, Mem)}
    regions = sorted(program.data.values(), key=lambda r: r.base)
    for r in range(13):
        st.set_reg(r, rng.integers(0, 1 << 32, n, dtype=np.uint64))
    for r in bases:
        if regions:
            st.set_reg(r, regions[0].base)
    for reg in regions:
        st.write_bytes(reg.base, rng.integers(0, 256, (n, reg.size), dtype=np.uint8))
    return st


@dataclass
class EquivResult:
    equivalent: bool
    detail: str = ""

    def __bool__(self):
        return self.equivalent


def semantic_equiv_check(original: Program, rewritten: Program, n_random_states: int = 1000,
                         seed: int = 0, make_state=None) -> EquivResult:
    """Run both programs from the same random states and compare the results.

    Registers other than r7 and all declared data regions must agree; the
    stack and the flags are not compared.  ``make_state(program, n, rng)`` can
    supply bound initial states (the corpus does this).
    """
    rng = np.random.default_rng(seed)
    if make_state is None:
        init = _default_states(original, n_random_states, rng)
    else:
        init = make_state(original, n_random_states, rng)
    try:
        a, _ = run(original, init)
        b, _ = run(rewritten, init)
    except MachineError as exc:
        return EquivResult(False, f"execution failed: {exc}")
    for r in range(16):
        if r == MASK_REG:
            continue
        diff = np.nonzero(a.regs[r] != b.regs[r])[0]
        if diff.size:
            k = diff[0]
            return EquivResult(False, f"state {k}: r{r} {a.regs[r][k]:#x} != {b.regs[r][k]:#x}")
    for reg in original.data.values():
        x, y = a.read_bytes(reg.base, reg.size), b.read_bytes(reg.base, reg.size)
        bad = np.nonzero((x != y).any(axis=1))[0]
        if bad.size:
            return EquivResult(False, f"state {bad[0]}: region {reg.name} differs")
    return EquivResult(True)


def strip_inserted(program: Program) -> Program:
    """Drop every rule-inserted instruction (undoes insertion-only rules)."""
    keep = [i for i, x in enumerate(program.text) if not x.is_inserted]
    remap = {}
    for new, old in enumerate(keep):
        remap.setdefault(old, new)
    labels = {}
    for k, v in program.labels.items():
        nxt = next((o for o in keep if o >= v), len(program.text))
        labels[k] = remap.get(nxt, len(keep))
    out = program.copy([program.text[i] for i in keep])
    out.labels = labels
    return out


__all__ = [
    "RULES", "LogEntry", "RewriteError", "RewriteLog", "EquivResult", "apply_rule",
    "already_applied", "fix_iteration", "replacement", "rule_for", "semantic_equiv_check",
    "strip_inserted", "z_live",
]
