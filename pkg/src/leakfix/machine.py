"""Architectural emulator for the Thumb subset.

State is batched: every register holds one uint32 per trace, so a campaign
executes all of its traces in lock-step.  Control flow and memory addresses
must be identical across the batch; anything else is reported as an error.
A batch of size one is the ordinary single-run emulator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .asm import (ACCESS_WIDTH, LOADS, SHIFTS, SP, STORES, Imm, Instruction, Program,
                  Reg)

MASK32 = np.uint32(0xFFFFFFFF)
STACK_BASE = 0x2000_0000
STACK_SIZE = 0x400


class MachineError(RuntimeError):
    def __init__(self, message: str, slot: int | None = None, kind: str = "machine"):
        self.slot = slot
        self.kind = kind
        super().__init__(message if slot is None else f"slot {slot}: {message}")


class DivergenceError(MachineError):
    """Traces in one batch disagree on control flow or addresses."""


@dataclass
class MemEffect:
    address: int
    aligned: int
    width: int
    is_store: bool
    old_word: np.ndarray
    new_word: np.ndarray


@dataclass
class ExecRecord:
    slot: int
    pc: int
    instr: Instruction
    op1_value: np.ndarray
    op2_value: np.ndarray
    result_value: np.ndarray | None = None
    dest_old_value: np.ndarray | None = None
    mem: MemEffect | None = None


def compose_word(b0, b1, b2, b3) -> np.ndarray:
    """Little-endian byte lanes to a word: byte at the lowest address is the LSB."""
    return (b0.astype(np.uint32) | (b1.astype(np.uint32) << 8)
            | (b2.astype(np.uint32) << 16) | (b3.astype(np.uint32) << 24))


@dataclass
class MachineState:
    regs: np.ndarray
    flags: dict
    mem: dict
    regions: list
    pc: int = 0
    cycle_count: int = 0
    stack: tuple = (STACK_BASE, STACK_SIZE)

    @property
    def batch(self) -> int:
        return self.regs.shape[1]

    @classmethod
    def blank(cls, batch: int = 1, program: Program | None = None,
              stack: tuple = (STACK_BASE, STACK_SIZE)) -> "MachineState":
        regs = np.zeros((16, batch), dtype=np.uint32)
        regs[SP] = stack[0] + stack[1]
        flags = {k: np.zeros(batch, dtype=bool) for k in "NZCV"}
        st = cls(regs, flags, {}, [], 0, 0, stack)
        st.add_region(stack[0], stack[1])
        if program is not None:
            for r in program.data.values():
                st.add_region(r.base, r.size, r.init)
        return st

    def add_region(self, base: int, size: int, init: bytes = b"") -> None:
        self.regions.append((base, size))
        zero = np.zeros(self.batch, dtype=np.uint8)
        for a in range(base, base + size):
            self.mem[a] = zero
        for i, b in enumerate(init):
            self.mem[base + i] = np.full(self.batch, b, dtype=np.uint8)

    def copy(self) -> "MachineState":
        return MachineState(self.regs.copy(), {k: v.copy() for k, v in self.flags.items()},
                            dict(self.mem), list(self.regions), self.pc, self.cycle_count,
                            self.stack)

    def set_reg(self, r: int, value) -> None:
        self.regs[r] = np.broadcast_to(np.asarray(value, dtype=np.uint64) & 0xFFFFFFFF,
                                       (self.batch,)).astype(np.uint32)

    def write_bytes(self, address: int, values) -> None:
        """Write per-trace bytes; ``values`` has shape (batch, k) or (k,)."""
        v = np.asarray(values, dtype=np.uint8)
        if v.ndim == 1:
            v = np.broadcast_to(v, (self.batch, v.shape[0]))
        for i in range(v.shape[1]):
            self._check(address + i, None)
            self.mem[address + i] = np.ascontiguousarray(v[:, i])

    def write_word(self, address: int, value) -> None:
        w = np.broadcast_to(np.asarray(value, dtype=np.uint64) & 0xFFFFFFFF, (self.batch,))
        w = w.astype(np.uint32)
        self.write_bytes(address, np.stack([(w >> s) & 0xFF for s in (0, 8, 16, 24)], axis=1))

    def read_bytes(self, address: int, count: int) -> np.ndarray:
        return np.stack([self._byte(address + i, None) for i in range(count)], axis=1)

    def word(self, aligned: int, slot=None) -> np.ndarray:
        return compose_word(*(self._byte(aligned + i, slot) for i in range(4)))

    def _check(self, address: int, slot) -> None:
        for base, size in self.regions:
            if base <= address < base + size:
                return
        raise MachineError(f"access to undeclared memory {address:#x}", slot, "memory")

    def _byte(self, address: int, slot) -> np.ndarray:
        try:
            return self.mem[address]
        except KeyError:
            raise MachineError(f"read of uninitialized memory {address:#x}", slot,
                               "memory") from None

    def snapshot(self, ignore_regs=()) -> tuple:
        keep = [r for r in range(16) if r not in ignore_regs]
        return self.regs[keep].copy(), {a: v.copy() for a, v in self.mem.items()}


def _uniform(values: np.ndarray, what: str, slot) -> int:
    first = int(values[0])
    if values.shape[0] > 1 and not np.all(values == values[0]):
        raise DivergenceError(f"data-dependent {what}", slot, "divergence")
    return first


def _nz(state: MachineState, res: np.ndarray) -> None:
    state.flags["N"] = (res >> np.uint32(31)).astype(bool)
    state.flags["Z"] = res == 0


def _shift(op: str, value: np.ndarray, amount: np.ndarray, carry_in: np.ndarray):
    v = value.astype(np.uint64)
    a = amount.astype(np.uint64)
    if op == "lsls":
        res = np.where(a >= 32, 0, (v << np.minimum(a, 32)) & 0xFFFFFFFF)
        c = np.where(a == 0, carry_in,
                     np.where(a <= 32, (v >> (32 - np.clip(a, 1, 32))) & 1, 0).astype(bool))
    elif op == "lsrs":
        res = np.where(a >= 32, 0, v >> np.minimum(a, 31))
        c = np.where(a == 0, carry_in,
                     np.where(a <= 32, (v >> (np.clip(a, 1, 32) - 1)) & 1, 0).astype(bool))
    else:
        k = a & 31
        res = ((v >> k) | (v << ((32 - k) & 31))) & 0xFFFFFFFF
        res = np.where(k == 0, v, res)
        c = np.where(a == 0, carry_in, ((res >> 31) & 1).astype(bool))
    return res.astype(np.uint32), np.asarray(c, dtype=bool)


def _addsub(a: np.ndarray, b: np.ndarray, subtract: bool):
    a64 = a.astype(np.uint64)
    b64 = b.astype(np.uint64)
    if subtract:
        full = a64 + ((~b) & MASK32).astype(np.uint64) + 1
    else:
        full = a64 + b64
    res = (full & 0xFFFFFFFF).astype(np.uint32)
    carry = full > 0xFFFFFFFF
    sa, sb, sr = a >> 31, (b >> 31) if not subtract else ((~b) >> 31) & 1, res >> 31
    overflow = (sa == sb) & (sr != sa)
    return res, carry, overflow


def step(state: MachineState, instr: Instruction, slot: int = 0,
         labels: dict | None = None) -> tuple:
    """Execute one instruction in place and return ``(state, record)``."""
    m, ops = instr.mnemonic, instr.operands
    n = state.batch
    zero = np.zeros(n, dtype=np.uint32)
    regs = state.regs
    rec = ExecRecord(slot, state.pc, instr, zero, zero)
    next_pc = state.pc + 1

    if m == "nop":
        pass
    elif m in ("b", "beq", "bne"):
        target = (labels or {}).get(ops[0].name)
        if target is None:
            raise MachineError(f"unresolved branch target {ops[0].name}", slot, "pc")
        if m == "b":
            next_pc = target
        else:
            taken = _uniform(state.flags["Z"], "branch condition", slot)
            if (m == "beq") == bool(taken):
                next_pc = target
    elif m in LOADS or m in STORES:
        base = _uniform(regs[ops[1].base], "address", slot)
        addr = (base + ops[1].offset) & 0xFFFFFFFF
        width = ACCESS_WIDTH[m]
        if addr % width:
            raise MachineError(f"unaligned {m} at {addr:#x}", slot, "alignment")
        aligned = addr & ~3
        old = state.word(aligned, slot)
        addr_v = np.full(n, addr, dtype=np.uint32)
        if m in LOADS:
            lane = (old >> np.uint32(8 * (addr - aligned)))
            val = lane & np.uint32((1 << (8 * width)) - 1)
            rt = ops[0].n
            rec.dest_old_value = regs[rt].copy()
            regs[rt] = val
            rec.op1_value, rec.op2_value, rec.result_value = addr_v, val, val
            rec.mem = MemEffect(addr, aligned, width, False, old, old)
        else:
            val = regs[ops[0].n].copy()
            for i in range(width):
                state._check(addr + i, slot)
                state.mem[addr + i] = ((val >> np.uint32(8 * i)) & np.uint32(0xFF)).astype(np.uint8)
            new = state.word(aligned, slot)
            rec.op1_value, rec.op2_value = addr_v, val
            rec.mem = MemEffect(addr, aligned, width, True, old, new)
    elif m == "push":
        r = ops[0].regs[0]
        sp = _uniform(regs[SP], "stack pointer", slot) - 4
        lo, size = state.stack
        if not lo <= sp < lo + size:
            raise MachineError("stack overflow", slot, "stack")
        old = state.word(sp, slot)
        val = regs[r].copy()
        for i in range(4):
            state.mem[sp + i] = ((val >> np.uint32(8 * i)) & np.uint32(0xFF)).astype(np.uint8)
        regs[SP] = sp
        rec.op1_value, rec.op2_value = np.full(n, sp, dtype=np.uint32), val
        rec.mem = MemEffect(sp, sp, 4, True, old, val)
    elif m == "pop":
        r = ops[0].regs[0]
        sp = _uniform(regs[SP], "stack pointer", slot)
        lo, size = state.stack
        if not lo <= sp < lo + size:
            raise MachineError("stack underflow", slot, "stack")
        val = state.word(sp, slot)
        rec.dest_old_value = regs[r].copy()
        regs[r] = val
        regs[SP] = sp + 4
        rec.op1_value, rec.op2_value, rec.result_value = np.full(n, sp, dtype=np.uint32), val, val
        rec.mem = MemEffect(sp, sp, 4, False, val, val)
    else:
        _alu(state, instr, rec)

    state.pc = next_pc
    state.cycle_count += 1
    return state, rec


def _alu(state: MachineState, instr: Instruction, rec: ExecRecord) -> None:
    m, ops = instr.mnemonic, instr.operands
    regs = state.regs
    rd = ops[0].n
    if m in SHIFTS and len(ops) == 3:
        a = regs[ops[1].n].copy()
        b = np.full(state.batch, ops[2].value, dtype=np.uint32)
    else:
        a = regs[rd].copy()
        b = (np.full(state.batch, ops[1].value, dtype=np.uint32) if isinstance(ops[1], Imm)
             else regs[ops[1].n].copy())
    rec.op1_value, rec.op2_value = a, b
    flags = state.flags
    if m == "cmps":
        res, c, v = _addsub(a, b, True)
        _nz(state, res)
        flags["C"], flags["V"] = c, v
        return
    if m == "eors":
        res = a ^ b
    elif m == "ands":
        res = a & b
    elif m == "orrs":
        res = a | b
    elif m == "bics":
        res = a & ~b
    elif m == "movs":
        res = b
    elif m == "muls":
        res = ((a.astype(np.uint64) * b.astype(np.uint64)) & 0xFFFFFFFF).astype(np.uint32)
    elif m in ("adds", "subs"):
        res, c, v = _addsub(a, b, m == "subs")
        flags["C"], flags["V"] = c, v
    elif m in SHIFTS:
        amount = b if len(ops) == 3 else (b & np.uint32(0xFF))
        res, c = _shift(m, a, amount, flags["C"])
        flags["C"] = c
    else:  # pragma: no cover - parser rejects anything else
        raise MachineError(f"unsupported mnemonic {m}")
    _nz(state, res)
    rec.dest_old_value = regs[rd].copy()
    rec.result_value = res
    regs[rd] = res


def run(program: Program, init: MachineState, max_steps: int = 100_000) -> tuple:
    """Run from ``init`` (copied) until the pc falls off the end."""
    state = init.copy()
    state.pc = 0
    records = []
    text = program.text
    while 0 <= state.pc < len(text):
        if len(records) >= max_steps:
            raise MachineError(f"max_steps={max_steps} exceeded", len(records), "steps")
        state, rec = step(state, text[state.pc], len(records), program.labels)
        records.append(rec)
    if state.pc != len(text):
        raise MachineError(f"pc out of range: {state.pc}", len(records), "pc")
    return state, records


def iter_run(program: Program, state: MachineState, max_steps: int = 100_000):
    """Generator form of :func:`run` that mutates ``state``; yields each record."""
    text = program.text
    slot = 0
    while 0 <= state.pc < len(text):
        if slot >= max_steps:
            raise MachineError(f"max_steps={max_steps} exceeded", slot, "steps")
        _, rec = step(state, text[state.pc], slot, program.labels)
        yield rec
        slot += 1
