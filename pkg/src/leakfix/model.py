"""Instruction-level power model with microarchitectural shadow state.

Every executed instruction yields one sample: a weighted sum of 25 named
components computed from the architectural values of the instruction and a
small amount of hidden state (previous operands, the memory-bus word and the
store latch).  Instructions fall into five modelled groups, each with its own
coefficient vector; branches and ``nop`` are in a sixth, silent group.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .asm import BRANCHES, LOADS, SHIFTS, STORES, Instruction, Program
from .machine import ExecRecord, MachineState, iter_run

GROUPS = ("alu", "shift", "mul", "load", "store")

VALUE_COMPONENTS = (
    "W_op1", "W_op2", "T_op1", "T_op2", "X_ops", "A_ops",
    "T_dest", "T_bus", "T_memcell", "T_latch", "B_adj", "W_result",
)
COMPONENTS = (
    VALUE_COMPONENTS
    + tuple(f"G_prev_{g}" for g in GROUPS)
    + tuple(f"G_next_{g}" for g in GROUPS)
    + ("R_0", "R_1", "R_2")  # reserved, always zero
)
assert len(COMPONENTS) == 25
IDX = {name: i for i, name in enumerate(COMPONENTS)}
G_PREV0 = IDX["G_prev_alu"]
G_NEXT0 = IDX["G_next_alu"]

LATCH_SETTERS = STORES + ("push", "pop")


def group_of(mnemonic: str) -> str:
    if mnemonic in SHIFTS:
        return "shift"
    if mnemonic == "muls":
        return "mul"
    if mnemonic in LOADS:
        return "load"
    if mnemonic in LATCH_SETTERS:
        return "store"
    if mnemonic in BRANCHES or mnemonic == "nop":
        return "neutral"
    return "alu"


def hw(x) -> int | np.ndarray:
    """Hamming weight of a 32-bit word (or an array of them)."""
    if np.ndim(x) == 0:
        return int(x & 0xFFFFFFFF).bit_count()
    return _kernels.popcount(x)


def hd(x, y) -> int | np.ndarray:
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return int((x ^ y) & 0xFFFFFFFF).bit_count()
    return _kernels.popcount(np.asarray(x, dtype=np.uint32) ^ np.asarray(y, dtype=np.uint32))


_RELEVANT = {
    "alu": ("W_op1", "W_op2", "T_op1", "T_op2", "X_ops", "A_ops", "T_dest", "T_latch",
            "W_result"),
    "load": ("W_op1", "W_op2", "T_op1", "T_op2", "T_dest", "T_bus", "B_adj", "W_result"),
    "store": ("W_op1", "W_op2", "T_op1", "T_op2", "T_dest", "T_bus", "T_memcell", "T_latch",
              "B_adj", "W_result"),
}
_RELEVANT["shift"] = _RELEVANT["alu"]
_RELEVANT["mul"] = _RELEVANT["alu"]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    coefficients: dict
    noise_sigma: float = 0.0

    @classmethod
    def default(cls) -> "ModelConfig":
        coeffs = {}
        for g in GROUPS:
            v = np.zeros(len(COMPONENTS))
            for name in _RELEVANT[g]:
                v[IDX[name]] = 1.0
            v[G_PREV0:G_PREV0 + 5] = 1.0
            v[G_NEXT0:G_NEXT0 + 5] = 1.0
            coeffs[g] = v
        return cls(coeffs)

    @classmethod
    def zeros(cls) -> "ModelConfig":
        return cls({g: np.zeros(len(COMPONENTS)) for g in GROUPS})

    def vector(self, group: str) -> np.ndarray:
        if group == "neutral":
            return _NEUTRAL
        return self.coefficients[group]

    def copy(self) -> "ModelConfig":
        return ModelConfig({g: v.copy() for g, v in self.coefficients.items()}, self.noise_sigma)

    def with_component(self, component: str, value: float, groups=GROUPS) -> "ModelConfig":
        out = self.copy()
        for g in groups:
            out.coefficients[g][IDX[component]] = value
        return out

    def scaled(self, group: str, factor: float) -> "ModelConfig":
        out = self.copy()
        out.coefficients[group] = out.coefficients[group] * factor
        return out

    def active_mask(self) -> dict:
        masks = {g: (v != 0) for g, v in self.coefficients.items()}
        masks["neutral"] = np.zeros(len(COMPONENTS), dtype=bool)
        return masks

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        """Read ``group.component = value`` lines on top of the default model."""
        cfg = cls.default()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key = key.strip()
            try:
                num = float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad number '{value.strip()}'") from None
            if not np.isfinite(num):
                raise ConfigError(f"line {lineno}: coefficient must be finite")
            if key == "noise.sigma":
                if num < 0:
                    raise ConfigError(f"line {lineno}: noise.sigma must be >= 0")
                cfg.noise_sigma = num
                continue
            group, _, comp = key.partition(".")
            if group not in GROUPS or comp not in IDX:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            cfg.coefficients[group][IDX[comp]] = num
        return cfg

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def dumps(self) -> str:
        lines = [f"noise.sigma = {self.noise_sigma!r}"]
        for g in GROUPS:
            for i, name in enumerate(COMPONENTS):
                lines.append(f"{g}.{name} = {float(self.coefficients[g][i])!r}")
        return "\n".join(lines) + "\n"


_NEUTRAL = np.zeros(len(COMPONENTS))


@dataclass
class LeakState:
    prev_op1: np.ndarray
    prev_op2: np.ndarray
    bus_word: np.ndarray
    store_latch_ref: int | None = None
    store_latch_pending: int | None = None
    # current contents of the referenced / pending register
    ref_value: np.ndarray | None = None
    pending_value: np.ndarray | None = None
    # what the latch multiplexer delivers this instruction: one step behind
    latch_value: np.ndarray | None = None
    prev_group: str | None = None

    @classmethod
    def initial(cls, batch: int) -> "LeakState":
        z = np.zeros(batch, dtype=np.uint32)
        return cls(z, z, z)


@dataclass
class PowerSample:
    slot: int
    mnemonic: str
    group: str
    total: np.ndarray
    components: np.ndarray  # (25, batch) raw values
    coefficients: np.ndarray = field(repr=False, default=None)
    instr: Instruction | None = field(repr=False, default=None)

    @property
    def contributions(self) -> np.ndarray:
        return self.coefficients[:, None] * self.components

    def component(self, name: str) -> np.ndarray:
        return self.components[IDX[name]]


def _byte_adjacency(word: np.ndarray) -> np.ndarray:
    b = [(word >> np.uint32(8 * i)) & np.uint32(0xFF) for i in range(4)]
    return sum(hd(b[i], b[i + 1]) for i in range(3))


def leak_step(exec_rec: ExecRecord, lstate: LeakState, next_instr: Instruction | None,
              config: ModelConfig, rng: np.random.Generator | None = None) -> tuple:
    """Compute one power sample and the successor shadow state."""
    ins = exec_rec.instr
    m = ins.mnemonic
    group = group_of(m)
    n = exec_rec.op1_value.shape[0]
    comps = np.zeros((len(COMPONENTS), n), dtype=np.int64)
    st = replace(lstate)

    # a pending latch reference becomes effective one instruction after the store
    if st.store_latch_pending is not None:
        st.store_latch_ref, st.ref_value = st.store_latch_pending, st.pending_value
        st.store_latch_pending = st.pending_value = None
    latch_now = st.latch_value
    st.latch_value = st.ref_value

    if group != "neutral":
        op1, op2 = exec_rec.op1_value, exec_rec.op2_value
        comps[IDX["W_op1"]] = hw(op1)
        comps[IDX["W_op2"]] = hw(op2)
        comps[IDX["T_op1"]] = hd(op1, st.prev_op1)
        comps[IDX["T_op2"]] = hd(op2, st.prev_op2)
        if group in ("alu", "shift", "mul"):
            comps[IDX["X_ops"]] = hw(op1 ^ op2)
            comps[IDX["A_ops"]] = hw(op1 & op2)
        if exec_rec.result_value is not None:
            comps[IDX["T_dest"]] = hd(exec_rec.result_value, exec_rec.dest_old_value)
            comps[IDX["W_result"]] = hw(exec_rec.result_value)
        if group != "load" and latch_now is not None:
            comps[IDX["T_latch"]] = hd(latch_now, op2)
        if exec_rec.mem is not None:
            eff = exec_rec.mem
            comps[IDX["T_bus"]] = hd(eff.new_word, st.bus_word)
            comps[IDX["B_adj"]] = _byte_adjacency(eff.new_word)
            if eff.is_store:
                comps[IDX["T_memcell"]] = hd(eff.new_word, eff.old_word)
            st.bus_word = eff.new_word
        st.prev_op1, st.prev_op2 = op1, op2
    else:
        z = np.zeros(n, dtype=np.uint32)
        st.prev_op1, st.prev_op2 = z, z

    if st.prev_group in GROUPS:
        comps[G_PREV0 + GROUPS.index(st.prev_group)] = 1
    if next_instr is not None:
        ng = group_of(next_instr.mnemonic)
        if ng in GROUPS:
            comps[G_NEXT0 + GROUPS.index(ng)] = 1

    # track the register contents behind the latch reference
    written = ins.regs_written()
    if exec_rec.result_value is not None:
        dest = next(iter(written - {13})) if written - {13} else None
        if dest is not None:
            if dest == st.store_latch_ref:
                st.ref_value = exec_rec.result_value
            if dest == st.store_latch_pending:
                st.pending_value = exec_rec.result_value
    if m in LATCH_SETTERS:
        reg = ins.operands[0].regs[0] if m in ("push", "pop") else ins.operands[0].n
        st.store_latch_pending = reg
        st.pending_value = exec_rec.result_value if m == "pop" else exec_rec.op2_value
    st.prev_group = group

    coeffs = config.vector(group)
    total = coeffs @ comps.astype(np.float64)
    if config.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires a noise source")
        total = total + rng.normal(0.0, config.noise_sigma, n)
    sample = PowerSample(exec_rec.slot, m, group, total, comps, coeffs, ins)
    return sample, st


def lookahead(program: Program, pc: int) -> Instruction | None:
    """Next instruction in the same basic block, or None at a block boundary."""
    ins = program.text[pc]
    nxt = pc + 1
    if ins.mnemonic in BRANCHES or nxt >= len(program.text) or nxt in program.block_starts():
        return None
    return program.text[nxt]


def emulate_batch(program: Program, state: MachineState, config: ModelConfig,
                  rng: np.random.Generator | None = None, max_steps: int = 100_000) -> list:
    """Run ``state`` (mutated) and return one batched PowerSample per slot."""
    lstate = LeakState.initial(state.batch)
    samples = []
    starts = program.block_starts()
    text = program.text
    for rec in iter_run(program, state, max_steps):
        pc = rec.pc
        nxt = None
        if text[pc].mnemonic not in BRANCHES and pc + 1 < len(text) and pc + 1 not in starts:
            nxt = text[pc + 1]
        sample, lstate = leak_step(rec, lstate, nxt, config, rng)
        samples.append(sample)
    return samples


def emulate_power(program: Program, init: MachineState, config: ModelConfig,
                  seed: int = 0) -> list:
    """Emulate one program run (any batch size) from a copy of ``init``."""
    rng = np.random.default_rng(seed)
    return emulate_batch(program, init.copy(), config, rng)


def trace_rows(samples: list) -> list:
    """Flatten trace 0 of a sample list into CSV-ready rows."""
    rows = []
    for s in samples:
        rows.append([s.slot, s.mnemonic, float(s.total[0])] + [int(v) for v in s.components[:, 0]])
    return rows
