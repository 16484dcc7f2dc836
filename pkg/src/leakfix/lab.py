"""Instruction-pair probes: which storage elements do two instructions share?

A probe runs a short program many times with random operands and correlates
the emulated power at every slot with the Hamming distance between one value
of each instruction (by default the second operand).  A dominance probe puts
the first instruction on both sides of the second and asks whether the
leakage between the two copies survives the middle instruction.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .asm import BRANCHES, LOADS, STORES, TABLE_UNIVERSE, Program, parse
from .machine import STACK_BASE, STACK_SIZE, MachineState, iter_run
from .model import LeakState, ModelConfig, hd, leak_step

THRESHOLD = 0.1
SPACER = "movs r7, r7"

# (value register, other register) for the three instruction roles
_ROLES = {"a": (1, 2), "b": (4, 3), "a2": (6, 5)}
_REGION = {"a": 0x1000, "b": 0x1100, "a2": 0x1200}
_STACK_SLACK = 64


class CorrelationError(ValueError):
    pass


def is_alu(m: str) -> bool:
    return m not in LOADS + STORES + ("push", "pop")


@dataclass(frozen=True)
class ProbeSpec:
    first: str
    second: str
    spacer_count: int | None = None  # None: 0 between two ALU instructions, else 9
    probed_operand: str = "second"
    n_runs: int = 10_000

    def __post_init__(self):
        for m in (self.first, self.second):
            if m not in TABLE_UNIVERSE:
                raise ValueError(f"'{m}' is not one of the probed instructions")
        if self.spacer_count is not None and self.spacer_count < 0:
            raise ValueError("spacer_count must be >= 0")
        if self.probed_operand not in ("first", "second"):
            raise ValueError("probed_operand is 'first' or 'second'")

    @property
    def spacers(self) -> int:
        if self.spacer_count is not None:
            return self.spacer_count
        return 0 if is_alu(self.first) and is_alu(self.second) else 9


@dataclass
class InteractionVerdict:
    pair: tuple
    correlated: bool
    peak_abs_r: float
    dominance: str = "none"  # first | second | same-storage | none
    peak_slot: int | None = None

    @property
    def glyph(self) -> str:
        return {"same-storage": "o", "first": "<", "second": "^"}.get(self.dominance, ".")


def _line(m: str, role: str) -> str:
    v, o = _ROLES[role]
    if m in LOADS:
        return f"{m} r{v}, [r{o}]"
    if m in STORES:
        return f"{m} r{v}, [r{o}]"
    if m in ("push", "pop"):
        return f"{m} {{r{v}}}"
    return f"{m} r{o}, r{v}"


def _regions(roles) -> str:
    return "".join(f".data {r} {_REGION[r]:#x} 4\n" for r in roles)


def gen_probe(spec: ProbeSpec) -> Program:
    """first, spacer_count x ``movs r7, r7``, second."""
    lines = [_line(spec.first, "a")] + [SPACER] * spec.spacers + [_line(spec.second, "b")]
    return parse(_regions(("a", "b")) + "\n".join(lines) + "\n", allow_mask_register=True)


def gen_dominance(first: str, second: str, spacers: int | None = None) -> Program:
    """first, spacers, second, spacers, first again on fresh registers."""
    if spacers is None:
        spacers = 0 if is_alu(first) and is_alu(second) else 3
    body = ([_line(first, "a")] + [SPACER] * spacers + [_line(second, "b")]
            + [SPACER] * spacers + [_line(first, "a2")])
    return parse(_regions(("a", "b", "a2")) + "\n".join(body) + "\n", allow_mask_register=True)


def _random_state(program: Program, n: int, rng: np.random.Generator) -> MachineState:
    st = MachineState.blank(n, program)
    for role, (v, o) in _ROLES.items():
        st.set_reg(v, rng.integers(0, 1 << 32, n, dtype=np.uint64))
        st.set_reg(o, rng.integers(0, 1 << 32, n, dtype=np.uint64))
    st.set_reg(7, rng.integers(0, 1 << 32, n, dtype=np.uint64))
    uses = {}
    for ins in program.text:
        for role, (v, o) in _ROLES.items():
            if ins.mnemonic in LOADS + STORES and ins.operands[1].base == o:
                uses[o] = _REGION[role]
    for reg, base in uses.items():
        st.set_reg(reg, base)
        st.write_bytes(base, rng.integers(0, 256, (n, 4), dtype=np.uint8))
    # fresh stack words on both sides of sp, so pops read random data
    top = STACK_BASE + STACK_SIZE
    sp = top - _STACK_SLACK
    st.set_reg(13, sp)
    st.write_bytes(top - 2 * _STACK_SLACK,
                   rng.integers(0, 256, (n, 2 * _STACK_SLACK), dtype=np.uint8))
    return st


def _designated(rec, operand: str) -> np.ndarray:
    m = rec.instr.mnemonic
    if operand == "first":
        return rec.op1_value
    if m in LOADS:
        return rec.mem.new_word  # the whole aligned word travels on the bus
    if m == "pop":
        return rec.result_value
    return rec.op2_value


def _execute(program: Program, model: ModelConfig, n: int, seed: int):
    rng = np.random.default_rng(seed)
    state = _random_state(program, n, rng)
    lstate = LeakState.initial(n)
    recs, signals = [], []
    text = program.text
    for rec in iter_run(program, state):
        pc = rec.pc
        nxt = text[pc + 1] if pc + 1 < len(text) and text[pc].mnemonic not in BRANCHES else None
        sample, lstate = leak_step(rec, lstate, nxt, model, rng)
        recs.append(rec)
        # the total plus each weighted component, one row each
        signals.append(np.vstack([sample.total[None, :], sample.contributions]))
    return recs, np.stack(signals)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise CorrelationError("need two equal-length series of at least two values")
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc @ xc) * (yc @ yc))
    if den == 0:
        raise CorrelationError("undefined correlation: a series has zero variance")
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def _corr_rows(rows: np.ndarray, h: np.ndarray) -> np.ndarray:
    """|Pearson r| of every row against h; constant rows give 0."""
    hc = h - h.mean()
    hn = np.sqrt(hc @ hc)
    rc = rows - rows.mean(axis=-1, keepdims=True)
    rn = np.sqrt(np.einsum("...i,...i->...", rc, rc))
    if hn == 0:
        return np.zeros(rows.shape[:-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (rc @ hc) / (rn * hn)
    return np.nan_to_num(np.abs(r), nan=0.0)


def probe_interaction(spec: ProbeSpec, model: ModelConfig | None = None, seed: int = 0,
                      threshold: float = THRESHOLD) -> InteractionVerdict:
    model = model or ModelConfig.default()
    program = gen_probe(spec)
    recs, sig = _execute(program, model, spec.n_runs, seed)
    h = hd(_designated(recs[0], spec.probed_operand),
           _designated(recs[-1], spec.probed_operand)).astype(np.float64)
    r = _corr_rows(sig, h)  # (slots, 26)
    per_slot = r.max(axis=1)
    slot = int(np.argmax(per_slot))
    peak = float(per_slot[slot])
    return InteractionVerdict((spec.first, spec.second), peak >= threshold, peak, "none", slot)


def slot_correlation(spec: ProbeSpec, model: ModelConfig | None = None, seed: int = 0) -> list:
    """Per-slot correlation of the total power with the probed distance."""
    model = model or ModelConfig.default()
    program = gen_probe(spec)
    recs, sig = _execute(program, model, spec.n_runs, seed)
    h = hd(_designated(recs[0], spec.probed_operand),
           _designated(recs[-1], spec.probed_operand)).astype(np.float64)
    out = []
    for i in range(sig.shape[0]):
        try:
            out.append(pearson(sig[i, 0], h))
        except CorrelationError:
            out.append(0.0)
    return out


def _visible(first: str, second: str, model: ModelConfig, n: int, seed: int,
             threshold: float) -> bool:
    program = gen_dominance(first, second)
    recs, sig = _execute(program, model, n, seed)
    h = hd(_designated(recs[0], "second"), _designated(recs[-1], "second")).astype(np.float64)
    return bool(_corr_rows(sig[-1], h).max() >= threshold)


def probe_dominance(pair: tuple, model: ModelConfig | None = None, seed: int = 0,
                    n_runs: int = 10_000, threshold: float = THRESHOLD) -> str:
    """'first' or 'second' when one instruction's writes override the other's,
    'same-storage' when each clears the other."""
    model = model or ModelConfig.default()
    a, b = pair
    va = _visible(a, b, model, n_runs, seed, threshold)
    vb = _visible(b, a, model, n_runs, seed + 1, threshold)
    if va and not vb:
        return "first"
    if vb and not va:
        return "second"
    return "same-storage"


def build_matrix(model: ModelConfig | None = None, seed: int = 0, n_runs: int = 10_000,
                 threshold: float = THRESHOLD, universe=TABLE_UNIVERSE) -> dict:
    """Verdict for every ordered pair of the instruction universe."""
    model = model or ModelConfig.default()
    directed = {}
    for i, a in enumerate(universe):
        for j, b in enumerate(universe):
            directed[a, b] = probe_interaction(ProbeSpec(a, b, n_runs=n_runs), model,
                                               seed + 1000 * i + j, threshold)
    vis = {}

    def visible(a, b, k):
        if (a, b) not in vis:
            vis[a, b] = _visible(a, b, model, n_runs, seed + 500_000 + k, threshold)
        return vis[a, b]

    out = {}
    for i, a in enumerate(universe):
        for j, b in enumerate(universe):
            d1, d2 = directed[a, b], directed[b, a]
            peak = max(d1.peak_abs_r, d2.peak_abs_r)
            correlated = d1.correlated or d2.correlated
            dom = "none"
            if correlated:
                va = visible(a, b, 1000 * i + j)
                vb = visible(b, a, 1000 * j + i)
                dom = "first" if va and not vb else "second" if vb and not va else "same-storage"
            out[a, b] = InteractionVerdict((a, b), correlated, peak, dom, d1.peak_slot)
    return out


def matrix_grid(matrix: dict, universe=TABLE_UNIVERSE) -> str:
    """Text grid: o same storage, < row dominates, ^ column dominates, . none."""
    w = max(len(m) for m in universe)
    lines = []
    for a in universe:
        lines.append(f"{a:<{w}} " + " ".join(matrix[a, b].glyph for b in universe))
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, *cells = line.split()
        out[name] = cells
    return out


def matrix_csv(matrix: dict, universe=TABLE_UNIVERSE) -> str:
    buf = io.StringIO()
    buf.write("first,second,correlated,peak_abs_r,dominance,glyph\n")
    for a in universe:
        for b in universe:
            v = matrix[a, b]
            buf.write(f"{a},{b},{int(v.correlated)},{v.peak_abs_r:.4f},{v.dominance},{v.glyph}\n")
    return buf.getvalue()
