"""Fixed-vs-random TVLA campaigns with streaming Welch t-tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .asm import SHIFTS, Program
from .machine import DivergenceError, MachineState
from .model import COMPONENTS, IDX, ModelConfig, emulate_batch

CAUSES = (
    "operand-interaction", "register-overwrite", "bus", "memory-overwrite",
    "store-latch", "byte-adjacency", "rotation-alignment", "none",
)

_COMPONENT_CAUSE = {
    "W_op1": "operand-interaction", "W_op2": "operand-interaction",
    "T_op1": "operand-interaction", "T_op2": "operand-interaction",
    "X_ops": "operand-interaction", "A_ops": "operand-interaction",
    "W_result": "operand-interaction",
    "T_dest": "register-overwrite", "T_bus": "bus", "T_memcell": "memory-overwrite",
    "T_latch": "store-latch", "B_adj": "byte-adjacency",
}

# when several components share the top |t|, the most specific cause wins
_SPECIFICITY = (
    "byte-adjacency", "memory-overwrite", "bus", "rotation-alignment",
    "register-overwrite", "store-latch", "operand-interaction",
)


def component_cause(component: str, mnemonic: str) -> str | None:
    cause = _COMPONENT_CAUSE.get(component)
    if cause == "register-overwrite" and mnemonic in SHIFTS:
        return "rotation-alignment"
    return cause


class CampaignError(RuntimeError):
    pass


@dataclass
class WelfordAccumulator:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n >= 2 else 0.0

    @classmethod
    def of(cls, xs) -> "WelfordAccumulator":
        acc = cls()
        for x in xs:
            acc = welford_update(acc, x)
        return acc


def welford_update(acc: WelfordAccumulator, x: float) -> WelfordAccumulator:
    n = acc.n + 1
    d = x - acc.mean
    mean = acc.mean + d / n
    return WelfordAccumulator(n, mean, acc.m2 + d * (x - mean))


def merge(a: WelfordAccumulator, b: WelfordAccumulator) -> WelfordAccumulator:
    if a.n == 0:
        return WelfordAccumulator(b.n, b.mean, b.m2)
    if b.n == 0:
        return WelfordAccumulator(a.n, a.mean, a.m2)
    n = a.n + b.n
    d = b.mean - a.mean
    return WelfordAccumulator(n, a.mean + d * b.n / n, a.m2 + b.m2 + d * d * a.n * b.n / n)


def welch_t(a: WelfordAccumulator, b: WelfordAccumulator) -> float:
    """Welch statistic; +inf (degenerate) if both classes are constant but differ."""
    if a.n < 2 or b.n < 2:
        raise ValueError("welch_t needs at least two samples per class")
    return float(_welch_arrays(a.n, a.mean, a.m2, b.n, b.mean, b.m2)[0])


def _welch_arrays(na, ma, m2a, nb, mb, m2b):
    ma, mb = np.atleast_1d(np.asarray(ma, float)), np.atleast_1d(np.asarray(mb, float))
    se2 = np.asarray(m2a, float) / (na - 1) / na + np.asarray(m2b, float) / (nb - 1) / nb
    diff = ma - mb
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
    zero_var = se2 <= 0
    t = np.where(zero_var & (diff == 0), 0.0, t)
    # constant classes with different means: report +inf, flagged as degenerate
    t = np.where(zero_var & (diff != 0), np.inf, t)
    return t


@dataclass
class SlotResult:
    slot: int
    mnemonic: str
    source_line: int | None
    pc: int
    t_total: float
    t_components: np.ndarray
    n_fixed: int
    n_random: int
    cause: str = "none"
    degenerate: bool = False
    # the executed Instruction object, when the report came from a live campaign
    instr: object = field(default=None, repr=False, compare=False)

    def max_abs_t(self) -> float:
        return max(abs(self.t_total), float(np.max(np.abs(self.t_components))))


@dataclass
class TTestReport:
    slots: list
    threshold: float = 4.5

    def __len__(self) -> int:
        return len(self.slots)

    def flagged(self) -> list:
        return [s for s in self.slots if s.cause != "none"]

    def flagged_slots(self) -> list:
        return [s.slot for s in self.flagged()]

    def max_abs_t(self) -> float:
        return max((s.max_abs_t() for s in self.slots), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slot", "pc", "mnemonic", "source_line", "t_total",
                    *[f"t_{c}" for c in COMPONENTS], "cause"])
        for s in self.slots:
            w.writerow([s.slot, s.pc, s.mnemonic, "" if s.source_line is None else s.source_line,
                        _fmt(s.t_total), *[_fmt(v) for v in s.t_components], s.cause])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, threshold: float = 4.5) -> "TTestReport":
        slots = []
        for row in csv.DictReader(io.StringIO(text)):
            comps = np.array([float(row[f"t_{c}"]) for c in COMPONENTS])
            line = row["source_line"]
            slots.append(SlotResult(int(row["slot"]), row["mnemonic"],
                                    int(line) if line else None, int(row["pc"]),
                                    float(row["t_total"]), comps, 0, 0, row["cause"]))
        return cls(slots, threshold)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) and v > 0 else ("-inf" if math.isinf(v) else f"{v:.6g}")


def slot_causes(s: SlotResult, threshold: float) -> set:
    """Every cause whose component clears the threshold at this slot, plus the
    classified one."""
    out = {s.cause} if s.cause != "none" else set()
    for i, name in enumerate(COMPONENTS):
        if abs(s.t_components[i]) >= threshold:
            cause = component_cause(name, s.mnemonic)
            if cause:
                out.add(cause)
    return out


def classify(mnemonic: str, t_total: float, t_components: np.ndarray, threshold: float) -> str:
    """Map the strongest leaking component to a cause; 'none' below threshold."""
    absc = np.abs(t_components)
    top = max(abs(t_total), float(absc.max()))
    if not top >= threshold:
        return "none"
    best = float(absc.max())
    candidates = set()
    for i, name in enumerate(COMPONENTS):
        v = absc[i]
        if v >= threshold and (v == best or (math.isfinite(best) and v >= best * (1 - 1e-9))):
            cause = component_cause(name, mnemonic)
            if cause:
                candidates.add(cause)
    if not candidates:
        # the total leaks but no single component clears the bar: fall back to the largest
        for i in np.argsort(-absc):
            cause = component_cause(COMPONENTS[i], mnemonic)
            if cause and absc[i] > 0:
                return cause
        return "operand-interaction"
    for cause in _SPECIFICITY:
        if cause in candidates:
            return cause
    return "none"  # pragma: no cover


class InputBinding:
    """Turns secret inputs into initial machine states (masking them on the way).

    Subclasses set ``input_size`` and implement :meth:`make_state`.  ``secrets``
    is a ``(batch, input_size)`` uint8 array; all randomness (masks, r7) must be
    drawn from ``rng``.
    """

    input_size: int = 0

    def make_state(self, program: Program, secrets: np.ndarray,
                   rng: np.random.Generator) -> MachineState:
        raise NotImplementedError


@dataclass
class CampaignSpec:
    program: Program
    binding: InputBinding
    n_traces: int = 10_000
    fixed_inputs: list = field(default_factory=list)
    threshold: float = 4.5
    seed: int = 0
    chunk: int = 8192

    def __post_init__(self):
        if self.n_traces <= 0 or self.n_traces % 2:
            raise ValueError("n_traces must be a positive even number")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")


def random_fixed_inputs(binding: InputBinding, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, binding.input_size, dtype=np.uint8) for _ in range(count)]


class _SlotAccumulators:
    def __init__(self, program: Program):
        self.pcs = {id(ins): pc for pc, ins in enumerate(program.text)}
        self.width = None
        self.info = None
        self.acc = {True: None, False: None}

    def add(self, samples, is_fixed: np.ndarray, masks: dict):
        if self.info is None:
            self.info = [(s.slot, s.mnemonic, s.instr.line, s.instr) for s in samples]
            self.width = len(samples) * (len(COMPONENTS) + 1)
            for k in (True, False):
                self.acc[k] = [0, np.zeros(self.width), np.zeros(self.width)]
        elif len(samples) != len(self.info):
            raise CampaignError(
                f"trace length changed ({len(self.info)} -> {len(samples)} slots); "
                "campaigns need constant control flow")
        n = samples[0].total.shape[0]
        block = np.empty((len(samples), len(COMPONENTS) + 1, n))
        for i, s in enumerate(samples):
            block[i, 0] = s.total
            block[i, 1:] = s.components * masks[s.group][:, None]
        block = block.reshape(self.width, n).T
        for k in (True, False):
            rows = block[is_fixed == k]
            a = self.acc[k]
            a[0], a[1], a[2] = _kernels.welford_batch(a[0], a[1], a[2], rows)

    def report(self, threshold: float) -> TTestReport:
        nf, mf, m2f = self.acc[True]
        nr, mr, m2r = self.acc[False]
        if nf < 2 or nr < 2:
            raise CampaignError("each class needs at least two traces")
        t = _welch_arrays(nf, mf, m2f, nr, mr, m2r).reshape(len(self.info), len(COMPONENTS) + 1)
        degen = (np.asarray(m2f) + np.asarray(m2r)).reshape(t.shape) <= 0
        slots = []
        for i, (slot, mnem, line, instr) in enumerate(self.info):
            res = SlotResult(slot, mnem, line, self.pcs.get(id(instr), -1), float(t[i, 0]),
                             t[i, 1:].copy(), int(nf), int(nr),
                             degenerate=bool(np.any(np.isinf(t[i]) & degen[i])), instr=instr)
            res.cause = classify(mnem, res.t_total, res.t_components, threshold)
            slots.append(res)
        return TTestReport(slots, threshold)


def run_single(spec: CampaignSpec, model: ModelConfig, fixed: np.ndarray,
               rng: np.random.Generator) -> TTestReport:
    """One fixed-vs-random campaign for a single fixed input."""
    accs = _SlotAccumulators(spec.program)
    masks = model.active_mask()
    fixed = np.asarray(fixed, dtype=np.uint8)
    size = spec.binding.input_size
    if fixed.shape != (size,):
        raise CampaignError(f"fixed input must have {size} bytes, got {fixed.shape}")
    remaining = spec.n_traces
    chunk = max(2, spec.chunk - spec.chunk % 2)
    while remaining > 0:
        n = min(chunk, remaining)
        # exactly half of each chunk is fixed, in random interleaved order
        is_fixed = rng.permutation(np.arange(n) < n // 2)
        secrets = rng.integers(0, 256, (n, size), dtype=np.uint8)
        secrets[is_fixed] = fixed
        state = spec.binding.make_state(spec.program, secrets, rng)
        try:
            samples = emulate_batch(spec.program, state, model, rng)
        except DivergenceError as exc:
            raise CampaignError(f"data-dependent control flow: {exc}") from exc
        if not samples:
            raise CampaignError("program executes no instructions")
        accs.add(samples, is_fixed, masks)
        remaining -= n
    return accs.report(spec.threshold)


def run_campaign(spec: CampaignSpec, model: ModelConfig) -> TTestReport:
    """Campaign over every fixed input of ``spec``, combined with :func:`aggregate_max`."""
    rng = np.random.default_rng(spec.seed)
    fixed_inputs = spec.fixed_inputs or random_fixed_inputs(spec.binding, 1, spec.seed + 1)
    reports = [run_single(spec, model, f, rng) for f in fixed_inputs]
    return aggregate_max(reports)


def aggregate_max(reports: list) -> TTestReport:
    """Per slot and component keep the t value with the largest magnitude."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    if len(reports) == 1:
        return first
    if any(len(r) != len(first) for r in reports):
        raise CampaignError("reports cover different slot counts")
    threshold = first.threshold
    out = []
    for i, base in enumerate(first.slots):
        tt = np.array([r.slots[i].t_total for r in reports])
        tc = np.stack([r.slots[i].t_components for r in reports])
        t_total = float(tt[np.argmax(np.abs(tt))])
        pick = np.argmax(np.abs(tc), axis=0)
        t_comp = tc[pick, np.arange(tc.shape[1])]
        res = SlotResult(base.slot, base.mnemonic, base.source_line, base.pc, t_total, t_comp,
                         sum(r.slots[i].n_fixed for r in reports),
                         sum(r.slots[i].n_random for r in reports),
                         degenerate=any(r.slots[i].degenerate for r in reports),
                         instr=base.instr)
        res.cause = classify(res.mnemonic, t_total, t_comp, threshold)
        out.append(res)
    return TTestReport(out, threshold)


__all__ = [
    "CAUSES", "CampaignError", "CampaignSpec", "InputBinding", "SlotResult", "TTestReport",
    "WelfordAccumulator", "aggregate_max", "classify", "component_cause", "merge",
    "random_fixed_inputs", "run_campaign", "run_single", "welch_t", "welford_update", "IDX",
]
