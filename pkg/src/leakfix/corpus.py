"""Masked assembly kernels and the bindings that feed them secrets.

A binding turns a batch of secret inputs into initial machine states: it
masks the secrets with fresh randomness, places shares in registers and data
regions, and seeds the mask register r7.  It also knows how to unmask the
final state, which gives every kernel an independent functional oracle.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .asm import MASK_REG, Program, parse
from .machine import MachineState, run
from .tvla import InputBinding

U32 = np.uint32


def words(secrets: np.ndarray) -> np.ndarray:
    """(batch, 4k) bytes -> (batch, k) little-endian words."""
    b = np.asarray(secrets, dtype=np.uint8)
    return b.reshape(b.shape[0], -1, 4).copy().view("<u4")[..., 0].astype(U32)


def to_bytes(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=U32)
    return np.stack([(w >> U32(s)) & U32(0xFF) for s in (0, 8, 16, 24)], axis=-1).astype(np.uint8)


def rand_words(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 1 << 32, n, dtype=np.uint64).astype(U32)


def rotr(x, k: int):
    x = np.asarray(x, dtype=U32)
    k %= 32
    if k == 0:
        return x.copy()
    return (x >> U32(k)) | (x << U32(32 - k))


class Binding(InputBinding):
    """Base class: ``prepare`` builds the state and remembers the masks."""

    name = "binding"

    def prepare(self, program: Program, secrets: np.ndarray, rng: np.random.Generator):
        n = secrets.shape[0]
        state = MachineState.blank(n, program)
        state.set_reg(MASK_REG, rand_words(rng, n))
        ctx = self.fill(state, np.asarray(secrets, dtype=np.uint8), rng)
        return state, ctx

    def make_state(self, program, secrets, rng):
        return self.prepare(program, secrets, rng)[0]

    def equiv_states(self, program, n, rng):
        """Random bound states, for equivalence checks of rewritten kernels."""
        secrets = rng.integers(0, 256, (n, self.input_size), dtype=np.uint8)
        return self.make_state(program, secrets, rng)

    def fill(self, state: MachineState, secrets: np.ndarray, rng) -> dict:
        raise NotImplementedError

    def output(self, state: MachineState, ctx: dict) -> np.ndarray:
        """Unmasked result of a finished run, one row per trace."""
        raise NotImplementedError

    def reference(self, secrets: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ShiftRowsBinding(Binding):
    """State rows are words at base+4r; row r byte c holds state[r][c].

    With ``shared`` every byte carries one mask byte.  Otherwise each row has
    two mask bytes (p, q) laid out p q p q, so that adjacent bytes never share
    a mask.
    """

    input_size = 16
    base = 0x1000

    def __init__(self, shared: bool = False):
        self.shared = shared
        self.name = "shiftrows-shared" if shared else "shiftrows-rowmask"

    def fill(self, state, secrets, rng):
        n = secrets.shape[0]
        if self.shared:
            m = rng.integers(0, 256, n, dtype=np.uint8)
            masks = np.repeat(m[:, None], 16, axis=1)
        else:
            pq = rng.integers(0, 256, (n, 4, 2), dtype=np.uint8)
            masks = np.concatenate([pq, pq], axis=2).reshape(n, 16)
        state.write_bytes(self.base, secrets ^ masks)
        state.set_reg(1, self.base)
        state.set_reg(5, 8)
        state.set_reg(6, 16)
        state.set_reg(3, 24)
        return {"masks": masks}

    def output(self, state, ctx):
        masks = ctx["masks"]
        out_masks = masks.copy()
        for r, k in ((1, 8), (2, 16), (3, 24)):
            w = words(masks[:, 4 * r:4 * r + 4])[:, 0]
            out_masks[:, 4 * r:4 * r + 4] = to_bytes(rotr(w, k))
        return state.read_bytes(self.base, 16) ^ out_masks

    def reference(self, secrets):
        out = np.asarray(secrets, dtype=np.uint8).copy()
        for r in range(1, 4):
            row = out[:, 4 * r:4 * r + 4]
            # rotating the row word right by 8r moves byte c to column c - r
            out[:, 4 * r:4 * r + 4] = np.roll(row, -r, axis=1)
        return out


class RegReuseBinding(Binding):
    input_size = 8
    base = 0x1000

    def __init__(self, shared: bool = True):
        self.shared = shared
        self.name = "reg-reuse-shared" if shared else "reg-reuse-independent"

    def fill(self, state, secrets, rng):
        n = secrets.shape[0]
        a, b = words(secrets).T
        m1 = rand_words(rng, n)
        m2 = m1 if self.shared else rand_words(rng, n)
        state.set_reg(4, a ^ m1)
        state.set_reg(5, b ^ m2)
        state.set_reg(1, self.base)
        return {"m1": m1, "m2": m2}

    def output(self, state, ctx):
        w = words(state.read_bytes(self.base, 8))
        return to_bytes(np.stack([w[:, 0] ^ ctx["m1"], w[:, 1] ^ ctx["m2"]], axis=1)).reshape(-1, 8)

    def reference(self, secrets):
        return np.asarray(secrets, dtype=np.uint8)


class BusBytesBinding(Binding):
    input_size = 2
    name = "bus-bytes"

    def fill(self, state, secrets, rng):
        n = secrets.shape[0]
        m = rng.integers(0, 256, n, dtype=np.uint8)
        state.write_bytes(0x300, (secrets[:, 0] ^ m)[:, None])
        state.write_bytes(0x400, (secrets[:, 1] ^ m)[:, None])
        state.set_reg(3, 0x303)
        state.set_reg(4, 0x402)
        state.set_reg(5, rng.integers(0, 256, n, dtype=np.uint32))
        return {"m": m}

    def output(self, state, ctx):
        lo = state.read_bytes(0x300, 1)[:, 0] ^ ctx["m"]
        hi = state.read_bytes(0x400, 1)[:, 0] ^ ctx["m"]
        return np.stack([lo, hi, state.regs[6].astype(np.uint8)], axis=1)

    def reference(self, secrets):
        s = np.asarray(secrets, dtype=np.uint8)
        return np.concatenate([s, np.zeros((s.shape[0], 1), dtype=np.uint8)], axis=1)


class StoreLatchBinding(Binding):
    input_size = 8
    name = "store-latch"

    def fill(self, state, secrets, rng):
        n = secrets.shape[0]
        a, b = words(secrets).T
        m = rand_words(rng, n)
        r1 = rand_words(rng, n)
        state.set_reg(2, a ^ m)
        state.set_reg(4, b ^ m)
        state.set_reg(5, rand_words(rng, n))
        state.set_reg(1, r1)
        state.set_reg(3, 0x1000)
        return {"m": m, "r1": r1}

    def output(self, state, ctx):
        a = state.regs[5] ^ ctx["m"]
        b = state.regs[1] ^ ctx["r1"] ^ ctx["m"]
        return to_bytes(np.stack([a, b], axis=1)).reshape(-1, 8)

    def reference(self, secrets):
        return np.asarray(secrets, dtype=np.uint8)


class ChiBinding(Binding):
    """Secrets a, b, c as words; each split into two Boolean shares."""

    input_size = 12
    name = "chi-shares"
    base = 0x1000

    def fill(self, state, secrets, rng):
        n = secrets.shape[0]
        a, b, c = words(secrets).T
        ma, mb, mc, r = (rand_words(rng, n) for _ in range(4))
        layout = [a ^ ma, b ^ mb, c ^ mc, ma, mb, mc, r]
        for i, w in enumerate(layout):
            state.write_word(self.base + 4 * i, w)
        state.set_reg(1, self.base)
        return {}

    def output(self, state, ctx):
        w = words(state.read_bytes(self.base, 28))
        a = w[:, 0] ^ w[:, 3]
        return to_bytes(a)

    def reference(self, secrets):
        a, b, c = words(secrets).T
        return to_bytes(a ^ (~b & c))


class ArxBinding(Binding):
    input_size = 8
    name = "arx-shares"
    base = 0x1000
    K = 0x61707865

    def fill(self, state, secrets, rng):
        n = secrets.shape[0]
        a, d = words(secrets).T
        # 16-periodic masks: the same random half-word in both halves
        ha = rng.integers(0, 1 << 16, n, dtype=np.uint32)
        hd_ = rng.integers(0, 1 << 16, n, dtype=np.uint32)
        ma, md = ha | (ha << U32(16)), hd_ | (hd_ << U32(16))
        g = rand_words(rng, n)
        for i, w in enumerate([a ^ ma, ma, d ^ md, md, g, np.full(n, self.K, dtype=U32)]):
            state.write_word(self.base + 4 * i, w)
        state.set_reg(1, self.base)
        return {}

    def output(self, state, ctx):
        w = words(state.read_bytes(self.base + 24, 8)).astype(np.uint64)
        return to_bytes(((w[:, 0] + w[:, 1]) & 0xFFFFFFFF).astype(U32))

    def reference(self, secrets):
        a, d = words(secrets).T
        x = rotr(d ^ a, 16).astype(np.uint64)
        return to_bytes(((x + self.K) & 0xFFFFFFFF).astype(U32))


BINDINGS = {
    "shiftrows-rowmask": lambda: ShiftRowsBinding(shared=False),
    "shiftrows-shared": lambda: ShiftRowsBinding(shared=True),
    "reg-reuse-shared": lambda: RegReuseBinding(shared=True),
    "reg-reuse-independent": lambda: RegReuseBinding(shared=False),
    "bus-bytes": BusBytesBinding,
    "store-latch": StoreLatchBinding,
    "chi-shares": ChiBinding,
    "arx-shares": ArxBinding,
}


class CorpusError(RuntimeError):
    pass


@dataclass
class CorpusEntry:
    name: str
    file: str
    source: str
    program: Program
    binding: Binding
    expected_causes: frozenset
    oracle: str
    variants: dict = field(default_factory=dict)
    fixed_input: bytes | None = None

    def check_functional(self, program: Program | None = None, n: int = 1000,
                         seed: int = 0, binding: Binding | None = None) -> bool:
        """Run ``program`` (default: the entry's) on random inputs against the oracle."""
        program = program or self.program
        binding = binding or self.binding
        rng = np.random.default_rng(seed)
        secrets = rng.integers(0, 256, (n, binding.input_size), dtype=np.uint8)
        state, ctx = binding.prepare(program, secrets, rng)
        final, _ = run(program, state)
        return bool(np.array_equal(binding.output(final, ctx), binding.reference(secrets)))


def make_binding(name: str) -> Binding:
    try:
        return BINDINGS[name]()
    except KeyError:
        raise CorpusError(f"unknown binding scheme '{name}'") from None


def _split(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def _hex(name: str, value: str | None) -> bytes | None:
    if not value:
        return None
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise CorpusError(f"{name}: fixed_input is not hex") from None


def load_corpus() -> list:
    pkg = resources.files("leakfix") / "kernels"
    cfg = configparser.ConfigParser()
    try:
        cfg.read_string((pkg / "manifest.ini").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CorpusError("corpus manifest missing") from exc
    entries = []
    for name in cfg.sections():
        sec = cfg[name]
        try:
            source = (pkg / sec["file"]).read_text(encoding="utf-8")
        except (FileNotFoundError, KeyError) as exc:
            raise CorpusError(f"{name}: corpus file missing") from exc
        try:
            program = parse(source)
        except Exception as exc:
            raise CorpusError(f"{name}: {exc}") from exc
        entries.append(CorpusEntry(
            name=name, file=sec["file"], source=source, program=program,
            binding=make_binding(sec["binding"]),
            expected_causes=frozenset(_split(sec.get("expected_causes", ""))),
            oracle=sec.get("oracle", ""),
            variants={v: make_binding(v) for v in _split(sec.get("variants", ""))},
            fixed_input=_hex(name, sec.get("fixed_input")),
        ))
    return entries


def get_entry(name: str) -> CorpusEntry:
    for e in load_corpus():
        if e.name == name:
            return e
    raise CorpusError(f"no corpus entry named '{name}'")
