"""Parser and printer for the Thumb-subset assembly dialect.

One instruction per line, ``;`` starts a comment, ``name:`` defines a label
(optionally followed by an instruction on the same line) and

    .data <name> <base> <size> [= <hex byte> ...]

declares a word-aligned data region.  Instructions inserted by the rewrite
engine carry a trailing ``; fix:<rule-id>`` tag so that provenance survives a
print/parse round trip.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

MASK_REG = 7
SP = 13

ALU_REG = ("eors", "adds", "ands", "bics", "cmps", "movs", "orrs", "subs", "muls")
SHIFTS = ("lsls", "lsrs", "rors")
LOADS = ("ldr", "ldrb", "ldrh")
STORES = ("str", "strb", "strh")
STACK = ("push", "pop")
BRANCHES = ("b", "beq", "bne")
MNEMONICS = ALU_REG + SHIFTS + LOADS + STORES + STACK + BRANCHES + ("nop",)

# the 20 mnemonics of the pairwise interaction table, in table order
TABLE_UNIVERSE = (
    "eors", "adds", "ands", "bics", "cmps", "movs", "orrs", "subs",
    "lsls", "rors", "lsrs", "muls",
    "str", "strb", "strh", "ldr", "ldrb", "ldrh", "pop", "push",
)

ALIASES = {"mov": "movs", "cmp": "cmps", "eor": "eors", "add": "adds", "and": "ands",
           "orr": "orrs", "sub": "subs", "lsl": "lsls", "lsr": "lsrs", "ror": "rors",
           "mul": "muls", "bic": "bics"}

ACCESS_WIDTH = {"ldr": 4, "str": 4, "ldrh": 2, "strh": 2, "ldrb": 1, "strb": 1}
IMM_OPS = ("movs", "adds", "subs", "cmps")


class AsmError(ValueError):
    """Raised for any malformed or illegal assembly input."""

    def __init__(self, message: str, line: int | None = None, kind: str = "syntax"):
        self.line = line
        self.kind = kind
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self):
        return "sp" if self.n == SP else f"r{self.n}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self):
        return f"#{self.value:#x}" if self.value > 9 else f"#{self.value}"


@dataclass(frozen=True)
class Mem:
    base: int
    offset: int = 0

    def __str__(self):
        if self.offset:
            return f"[r{self.base}, #{self.offset}]"
        return f"[r{self.base}]"


@dataclass(frozen=True)
class RegList:
    regs: tuple

    def __str__(self):
        return "{" + ", ".join(f"r{r}" for r in self.regs) + "}"


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple = ()
    line: int | None = field(default=None, compare=False)
    # None for user code, otherwise the id of the rewrite rule that inserted it
    origin: str | None = None

    @property
    def is_inserted(self) -> bool:
        return self.origin is not None

    def regs_read(self) -> set:
        m, ops = self.mnemonic, self.operands
        if m in ("nop",) + BRANCHES:
            return set()
        if m == "push":
            return {ops[0].regs[0], SP}
        if m == "pop":
            return {SP}
        if m in LOADS:
            return {ops[1].base}
        if m in STORES:
            return {ops[0].n, ops[1].base}
        if m == "movs" or (m in SHIFTS and len(ops) == 3):
            ops = ops[1:]  # the destination is written, not read
        return {o.n for o in ops if isinstance(o, Reg)}

    def regs_written(self) -> set:
        m, ops = self.mnemonic, self.operands
        if m in ("nop", "cmps") + BRANCHES + STORES:
            return set()
        if m == "push":
            return {SP}
        if m == "pop":
            return {ops[0].regs[0], SP}
        return {ops[0].n}

    def regs_used(self) -> set:
        return self.regs_read() | self.regs_written()

    def text(self) -> str:
        m, ops = self.mnemonic, self.operands
        if m in SHIFTS and len(ops) == 3 and ops[0] == ops[1]:
            ops = (ops[0], ops[2])
        name = "cmp" if m == "cmps" and isinstance(ops[1], Imm) else m
        body = f"{name} {', '.join(str(o) for o in ops)}" if ops else name
        if self.origin:
            body += f"  ; fix:{self.origin}"
        return body

    def __str__(self):
        return self.text()


@dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int
    init: bytes = b""


@dataclass
class Program:
    text: list
    labels: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    reserved_mask_register: int = MASK_REG
    # probe batteries drive r7 directly; user programs never do
    allow_mask_register: bool = False

    def __len__(self):
        return len(self.text)

    def __eq__(self, other):
        if not isinstance(other, Program):
            return NotImplemented
        return (self.text == other.text and self.labels == other.labels
                and self.data == other.data)

    def label_at(self) -> dict:
        inv = {}
        for name, idx in self.labels.items():
            inv.setdefault(idx, []).append(name)
        return inv

    def block_starts(self) -> set:
        return set(self.labels.values())

    def copy(self, text=None) -> "Program":
        return Program(list(self.text if text is None else text), dict(self.labels),
                       dict(self.data), self.reserved_mask_register,
                       self.allow_mask_register)

    def validate(self) -> None:
        for ins in self.text:
            _check_instruction(ins, self.allow_mask_register)
            for op in ins.operands:
                if isinstance(op, Label) and op.name not in self.labels:
                    raise AsmError(f"unresolved label '{op.name}'", ins.line, "label")
        for name, idx in self.labels.items():
            if not 0 <= idx <= len(self.text):
                raise AsmError(f"label '{name}' out of range", kind="label")
        spans = sorted((r.base, r.base + r.size, r.name) for r in self.data.values())
        for r in self.data.values():
            if r.base % 4:
                raise AsmError(f"data region '{r.name}' base not word-aligned", kind="data")
        for (b0, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
            if b1 < e0:
                raise AsmError(f"data regions '{n0}' and '{n1}' overlap", kind="data")


_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$")
_REG_RE = re.compile(r"^(r(\d+)|sp|lr|pc|ip)$", re.I)


def _parse_int(tok: str, line: int) -> int:
    tok = tok.strip()
    if tok.startswith("#"):
        tok = tok[1:].strip()
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad immediate '{tok}'", line) from None


def _parse_reg(tok: str, line: int) -> int:
    t = tok.strip().lower()
    m = _REG_RE.match(t)
    if not m:
        raise AsmError(f"expected register, got '{tok.strip()}'", line)
    if t == "sp":
        return SP
    if t in ("lr", "pc", "ip"):
        return {"lr": 14, "pc": 15, "ip": 12}[t]
    n = int(m.group(2))
    if n > 15:
        raise AsmError(f"no such register r{n}", line)
    return n


def _split_operands(rest: str) -> list:
    parts, depth, cur = [], 0, ""
    for ch in rest:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def _parse_operand(tok: str, line: int):
    tok = tok.strip()
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise AsmError(f"unterminated memory operand '{tok}'", line)
        inner = [p.strip() for p in tok[1:-1].split(",")]
        base = _parse_reg(inner[0], line)
        if len(inner) == 1:
            return Mem(base, 0)
        if len(inner) == 2 and inner[1].startswith("#"):
            return Mem(base, _parse_int(inner[1], line))
        raise AsmError(f"unsupported addressing mode '{tok}'", line)
    if tok.startswith("{"):
        if not tok.endswith("}"):
            raise AsmError(f"unterminated register list '{tok}'", line)
        regs = []
        for p in tok[1:-1].split(","):
            if "-" in p:
                lo, hi = (_parse_reg(x, line) for x in p.split("-"))
                regs.extend(range(lo, hi + 1))
            elif p.strip():
                regs.append(_parse_reg(p, line))
        return RegList(tuple(regs))
    if tok.startswith("#") or tok[:1].isdigit() or tok[:1] == "-":
        return Imm(_parse_int(tok, line))
    if _REG_RE.match(tok.lower()):
        return Reg(_parse_reg(tok, line))
    return Label(tok)


def _check_range(value: int, lo: int, hi: int, what: str, line, step: int = 1) -> None:
    if not lo <= value <= hi or value % step:
        raise AsmError(f"{what} {value} out of range", line, "immediate")


def _check_instruction(ins: Instruction, allow_mask: bool) -> None:
    m, ops, line = ins.mnemonic, ins.operands, ins.line
    kinds = tuple(type(o) for o in ops)

    def shape(*expected):
        if kinds not in expected:
            raise AsmError(f"bad operands for {m}: {', '.join(map(str, ops))}", line)

    if m == "nop":
        shape(())
    elif m in BRANCHES:
        shape((Label,))
    elif m in ("push", "pop"):
        shape((RegList,))
        if len(ops[0].regs) != 1:
            raise AsmError("register list must be expanded", line)
    elif m in LOADS or m in STORES:
        shape((Reg, Mem))
        width = ACCESS_WIDTH[m]
        _check_range(ops[1].offset, 0, 31 * width, f"{m} offset", line, width)
    elif m in SHIFTS:
        if m == "rors":
            shape((Reg, Reg))
        else:
            shape((Reg, Reg), (Reg, Reg, Imm))
            if len(ops) == 3:
                _check_range(ops[2].value, 0, 31, "shift amount", line)
    elif m in IMM_OPS:
        shape((Reg, Reg), (Reg, Imm))
        if kinds[1] is Imm:
            _check_range(ops[1].value, 0, 255, f"{m} immediate", line)
    else:
        shape((Reg, Reg))

    for r in _regs_of(ins):
        if r == 15:
            raise AsmError("pc may not be an explicit operand", line, "register")
        if r == SP and m not in STACK:
            raise AsmError("sp may only be used by push/pop", line, "register")
        if r == MASK_REG and not allow_mask and ins.origin is None:
            raise AsmError("r7 is reserved as the mask register", line, "mask-register-reserved")


def _regs_of(ins: Instruction):
    for o in ins.operands:
        if isinstance(o, Reg):
            yield o.n
        elif isinstance(o, Mem):
            yield o.base
        elif isinstance(o, RegList):
            yield from o.regs


def _make(mnemonic: str, operands: list, line: int, origin) -> list:
    if mnemonic in SHIFTS and mnemonic != "rors" and len(operands) == 2 and isinstance(operands[1], Imm):
        operands = [operands[0], operands[0], operands[1]]
    if mnemonic == "muls" and len(operands) == 3:
        # unified syntax: muls rd, rn, rd
        if operands[0] != operands[2]:
            raise AsmError("muls destination must equal the last operand", line)
        operands = operands[:2]
    if mnemonic in STACK:
        if len(operands) == 1 and isinstance(operands[0], Reg):
            operands = [RegList((operands[0].n,))]
        if len(operands) == 1 and isinstance(operands[0], RegList) and len(operands[0].regs) > 1:
            regs = sorted(operands[0].regs)
            order = regs[::-1] if mnemonic == "push" else regs
            return [Instruction(mnemonic, (RegList((r,)),), line, origin) for r in order]
    return [Instruction(mnemonic, tuple(operands), line, origin)]


def parse(source: str, allow_mask_register: bool = False) -> Program:
    text: list = []
    labels: dict = {}
    data: dict = {}
    for lineno, raw in enumerate(source.splitlines(), start=1):
        code, _, comment = raw.partition(";")
        origin = None
        tag = comment.strip()
        if tag.startswith("fix:"):
            origin = tag[4:].strip() or None
        code = code.strip()
        while True:
            m = _LABEL_RE.match(code)
            if not m:
                break
            name = m.group(1)
            if name in labels:
                raise AsmError(f"duplicate label '{name}'", lineno, "label")
            labels[name] = len(text)
            code = m.group(2).strip()
        if not code:
            continue
        if code.startswith("."):
            _directive(code, lineno, data)
            continue
        head, _, rest = code.partition(" ")
        mnemonic = ALIASES.get(head.lower(), head.lower())
        if mnemonic not in MNEMONICS:
            raise AsmError(f"unknown mnemonic '{head}'", lineno, "mnemonic")
        operands = [_parse_operand(t, lineno) for t in _split_operands(rest)]
        text.extend(_make(mnemonic, operands, lineno, origin))
    prog = Program(text, labels, data, allow_mask_register=allow_mask_register)
    prog.validate()
    return prog


def _directive(code: str, lineno: int, data: dict) -> None:
    head, _, rest = code.partition(" ")
    if head != ".data":
        raise AsmError(f"unknown directive '{head}'", lineno)
    decl, _, init = rest.partition("=")
    parts = decl.split()
    if len(parts) != 3:
        raise AsmError(".data expects: name base size [= bytes]", lineno)
    name = parts[0]
    base, size = _parse_int(parts[1], lineno), _parse_int(parts[2], lineno)
    raw = bytes(int(b, 16) for b in init.split()) if init.strip() else b""
    if len(raw) > size:
        raise AsmError(f"initializer longer than region '{name}'", lineno)
    if name in data:
        raise AsmError(f"duplicate data region '{name}'", lineno)
    data[name] = Region(name, base, size, raw)


def emit(program: Program) -> str:
    lines = []
    for r in program.data.values():
        decl = f".data {r.name} {r.base:#x} {r.size}"
        if r.init:
            decl += " = " + " ".join(f"{b:02x}" for b in r.init)
        lines.append(decl)
    at = program.label_at()
    for i, ins in enumerate(program.text):
        for name in at.get(i, ()):
            lines.append(f"{name}:")
        lines.append(f"    {ins.text()}")
    for name in at.get(len(program.text), ()):
        lines.append(f"{name}:")
    return "\n".join(lines) + ("\n" if lines else "")


def ins(text: str, origin: str | None = None) -> Instruction:
    """Build one instruction from text; convenience for tests and rule templates."""
    out = _make(*_split_head(text), None, origin)
    assert len(out) == 1
    return out[0]


def _split_head(text: str):
    head, _, rest = text.strip().partition(" ")
    mnemonic = ALIASES.get(head.lower(), head.lower())
    if mnemonic not in MNEMONICS:
        raise AsmError(f"unknown mnemonic '{head}'", kind="mnemonic")
    return mnemonic, [_parse_operand(t, None) for t in _split_operands(rest)]


def with_origin(instruction: Instruction, origin: str) -> Instruction:
    return replace(instruction, origin=origin)
