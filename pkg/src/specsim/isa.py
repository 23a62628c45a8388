"""Toy ISA: instruction types, the two-pass assembler, and the canonical renderer.

Programs are flat instruction lists addressed by index (the pc is an index).
Every instruction also carries a virtual address, assigned sequentially in
4-byte steps from the current origin; `.org` moves the origin so branch sites
can be placed at chosen addresses (predictor indexing and congruent aliasing
work on these addresses).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

CODE_BASE = 0x400000
INSTR_SIZE = 4
NUM_GPRS = 16
NUM_FPRS = 8


class ParseError(Exception):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self):
        return f"r{self.n}"


@dataclass(frozen=True)
class FReg:
    n: int

    def __str__(self):
        return f"f{self.n}"


@dataclass(frozen=True)
class Imm:
    v: int

    def __str__(self):
        return str(self.v)


@dataclass(frozen=True)
class Mem:
    """Address expression base + index*scale + disp, each part optional."""

    base: int | None = None
    index: int | None = None
    scale: int = 1
    disp: int = 0

    def __str__(self):
        parts = []
        if self.base is not None:
            parts.append(f"r{self.base}")
        if self.index is not None:
            parts.append(f"r{self.index}*{self.scale}")
        if self.disp or not parts:
            parts.append(str(self.disp))
        return "[" + " + ".join(parts) + "]"


@dataclass(frozen=True)
class CtxArgs:
    """Operands of the context-switch pseudo instruction."""

    mode: str  # 'user' | 'supervisor'
    lazy_fpu: bool = False
    pt: str | None = None

    def __str__(self):
        parts = [self.mode]
        if self.lazy_fpu:
            parts.append("lazy-fpu")
        if self.pt is not None:
            parts.append(f"pt={self.pt}")
        return ", ".join(parts)


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    ops: tuple
    vaddr: int
    line: int = field(default=0, compare=False)

    @property
    def kind(self) -> str:
        return OPCODES[self.mnemonic].kind

    def __str__(self):
        if not self.ops:
            return self.mnemonic
        return f"{self.mnemonic} " + ", ".join(str(o) for o in self.ops)


@dataclass
class Program:
    instructions: list[Instruction]
    labels: dict[str, int]
    entry: int = 0
    check_fetch: bool = False  # translate instruction addresses on fetch

    def __len__(self):
        return len(self.instructions)

    def vaddr(self, idx: int) -> int:
        return self.instructions[idx].vaddr

    def struct_eq(self, other: "Program") -> bool:
        return (
            self.instructions == other.instructions
            and self.entry == other.entry
        )


@dataclass(frozen=True)
class OpSpec:
    kind: str
    sig: tuple  # operand kinds: r, f, v (reg|imm), m, i, t (branch target)


# v = register or immediate source, t = instruction-index target
OPCODES: dict[str, OpSpec] = {
    "mov": OpSpec("arithmetic", ("r", "v")),
    "add": OpSpec("arithmetic", ("r", "r", "v")),
    "sub": OpSpec("arithmetic", ("r", "r", "v")),
    "mul": OpSpec("arithmetic", ("r", "r", "v")),
    "and": OpSpec("arithmetic", ("r", "r", "v")),
    "or": OpSpec("arithmetic", ("r", "r", "v")),
    "xor": OpSpec("arithmetic", ("r", "r", "v")),
    "shl": OpSpec("arithmetic", ("r", "r", "v")),
    "shr": OpSpec("arithmetic", ("r", "r", "v")),
    "cmpeq": OpSpec("arithmetic", ("r", "r", "v")),
    "cmpne": OpSpec("arithmetic", ("r", "r", "v")),
    "cmpltu": OpSpec("arithmetic", ("r", "r", "v")),
    "cmpgeu": OpSpec("arithmetic", ("r", "r", "v")),
    "cmovz": OpSpec("arithmetic", ("r", "v", "r")),
    "cmovnz": OpSpec("arithmetic", ("r", "v", "r")),
    "lea": OpSpec("arithmetic", ("r", "m")),
    "nop": OpSpec("arithmetic", ()),
    "load": OpSpec("load", ("r", "m")),
    "loadb": OpSpec("load", ("r", "m")),
    "store": OpSpec("store", ("m", "r")),
    "storeb": OpSpec("store", ("m", "r")),
    "flush": OpSpec("flush-line", ("m",)),
    "fence": OpSpec("fence", ()),
    "jmp": OpSpec("direct-jump", ("t",)),
    "bz": OpSpec("conditional-branch", ("r", "t")),
    "bnz": OpSpec("conditional-branch", ("r", "t")),
    "jmpi": OpSpec("indirect-jump", ("r",)),
    "call": OpSpec("call", ("t",)),
    "calli": OpSpec("call", ("r",)),
    "ret": OpSpec("return", ()),
    "bound": OpSpec("bound-check", ("r", "i", "i")),
    "bndcl": OpSpec("mpx-lower-check", ("r", "i")),
    "bndcu": OpSpec("mpx-upper-check", ("r", "i")),
    "rdmsr": OpSpec("read-msr", ("r", "v")),
    "wrpkru": OpSpec("write-pkru", ("r",)),
    "fmov": OpSpec("fpu-op", None),  # (f, r) or (r, f)
    "div": OpSpec("divide", ("r", "r", "v")),
    "ud2": OpSpec("ud-trigger", ()),
    "ctxsw": OpSpec("context-switch-pseudo", None),
    "halt": OpSpec("halt", ()),
}

_REG_RE = re.compile(r"^r(\d+)$")
_FREG_RE = re.compile(r"^f(\d+)$")
_IMM_RE = re.compile(r"^-?(0x[0-9a-fA-F]+|\d+)$")
_LABEL_RE = re.compile(r"^[A-Za-z_.$][A-Za-z0-9_.$]*$")


def _parse_int(tok: str, line: int) -> int:
    if not _IMM_RE.match(tok):
        raise ParseError(line, f"bad immediate '{tok}'")
    return int(tok, 0)


def _parse_reg(tok: str, line: int) -> Reg:
    m = _REG_RE.match(tok)
    if not m:
        raise ParseError(line, f"expected register, got '{tok}'")
    n = int(m.group(1))
    if n >= NUM_GPRS:
        raise ParseError(line, f"register index {n} out of range")
    return Reg(n)


def _parse_mem(tok: str, line: int) -> Mem:
    if not (tok.startswith("[") and tok.endswith("]")):
        raise ParseError(line, f"expected memory operand, got '{tok}'")
    body = tok[1:-1].strip()
    if not body:
        raise ParseError(line, "empty memory operand")
    base = index = None
    scale = 1
    disp = 0
    for term in (t.strip() for t in body.split("+")):
        if not term:
            raise ParseError(line, "malformed memory operand")
        if "*" in term:
            rtok, stok = (s.strip() for s in term.split("*", 1))
            if index is not None:
                raise ParseError(line, "more than one index register")
            index = _parse_reg(rtok, line).n
            scale = _parse_int(stok, line)
        elif _REG_RE.match(term):
            r = _parse_reg(term, line)
            if base is not None:
                raise ParseError(line, "more than one base register")
            base = r.n
        else:
            disp += _parse_int(term, line)
    return Mem(base, index, scale, disp)


def _parse_ctx(args: list[str], line: int) -> CtxArgs:
    if not args or args[0] not in ("user", "supervisor"):
        raise ParseError(line, "ctxsw needs a mode (user|supervisor)")
    lazy = False
    pt = None
    for tok in args[1:]:
        if tok == "lazy-fpu":
            lazy = True
        elif tok.startswith("pt="):
            pt = tok[3:]
        else:
            raise ParseError(line, f"unknown ctxsw option '{tok}'")
    return CtxArgs(args[0], lazy, pt)


def _split_operands(rest: str) -> list[str]:
    return [t.strip() for t in rest.split(",")] if rest.strip() else []


def assemble(text: str, code_base: int = CODE_BASE, check_fetch: bool = False) -> Program:
    """Assemble source text into a Program.

    One instruction, label, or directive per line; `;` starts a comment.
    Raises ParseError with the offending line number.
    """
    raw: list[tuple[int, str, list[str], int]] = []  # (line, mnem, args, vaddr)
    labels: dict[str, int] = {}
    entry_tok: tuple[str, int] | None = None
    vaddr = code_base

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split(";", 1)[0].strip()
        if not line:
            continue
        if line.endswith(":"):
            name = line[:-1].strip()
            if not _LABEL_RE.match(name):
                raise ParseError(lineno, f"bad label name '{name}'")
            if name in labels:
                raise ParseError(lineno, f"duplicate label '{name}'")
            labels[name] = len(raw)
            continue
        head, _, rest = line.partition(" ")
        head = head.strip()
        if head == ".org":
            vaddr = _parse_int(rest.strip(), lineno)
            continue
        if head == ".entry":
            entry_tok = (rest.strip(), lineno)
            continue
        if head not in OPCODES:
            raise ParseError(lineno, f"unknown opcode '{head}'")
        raw.append((lineno, head, _split_operands(rest), vaddr))
        vaddr += INSTR_SIZE

    def resolve_target(tok: str, lineno: int) -> Imm:
        if tok in labels:
            return Imm(labels[tok])
        if _IMM_RE.match(tok):
            idx = int(tok, 0)
            if not 0 <= idx < len(raw):
                raise ParseError(lineno, f"branch target {idx} out of range")
            return Imm(idx)
        raise ParseError(lineno, f"unresolved label '{tok}'")

    instructions: list[Instruction] = []
    for lineno, mnem, args, va in raw:
        spec = OPCODES[mnem]
        if mnem == "ctxsw":
            ops: tuple = (_parse_ctx(args, lineno),)
        elif mnem == "fmov":
            if len(args) != 2:
                raise ParseError(lineno, "fmov takes 2 operands")
            a, b = args
            if _FREG_RE.match(a) and _REG_RE.match(b):
                fa = int(a[1:])
                if fa >= NUM_FPRS:
                    raise ParseError(lineno, f"fpu register index {fa} out of range")
                ops = (FReg(fa), _parse_reg(b, lineno))
            elif _REG_RE.match(a) and _FREG_RE.match(b):
                fb = int(b[1:])
                if fb >= NUM_FPRS:
                    raise ParseError(lineno, f"fpu register index {fb} out of range")
                ops = (_parse_reg(a, lineno), FReg(fb))
            else:
                raise ParseError(lineno, "fmov needs one gpr and one fpu register")
        else:
            if len(args) != len(spec.sig):
                raise ParseError(
                    lineno, f"{mnem} takes {len(spec.sig)} operands, got {len(args)}"
                )
            parsed = []
            for kind, tok in zip(spec.sig, args):
                if kind == "r":
                    parsed.append(_parse_reg(tok, lineno))
                elif kind == "m":
                    parsed.append(_parse_mem(tok, lineno))
                elif kind == "i":
                    parsed.append(Imm(_parse_int(tok, lineno)))
                elif kind == "v":
                    if _REG_RE.match(tok):
                        parsed.append(_parse_reg(tok, lineno))
                    else:
                        parsed.append(Imm(_parse_int(tok, lineno)))
                elif kind == "t":
                    parsed.append(resolve_target(tok, lineno))
            ops = tuple(parsed)
        instructions.append(Instruction(mnem, ops, va, lineno))

    entry = 0
    if entry_tok is not None:
        tok, lineno = entry_tok
        entry = resolve_target(tok, lineno).v
    if entry >= len(instructions) and instructions:
        raise ParseError(0, f"entry point {entry} out of range")
    return Program(instructions, labels, entry, check_fetch)


def render(program: Program) -> str:
    """Canonical textual form: lowercase mnemonics, single space after comma,
    numeric branch targets, `.org` emitted at address discontinuities."""
    lines = []
    if program.entry != 0:
        lines.append(f".entry {program.entry}")
    expected = None
    for ins in program.instructions:
        if ins.vaddr != expected:
            lines.append(f".org {hex(ins.vaddr)}")
        expected = ins.vaddr + INSTR_SIZE
        lines.append(str(ins))
    return "\n".join(lines) + ("\n" if lines else "")
