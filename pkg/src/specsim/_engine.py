"""Simulation core: memory system, predictors, reference interpreter, pipeline.

This module is plain Python but is also compiled as specsim._engine_c when a
C toolchain is available; specsim._impl picks one at import time. Keep it
free of import-time side effects and heavy dynamic tricks so both builds stay
byte-for-byte equivalent in behavior.

Timing contract (all deterministic):
  * arithmetic completes in the cycle it issues; dependents issue next cycle
  * cache hit = 4 cycles, miss = 200 cycles, decode threshold = 100
  * a faulting micro-op forwards its (policy-substituted) result quickly but
    is not retirement-eligible for FAULT_LATENCY cycles; that gap is the
    transient window of Meltdown-class attacks
  * squash discards pending results; cache and TLB fills already performed
    persist, which is precisely the attack surface under study
"""

from __future__ import annotations

from collections import OrderedDict

U64 = (1 << 64) - 1
PAGE_SIZE = 4096
PAGE_SHIFT = 12
VA_LIMIT = 1 << 48
LINE_SHIFT = 6
LINE_SIZE = 64

CACHE_SETS = 64
CACHE_WAYS = 8
HIT_LATENCY = 4
MISS_LATENCY = 200
PROBE_THRESHOLD = 100
TLB_CAPACITY = 64

ROB_DEPTH = 64
FAULT_LATENCY = 32
RETIRE_WIDTH = 4

PHT_BITS = 10
PHT_INIT = 2  # weakly taken: mistraining is required before an attack works
BTB_ENTRIES = 512
BTB_PARTIAL_BITS = 8
RSB_DEPTH = 16
STL_THRESHOLD = 4
STL_MAX = 7

# vaddr stride between congruent branch sites: preserves the PHT's low-12
# index bits and the BTB's index+partial-tag bits while changing the page
CONGRUENT_STRIDE = 1 << 19

# exception kinds and #PF details
K_PF, K_GP, K_NM, K_BR, K_DE, K_UD, K_SS, K_AC = (
    "PF", "GP", "NM", "BR", "DE", "UD", "SS", "AC")
D_US, D_P, D_RW, D_RSVD, D_XD, D_PK, D_SMAP = (
    "US", "P", "RW", "RSVD", "XD", "PK", "SMAP")

CLASS_OF = {k: "fault" for k in (K_PF, K_GP, K_NM, K_BR, K_DE, K_UD, K_SS, K_AC)}

FWD_REAL = "forward-real-data"
FWD_ZERO = "forward-zero"
FWD_NONE = "no-transient-continuation"

FAULT_KEYS = (
    "PF-US", "PF-P", "PF-RW", "PF-RSVD", "PF-XD", "PF-PK", "PF-SMAP",
    "GP", "NM", "BR", "DE", "UD", "SS", "AC",
)


class SimError(Exception):
    pass


class StepBudgetExceeded(SimError):
    pass


class ConfigError(SimError):
    pass


class UnknownPageTable(SimError):
    pass


class MemoryFault(SimError):
    """Raised by architectural probe reads that hit a translation fault."""

    def __init__(self, record):
        super().__init__(str(record))
        self.record = record


class ExceptionRecord:
    __slots__ = ("kind", "cls", "detail", "idx")

    def __init__(self, kind, detail=None, idx=0, cls=None):
        self.kind = kind
        self.cls = cls if cls is not None else CLASS_OF[kind]
        self.detail = detail
        self.idx = idx

    @property
    def fault_key(self):
        return "PF-" + self.detail if self.kind == K_PF else self.kind

    def __eq__(self, other):
        return (
            isinstance(other, ExceptionRecord)
            and self.kind == other.kind
            and self.cls == other.cls
            and self.detail == other.detail
            and self.idx == other.idx
        )

    def __hash__(self):
        return hash((self.kind, self.cls, self.detail, self.idx))

    def __repr__(self):
        d = f"({self.detail})" if self.detail else ""
        return f"#{self.kind}{d}@{self.idx}"


# ---------------------------------------------------------------------------
# physical memory and address translation
# ---------------------------------------------------------------------------

class PhysMem:
    """Sparse physical byte store; unwritten bytes read as zero."""

    __slots__ = ("frames",)

    def __init__(self):
        self.frames = {}

    def _frame(self, paddr):
        f = self.frames.get(paddr >> PAGE_SHIFT)
        if f is None:
            f = bytearray(PAGE_SIZE)
            self.frames[paddr >> PAGE_SHIFT] = f
        return f

    def read(self, paddr, size):
        val = 0
        for i in range(size):
            a = paddr + i
            fr = self.frames.get(a >> PAGE_SHIFT)
            b = fr[a & (PAGE_SIZE - 1)] if fr is not None else 0
            val |= b << (8 * i)
        return val

    def write(self, paddr, size, value):
        for i in range(size):
            a = paddr + i
            self._frame(a)[a & (PAGE_SIZE - 1)] = (value >> (8 * i)) & 0xFF

    def read_line(self, line_addr):
        base = line_addr << LINE_SHIFT
        fr = self.frames.get(base >> PAGE_SHIFT)
        off = base & (PAGE_SIZE - 1)
        if fr is None:
            return bytes(LINE_SIZE)
        return bytes(fr[off:off + LINE_SIZE])

    def copy(self):
        m = PhysMem()
        m.frames = {k: bytearray(v) for k, v in self.frames.items()}
        return m

    def equal(self, other):
        keys = set(self.frames) | set(other.frames)
        zero = bytes(PAGE_SIZE)
        for k in keys:
            a = bytes(self.frames.get(k, zero))
            b = bytes(other.frames.get(k, zero))
            if a != b:
                return False
        return True


class PageTableEntry:
    __slots__ = ("frame", "present", "writable", "user", "reserved", "nx", "pkey")

    def __init__(self, frame, present=True, writable=True, user=True,
                 reserved=False, nx=False, pkey=0):
        self.frame = frame
        self.present = present
        self.writable = writable
        self.user = user
        self.reserved = reserved
        self.nx = nx
        self.pkey = pkey


class AddressSpace:
    __slots__ = ("name", "pages")

    def __init__(self, name):
        self.name = name
        self.pages = {}

    def map_page(self, vaddr, frame, writable=True, user=True, present=True,
                 reserved=False, nx=False, pkey=0):
        self.pages[vaddr >> PAGE_SHIFT] = PageTableEntry(
            frame, present, writable, user, reserved, nx, pkey)

    def entry(self, vaddr):
        return self.pages.get(vaddr >> PAGE_SHIFT)


class TranslationResult:
    __slots__ = ("ok", "paddr", "detail", "terminal", "leaked_frame")

    def __init__(self, ok, paddr=None, detail=None, terminal=False, leaked_frame=None):
        self.ok = ok
        self.paddr = paddr
        self.detail = detail
        self.terminal = terminal
        self.leaked_frame = leaked_frame


class Tlb:
    """Per-physical-core TLB keyed by (table, vpage), LRU, fixed capacity."""

    __slots__ = ("capacity", "entries", "fill_counts")

    def __init__(self, capacity=TLB_CAPACITY):
        self.capacity = capacity
        self.entries = OrderedDict()
        self.fill_counts = {}

    def lookup(self, ptid, vpage):
        key = (ptid, vpage)
        e = self.entries.get(key)
        if e is not None:
            self.entries.move_to_end(key)
        return e

    def fill(self, ptid, vpage, entry):
        key = (ptid, vpage)
        self.entries[key] = entry
        self.entries.move_to_end(key)
        if len(self.entries) > self.capacity:
            self.entries.popitem(last=False)
        self.fill_counts[key] = self.fill_counts.get(key, 0) + 1

    def fill_count(self, vaddr, ptid):
        return self.fill_counts.get((ptid, vaddr >> PAGE_SHIFT), 0)

    def flush(self):
        self.entries.clear()


class Cache:
    """Physically-indexed set-associative data cache with line payloads."""

    __slots__ = ("sets", "hit_latency", "miss_latency")

    def __init__(self, hit_latency=HIT_LATENCY, miss_latency=MISS_LATENCY):
        self.sets = [OrderedDict() for _ in range(CACHE_SETS)]
        self.hit_latency = hit_latency
        self.miss_latency = miss_latency

    def _set_tag(self, paddr):
        line = paddr >> LINE_SHIFT
        return self.sets[line & (CACHE_SETS - 1)], line >> 6

    def holds(self, paddr):
        s, tag = self._set_tag(paddr)
        return tag in s

    def access(self, paddr, phys, fill=True):
        """Returns (latency, filled). Hit refreshes LRU; miss optionally fills."""
        s, tag = self._set_tag(paddr)
        if tag in s:
            s.move_to_end(tag)
            return self.hit_latency, False
        if fill:
            s[tag] = phys.read_line(paddr >> LINE_SHIFT)
            if len(s) > CACHE_WAYS:
                s.popitem(last=False)
            return self.miss_latency, True
        return self.miss_latency, False

    def install(self, paddr, payload):
        s, tag = self._set_tag(paddr)
        s[tag] = payload
        s.move_to_end(tag)
        if len(s) > CACHE_WAYS:
            s.popitem(last=False)

    def read_byte(self, paddr):
        """Payload byte if the line is resident, else None."""
        s, tag = self._set_tag(paddr)
        line = s.get(tag)
        if line is None:
            return None
        return line[paddr & (LINE_SIZE - 1)]

    def probe_latency(self, paddr):
        s, tag = self._set_tag(paddr)
        return self.hit_latency if tag in s else self.miss_latency

    def flush_line(self, paddr):
        s, tag = self._set_tag(paddr)
        s.pop(tag, None)

    def clear(self):
        for s in self.sets:
            s.clear()


class SpecBuffer:
    """InvisiSpec-style speculative fill buffer keyed by line address."""

    __slots__ = ("lines", "owners")

    def __init__(self):
        self.lines = {}
        self.owners = {}

    def holds(self, paddr):
        return (paddr >> LINE_SHIFT) in self.lines

    def fill(self, paddr, phys, uid):
        line = paddr >> LINE_SHIFT
        if line not in self.lines:
            self.lines[line] = phys.read_line(line)
        self.owners.setdefault(uid, []).append(line)

    def commit(self, uid, cache):
        for line in self.owners.pop(uid, ()):
            payload = self.lines.pop(line, None)
            if payload is not None:
                cache.install(line << LINE_SHIFT, payload)

    def drop(self, uid):
        for line in self.owners.pop(uid, ()):
            self.lines.pop(line, None)

    def clear(self):
        self.lines.clear()
        self.owners.clear()


# ---------------------------------------------------------------------------
# predictors (one set per physical core)
# ---------------------------------------------------------------------------

def pht_index(vaddr, bhb):
    return ((vaddr & 0xFFF) ^ ((bhb & 0xFF) << 2)) & ((1 << PHT_BITS) - 1)


class Predictors:
    __slots__ = ("pht", "bhb", "bhb_per_core", "btb", "rsb", "stl",
                 "btb_tag", "rsb_fallback", "rsb_flush_on_aspace", "bhb_shared")

    def __init__(self, btb_tag="partial", rsb_fallback="btb",
                 rsb_flush_on_aspace=False, bhb_shared=True):
        self.pht = {}
        self.bhb = 0
        self.bhb_per_core = {}
        self.btb = {}
        self.rsb = []
        self.stl = {}
        self.btb_tag = btb_tag
        self.rsb_fallback = rsb_fallback
        self.rsb_flush_on_aspace = rsb_flush_on_aspace
        self.bhb_shared = bhb_shared

    # -- BHB ---------------------------------------------------------------
    def bhb_value(self, lcore=0):
        if self.bhb_shared:
            return self.bhb
        return self.bhb_per_core.get(lcore, 0)

    def note_branch_outcome(self, taken, lcore=0):
        if self.bhb_shared:
            self.bhb = ((self.bhb << 1) | (1 if taken else 0)) & 0xFF
        else:
            v = self.bhb_per_core.get(lcore, 0)
            self.bhb_per_core[lcore] = ((v << 1) | (1 if taken else 0)) & 0xFF

    # -- PHT ---------------------------------------------------------------
    def pht_predict(self, vaddr, bhb):
        return self.pht.get(pht_index(vaddr, bhb), PHT_INIT) >= 2

    def pht_update(self, vaddr, bhb, taken):
        idx = pht_index(vaddr, bhb)
        c = self.pht.get(idx, PHT_INIT)
        self.pht[idx] = min(3, c + 1) if taken else max(0, c - 1)

    # -- BTB ---------------------------------------------------------------
    def _btb_key(self, vaddr):
        idx = (vaddr >> 2) & (BTB_ENTRIES - 1)
        if self.btb_tag == "full":
            tag = vaddr
        else:
            tag = (vaddr >> 11) & ((1 << BTB_PARTIAL_BITS) - 1)
        return idx, tag

    def btb_predict(self, vaddr, priv="user", lcore=0, ibrs=False, stibp=False):
        idx, tag = self._btb_key(vaddr)
        e = self.btb.get(idx)
        if e is None or e[0] != tag:
            return None
        if ibrs and priv == "supervisor" and e[2] == "user":
            return None
        if stibp and e[3] != lcore:
            return None
        return e[1]

    def btb_update(self, vaddr, target, priv="user", lcore=0):
        idx, tag = self._btb_key(vaddr)
        self.btb[idx] = (tag, target, priv, lcore)

    def btb_clear(self):
        self.btb.clear()

    # -- RSB ---------------------------------------------------------------
    def rsb_push(self, target):
        self.rsb.append(target)
        if len(self.rsb) > RSB_DEPTH:
            self.rsb.pop(0)

    def rsb_pop(self, ret_vaddr=None, priv="user", lcore=0, ibrs=False, stibp=False):
        """Returns (target_or_None, source) with source in rsb|btb|none."""
        if self.rsb:
            return self.rsb.pop(), "rsb"
        if self.rsb_fallback == "btb" and ret_vaddr is not None:
            t = self.btb_predict(ret_vaddr, priv, lcore, ibrs, stibp)
            if t is not None:
                return t, "btb"
        return None, "none"

    def rsb_stuff(self, benign_target):
        self.rsb = [benign_target] * RSB_DEPTH

    def rsb_clear(self):
        self.rsb = []

    # -- STL ---------------------------------------------------------------
    def stl_predict(self, site, ssbd=False):
        if ssbd:
            return "wait"
        return "bypass" if self.stl.get(site, 0) >= STL_THRESHOLD else "wait"

    def stl_resolve(self, site, aliased):
        if aliased:
            self.stl[site] = 0
        else:
            self.stl[site] = min(STL_MAX, self.stl.get(site, 0) + 1)


# ---------------------------------------------------------------------------
# architectural state
# ---------------------------------------------------------------------------

class ArchState:
    __slots__ = ("gpr", "pc", "mode", "pkru", "msrs", "fpu", "fpu_available",
                 "mem", "ptid", "pending_exception")

    def __init__(self, mem=None, ptid="identity", mode="user"):
        self.gpr = [0] * 16
        self.pc = 0
        self.mode = mode
        self.pkru = 0
        self.msrs = {}
        self.fpu = [0] * 8
        self.fpu_available = True
        self.mem = mem if mem is not None else PhysMem()
        self.ptid = ptid
        self.pending_exception = None

    def clone(self, clone_mem=True):
        s = ArchState(self.mem.copy() if clone_mem else self.mem, self.ptid, self.mode)
        s.gpr = list(self.gpr)
        s.pc = self.pc
        s.pkru = self.pkru
        s.msrs = dict(self.msrs)
        s.fpu = list(self.fpu)
        s.fpu_available = self.fpu_available
        s.pending_exception = self.pending_exception
        return s

    def equal(self, other):
        return (
            self.gpr == other.gpr
            and self.pc == other.pc
            and self.mode == other.mode
            and self.pkru == other.pkru
            and self.msrs == other.msrs
            and self.fpu == other.fpu
            and self.fpu_available == other.fpu_available
            and self.ptid == other.ptid
            and self.mem.equal(other.mem)
        )


class ArchParams:
    """Model facts visible at the architectural level."""

    __slots__ = ("features", "smap", "de_faults", "eager_fpu", "kpti", "pte_sanitize")

    def __init__(self, features=frozenset(), smap=True, de_faults=True,
                 eager_fpu=False, kpti=False, pte_sanitize=False):
        self.features = features
        self.smap = smap
        self.de_faults = de_faults
        self.eager_fpu = eager_fpu
        self.kpti = kpti
        self.pte_sanitize = pte_sanitize


# ---------------------------------------------------------------------------
# machine: everything one physical core owns
# ---------------------------------------------------------------------------

class Machine:
    __slots__ = ("phys", "tables", "tlb", "cache", "specbuf", "pred", "params",
                 "ssbd", "invisispec", "taint_tracking", "ibrs", "stibp",
                 "ibpb_on_switch", "rsb_stuffing", "rsb_stuff_target",
                 "l1_flush_on_switch", "current_ptid", "sink")

    def __init__(self, phys=None, params=None, pred=None):
        self.phys = phys if phys is not None else PhysMem()
        self.tables = {}
        self.tlb = Tlb()
        self.cache = Cache()
        self.specbuf = SpecBuffer()
        self.pred = pred if pred is not None else Predictors()
        self.params = params if params is not None else ArchParams()
        self.ssbd = False
        self.invisispec = False
        self.taint_tracking = False
        self.ibrs = False
        self.stibp = False
        self.ibpb_on_switch = False
        self.rsb_stuffing = False
        self.rsb_stuff_target = 0
        self.l1_flush_on_switch = False
        self.current_ptid = None
        self.sink = None

    def add_table(self, space):
        self.tables[space.name] = space

    def _emit(self, cycle, kind, payload):
        if self.sink is not None:
            self.sink.append((cycle, kind, payload))

    def translate(self, vaddr, access, mode, pkru, ptid,
                  use_tlb=True, cycle=0):
        """Permission-ordered translation: P/RSVD (terminal) -> US -> SMAP ->
        R/W -> XD -> PK. Non-terminal faults still compute paddr; the TLB is
        filled on miss even for permission faults (terminal faults excepted)."""
        if ptid == "identity":
            return TranslationResult(True, paddr=vaddr)
        table = self.tables.get(ptid)
        if table is None:
            raise UnknownPageTable(ptid)
        vpage = vaddr >> PAGE_SHIFT
        entry = None
        if use_tlb:
            entry = self.tlb.lookup(ptid, vpage)
        walked = False
        if entry is None:
            entry = table.entry(vaddr)
            walked = True
        kpti_hidden = (self.params.kpti and mode == "user" and entry is not None
                       and not entry.user)
        if entry is None or kpti_hidden:
            # unmapped (or kpti-hidden) page: sanitized non-present, frame 0
            return TranslationResult(False, detail=D_P, terminal=True, leaked_frame=0)
        if not entry.present or entry.reserved:
            leaked = 0 if (self.params.pte_sanitize and not entry.present) else entry.frame
            detail = D_RSVD if (entry.present and entry.reserved) else D_P
            return TranslationResult(False, detail=detail, terminal=True, leaked_frame=leaked)
        if use_tlb and walked:
            self.tlb.fill(ptid, vpage, entry)
            self._emit(cycle, "tlbfill", (ptid, vpage))
        paddr = (entry.frame << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1))
        if mode == "user" and not entry.user:
            return TranslationResult(False, paddr=paddr, detail=D_US)
        if mode == "supervisor" and entry.user and self.params.smap and access != "execute":
            return TranslationResult(False, paddr=paddr, detail=D_SMAP)
        if access == "write" and not entry.writable:
            return TranslationResult(False, paddr=paddr, detail=D_RW)
        if access == "execute" and entry.nx:
            return TranslationResult(False, paddr=paddr, detail=D_XD)
        if access in ("read", "write") and mode == "user":
            ad = (pkru >> (2 * entry.pkey)) & 1
            wd = (pkru >> (2 * entry.pkey + 1)) & 1
            if ad or (wd and access == "write"):
                return TranslationResult(False, paddr=paddr, detail=D_PK)
        return TranslationResult(True, paddr=paddr)

    # -- harness-level covert channel primitives ---------------------------
    def flush_line(self, vaddr, ptid):
        """clflush: drops the matching line; permitted from any mode, no-op
        for unmapped addresses, never touches the TLB."""
        if ptid == "identity":
            self.cache.flush_line(vaddr)
            return
        table = self.tables.get(ptid)
        if table is None:
            raise UnknownPageTable(ptid)
        entry = table.entry(vaddr)
        if entry is None or not entry.present:
            return
        self.cache.flush_line((entry.frame << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1)))

    def probe(self, vaddr, ptid, mode="user", pkru=0):
        """Timed architectural read used by the reconstruction phase; reports
        latency without perturbing cache, TLB, or fill counts."""
        tr = self.translate(vaddr, "read", mode, pkru, ptid, use_tlb=False)
        if not tr.ok:
            raise MemoryFault(ExceptionRecord(K_PF, tr.detail))
        return self.cache.probe_latency(tr.paddr)

    def warm_line(self, vaddr, ptid, mode="supervisor", pkru=0):
        """Architectural touch that fills the cache line (victim-side use)."""
        tr = self.translate(vaddr, "read", mode, pkru, ptid, use_tlb=False)
        if not tr.ok:
            raise MemoryFault(ExceptionRecord(K_PF, tr.detail))
        self.cache.access(tr.paddr, self.phys, fill=True)

    def context_switch(self, new_ptid=None):
        """Domain-switch hooks shared by the ctxsw instruction and the
        scenario runner's between-program transitions."""
        aspace_changed = new_ptid is not None and new_ptid != self.current_ptid
        if self.ibpb_on_switch:
            self.pred.btb_clear()
        if self.rsb_stuffing:
            self.pred.rsb_stuff(self.rsb_stuff_target)
        elif aspace_changed and self.pred.rsb_flush_on_aspace:
            self.pred.rsb_clear()
        if self.l1_flush_on_switch:
            self.cache.clear()
            self.specbuf.clear()
        if new_ptid is not None:
            self.current_ptid = new_ptid


def classify_fault(record, forward_map):
    """Map an exception to its transient policy. Traps and aborts never
    forward; faults consult the model's forward-on-fault table."""
    if record.cls != "fault":
        return FWD_NONE
    key = record.fault_key
    if key not in forward_map:
        raise ConfigError(f"forward-on-fault map lacks entry for {key}")
    return forward_map[key]


def effective_forward_map(forward_map, rdcl_no):
    missing = [k for k in FAULT_KEYS if k not in forward_map]
    if missing:
        raise ConfigError(f"forward-on-fault map incomplete: missing {missing}")
    if not rdcl_no:
        return dict(forward_map)
    out = dict(forward_map)
    for k in forward_map:
        if k.startswith("PF-"):
            out[k] = FWD_ZERO
    return out


# ---------------------------------------------------------------------------
# reference interpreter: in-order, committed-state-only
# ---------------------------------------------------------------------------

def _ea(ops_mem, gpr):
    v = ops_mem.disp
    if ops_mem.base is not None:
        v += gpr[ops_mem.base]
    if ops_mem.index is not None:
        v += gpr[ops_mem.index] * ops_mem.scale
    return v & U64


def _src(op, gpr):
    # Reg or Imm
    return gpr[op.n] & U64 if type(op).__name__ == "Reg" else op.v & U64


def run_reference(program, init, machine, trap_policy="terminate-on-exception",
                  step_budget=20000):
    """Architectural oracle: strictly in order, zero speculation. A faulting
    instruction has no architectural effect. Returns (final state, trace)."""
    st = init
    params = machine.params
    trace = []
    instrs = program.instructions
    n = len(instrs)
    st.pc = program.entry
    steps = 0

    def mem_fault_check(ea, size):
        if ea >= VA_LIMIT:
            return ExceptionRecord(K_SS)
        if size == 8 and ea % 8 != 0:
            return ExceptionRecord(K_AC)
        return None

    while True:
        steps += 1
        if steps > step_budget:
            raise StepBudgetExceeded(f"reference exceeded {step_budget} steps")
        pc = st.pc
        if pc < 0 or pc >= n:
            break
        ins = instrs[pc]
        exc = None
        next_pc = pc + 1

        if program.check_fetch:
            tr = machine.translate(ins.vaddr, "execute", st.mode, st.pkru,
                                   st.ptid, use_tlb=False)
            if not tr.ok:
                exc = ExceptionRecord(K_PF, tr.detail, pc)

        m = ins.mnemonic
        if exc is not None:
            pass
        elif m == "halt":
            st.pc = pc
            return st, trace
        elif m in ("nop", "fence"):
            pass
        elif m == "mov":
            st.gpr[ins.ops[0].n] = _src(ins.ops[1], st.gpr)
        elif m in ("add", "sub", "mul", "and", "or", "xor", "shl", "shr",
                   "cmpeq", "cmpne", "cmpltu", "cmpgeu", "div"):
            a = st.gpr[ins.ops[1].n] & U64
            b = _src(ins.ops[2], st.gpr)
            if m == "div":
                if b == 0:
                    if params.de_faults:
                        exc = ExceptionRecord(K_DE, idx=pc)
                    else:
                        st.gpr[ins.ops[0].n] = 0
                else:
                    st.gpr[ins.ops[0].n] = a // b
            else:
                st.gpr[ins.ops[0].n] = _alu(m, a, b)
        elif m in ("cmovz", "cmovnz"):
            c = st.gpr[ins.ops[2].n] & U64
            if (c == 0) == (m == "cmovz"):
                st.gpr[ins.ops[0].n] = _src(ins.ops[1], st.gpr)
        elif m == "lea":
            st.gpr[ins.ops[0].n] = _ea(ins.ops[1], st.gpr)
        elif m in ("load", "loadb"):
            size = 8 if m == "load" else 1
            ea = _ea(ins.ops[1], st.gpr)
            exc = mem_fault_check(ea, size)
            if exc is None:
                tr = machine.translate(ea, "read", st.mode, st.pkru, st.ptid,
                                       use_tlb=False)
                if not tr.ok:
                    exc = ExceptionRecord(K_PF, tr.detail, pc)
                else:
                    st.gpr[ins.ops[0].n] = st.mem.read(tr.paddr, size)
        elif m in ("store", "storeb"):
            size = 8 if m == "store" else 1
            ea = _ea(ins.ops[0], st.gpr)
            exc = mem_fault_check(ea, size)
            if exc is None:
                tr = machine.translate(ea, "write", st.mode, st.pkru, st.ptid,
                                       use_tlb=False)
                if not tr.ok:
                    exc = ExceptionRecord(K_PF, tr.detail, pc)
                else:
                    st.mem.write(tr.paddr, size, st.gpr[ins.ops[1].n] & U64)
        elif m == "flush":
            pass  # microarchitectural only
        elif m == "jmp":
            next_pc = ins.ops[0].v
        elif m in ("bz", "bnz"):
            c = st.gpr[ins.ops[0].n] & U64
            taken = (c == 0) if m == "bz" else (c != 0)
            if taken:
                next_pc = ins.ops[1].v
        elif m in ("jmpi",):
            next_pc = st.gpr[ins.ops[0].n] & U64
        elif m in ("call", "calli"):
            sp = (st.gpr[14] - 8) & U64
            exc = mem_fault_check(sp, 8)
            if exc is None:
                tr = machine.translate(sp, "write", st.mode, st.pkru, st.ptid,
                                       use_tlb=False)
                if not tr.ok:
                    exc = ExceptionRecord(K_PF, tr.detail, pc)
                else:
                    st.mem.write(tr.paddr, 8, pc + 1)
                    st.gpr[14] = sp
                    next_pc = ins.ops[0].v if m == "call" else st.gpr[ins.ops[0].n] & U64
        elif m == "ret":
            sp = st.gpr[14] & U64
            exc = mem_fault_check(sp, 8)
            if exc is None:
                tr = machine.translate(sp, "read", st.mode, st.pkru, st.ptid,
                                       use_tlb=False)
                if not tr.ok:
                    exc = ExceptionRecord(K_PF, tr.detail, pc)
                else:
                    next_pc = st.mem.read(tr.paddr, 8)
                    st.gpr[14] = (sp + 8) & U64
        elif m == "bound":
            if "bound" not in params.features:
                exc = ExceptionRecord(K_UD, idx=pc)
            else:
                v = st.gpr[ins.ops[0].n] & U64
                if v < ins.ops[1].v or v > ins.ops[2].v:
                    exc = ExceptionRecord(K_BR, idx=pc)
        elif m in ("bndcl", "bndcu"):
            if "mpx" not in params.features:
                exc = ExceptionRecord(K_UD, idx=pc)
            else:
                v = st.gpr[ins.ops[0].n] & U64
                bad = v < ins.ops[1].v if m == "bndcl" else v > ins.ops[1].v
                if bad:
                    exc = ExceptionRecord(K_BR, idx=pc)
        elif m == "rdmsr":
            if st.mode != "supervisor":
                exc = ExceptionRecord(K_GP, idx=pc)
            else:
                st.gpr[ins.ops[0].n] = st.msrs.get(_src(ins.ops[1], st.gpr), 0)
        elif m == "wrpkru":
            st.pkru = st.gpr[ins.ops[0].n] & 0xFFFFFFFF
        elif m == "fmov":
            if not st.fpu_available:
                exc = ExceptionRecord(K_NM, idx=pc)
            else:
                dst, src = ins.ops
                if type(dst).__name__ == "FReg":
                    st.fpu[dst.n] = st.gpr[src.n] & U64
                else:
                    st.gpr[dst.n] = st.fpu[src.n] & U64
        elif m == "ud2":
            exc = ExceptionRecord(K_UD, idx=pc)
        elif m == "ctxsw":
            ctx = ins.ops[0]
            st.mode = ctx.mode
            if ctx.pt is not None:
                if ctx.pt not in machine.tables and ctx.pt != "identity":
                    raise UnknownPageTable(ctx.pt)
                st.ptid = ctx.pt
            if ctx.lazy_fpu:
                if params.eager_fpu:
                    st.fpu = [0] * 8
                else:
                    st.fpu_available = False
        else:
            raise SimError(f"unhandled mnemonic {m}")

        if exc is not None:
            exc.idx = pc
            trace.append(exc)
            if trap_policy == "terminate-on-exception":
                st.pending_exception = exc
                st.pc = pc
                return st, trace
            st.pc = pc + 1
            continue
        st.pc = next_pc
    # fell off the end or jumped out of range
    return st, trace


def _alu(m, a, b):
    if m == "add":
        return (a + b) & U64
    if m == "sub":
        return (a - b) & U64
    if m == "mul":
        return (a * b) & U64
    if m == "and":
        return a & b
    if m == "or":
        return a | b
    if m == "xor":
        return a ^ b
    if m == "shl":
        return (a << (b & 63)) & U64
    if m == "shr":
        return a >> (b & 63)
    if m == "cmpeq":
        return 1 if a == b else 0
    if m == "cmpne":
        return 1 if a != b else 0
    if m == "cmpltu":
        return 1 if a < b else 0
    if m == "cmpgeu":
        return 1 if a >= b else 0
    raise SimError(f"bad alu op {m}")


# ---------------------------------------------------------------------------
# out-of-order pipeline
# ---------------------------------------------------------------------------

ST_ISSUED = 0
ST_DONE = 1
ST_SQUASHED = 2

_MEM_LOADS = ("load", "loadb", "ret")
_MEM_STORES = ("store", "storeb", "call", "calli")


class RobEntry:
    __slots__ = (
        "uid", "idx", "ins", "lcore", "status", "exception", "policy",
        "speculative", "spawned_by", "taint_src", "result", "dest", "fdest",
        "deps", "fdeps", "done_at", "retire_at", "agu_done", "ea", "paddr",
        "size", "terminal_frame", "store_val_ready", "store_value",
        "pred_taken", "pred_target", "pred_source", "resolved", "real_target",
        "bhb_snap", "stl_bypassed", "buffered", "accessed", "block_younger",
        "is_load", "is_store", "taken_outcome",
    )

    def __init__(self, uid, idx, ins, lcore):
        self.uid = uid
        self.idx = idx
        self.ins = ins
        self.lcore = lcore
        self.status = ST_ISSUED
        self.exception = None
        self.policy = None
        self.speculative = False
        self.spawned_by = None
        self.taint_src = None
        self.result = None
        self.dest = None
        self.fdest = None
        self.deps = None
        self.fdeps = None
        self.done_at = -1
        self.retire_at = -1
        self.agu_done = False
        self.ea = None
        self.paddr = None
        self.size = 0
        self.terminal_frame = None
        self.store_val_ready = False
        self.store_value = None
        self.pred_taken = None
        self.pred_target = None
        self.pred_source = None
        self.resolved = False
        self.real_target = None
        self.bhb_snap = 0
        self.stl_bypassed = False
        self.buffered = False
        self.accessed = False
        self.block_younger = False
        self.is_load = ins.mnemonic in _MEM_LOADS
        self.is_store = ins.mnemonic in _MEM_STORES
        self.taken_outcome = None


class PipelineConfig:
    __slots__ = ("rob_depth", "forward_on_fault", "rdcl_no", "lfence_blocks_execute",
                 "rsb_stuff_target", "cycle_budget")

    def __init__(self, forward_on_fault, rob_depth=ROB_DEPTH, rdcl_no=False,
                 lfence_blocks_execute=True, rsb_stuff_target=0,
                 cycle_budget=200000):
        self.rob_depth = rob_depth
        self.forward_on_fault = forward_on_fault
        self.rdcl_no = rdcl_no
        self.lfence_blocks_execute = lfence_blocks_execute
        self.rsb_stuff_target = rsb_stuff_target
        self.cycle_budget = cycle_budget


class SimResult:
    __slots__ = ("final", "cycles", "events", "trace", "probes")

    def __init__(self, final, cycles, events, trace):
        self.final = final
        self.cycles = cycles
        self.events = events
        self.trace = trace
        self.probes = []

    def event_lines(self):
        out = []
        for cyc, kind, payload in self.events:
            fields = " ".join(str(p) for p in payload)
            out.append(f"cycle={cyc} event={kind} {fields}".rstrip())
        return out


class _Core:
    __slots__ = ("program", "arch", "trap_policy", "lcore", "rob", "live",
                 "rename", "frename", "fetch_pc", "stall", "halted", "trace",
                 "final_pc")

    def __init__(self, program, arch, trap_policy, lcore):
        self.program = program
        self.arch = arch
        self.trap_policy = trap_policy
        self.lcore = lcore
        self.rob = []
        self.live = {}
        self.rename = {}
        self.frename = {}
        self.fetch_pc = program.entry
        self.stall = None  # None | (kind, arg)
        self.halted = False
        self.trace = []
        self.final_pc = None


class Pipeline:
    """Cycle-stepped out-of-order engine over a shared Machine."""

    def __init__(self, machine, config):
        self.machine = machine
        self.config = config
        self.fmap = effective_forward_map(config.forward_on_fault, config.rdcl_no)
        self.cycle = 0
        self.uid = 0
        self.events = []
        machine.sink = self.events

    # -- operand helpers ----------------------------------------------------
    def _reg_state(self, core, e, reg):
        """Returns (ready, value, taint_active) for a gpr source."""
        uid = e.deps.get(reg) if e.deps else None
        if uid is None:
            return True, core.arch.gpr[reg] & U64, False
        prod = core.live.get(uid)
        if prod is None:
            return True, core.arch.gpr[reg] & U64, False
        if prod.status != ST_DONE or prod.done_at >= self.cycle:
            return False, 0, False
        if prod.result is None:
            return False, 0, False  # poisoned: no-transient-continuation
        return True, prod.result & U64, self._taint_active(core, prod)

    def _freg_state(self, core, e, reg):
        uid = e.fdeps.get(reg) if e.fdeps else None
        if uid is None:
            return True, core.arch.fpu[reg] & U64, False
        prod = core.live.get(uid)
        if prod is None:
            return True, core.arch.fpu[reg] & U64, False
        if prod.status != ST_DONE or prod.done_at >= self.cycle or prod.result is None:
            return False, 0, False
        return True, prod.result & U64, self._taint_active(core, prod)

    def _taint_active(self, core, prod):
        if not self.machine.taint_tracking or prod.taint_src is None:
            return False
        cause = core.live.get(prod.taint_src)
        if cause is None:
            return False  # cause retired (resolved correct) or squashed with us
        return not cause.resolved

    def _shadow(self, core, pos, include_faults):
        """uid of the youngest older unresolved speculation source, if any."""
        rob = core.rob
        for i in range(pos - 1, -1, -1):
            e = rob[i]
            m = e.ins.mnemonic
            if m in ("bz", "bnz", "jmpi", "calli", "ret") and not e.resolved:
                return e.uid
            if e.stl_bypassed and not e.resolved:
                return e.uid
            if include_faults and e.exception is not None:
                return e.uid
        return None

    # -- fetch ---------------------------------------------------------------
    def _fetch(self, core):
        if core.halted or core.stall is not None:
            return
        if len(core.rob) >= self.config.rob_depth:
            return
        pc = core.fetch_pc
        program = core.program
        n = len(program.instructions)
        if pc == n:
            core.stall = ("end", n)
            return
        if pc < 0 or pc > n:
            core.stall = ("oor", pc)
            return
        ins = program.instructions[pc]
        self.uid += 1
        e = RobEntry(self.uid, pc, ins, core.lcore)

        if program.check_fetch:
            tr = self.machine.translate(ins.vaddr, "execute", core.arch.mode,
                                        core.arch.pkru, core.arch.ptid,
                                        use_tlb=True, cycle=self.cycle)
            if not tr.ok:
                e.exception = ExceptionRecord(K_PF, tr.detail, pc)
                e.policy = FWD_NONE
                e.status = ST_DONE
                e.done_at = self.cycle
                e.retire_at = self.cycle + FAULT_LATENCY
                e.block_younger = True
                core.rob.append(e)
                core.live[e.uid] = e
                core.stall = ("fault", e.uid)
                self.events.append((self.cycle, "fetchfault", (pc, tr.detail)))
                return

        m = ins.mnemonic
        pred = self.machine.pred
        arch = core.arch

        # capture source dependencies from the rename maps
        deps = {}
        fdeps = {}

        def need(reg):
            uid = core.rename.get(reg)
            if uid is not None:
                deps[reg] = uid

        def fneed(reg):
            uid = core.frename.get(reg)
            if uid is not None:
                fdeps[reg] = uid

        ops = ins.ops
        if m == "mov":
            if type(ops[1]).__name__ == "Reg":
                need(ops[1].n)
        elif m in ("add", "sub", "mul", "and", "or", "xor", "shl", "shr",
                   "cmpeq", "cmpne", "cmpltu", "cmpgeu", "div"):
            need(ops[1].n)
            if type(ops[2]).__name__ == "Reg":
                need(ops[2].n)
        elif m in ("cmovz", "cmovnz"):
            need(ops[0].n)
            if type(ops[1]).__name__ == "Reg":
                need(ops[1].n)
            need(ops[2].n)
        elif m in ("lea", "load", "loadb", "flush"):
            mem = ops[1] if m in ("lea", "load", "loadb") else ops[0]
            if mem.base is not None:
                need(mem.base)
            if mem.index is not None:
                need(mem.index)
        elif m in ("store", "storeb"):
            mem = ops[0]
            if mem.base is not None:
                need(mem.base)
            if mem.index is not None:
                need(mem.index)
            need(ops[1].n)
        elif m in ("bz", "bnz", "jmpi", "wrpkru"):
            need(ops[0].n)
        elif m == "calli":
            need(ops[0].n)
            need(14)
        elif m in ("call", "ret"):
            need(14)
        elif m in ("bound", "bndcl", "bndcu"):
            need(ops[0].n)
        elif m == "rdmsr":
            if type(ops[1]).__name__ == "Reg":
                need(ops[1].n)
        elif m == "fmov":
            dst, src = ops
            if type(dst).__name__ == "FReg":
                need(src.n)
            else:
                fneed(src.n)
        e.deps = deps if deps else None
        e.fdeps = fdeps if fdeps else None

        # speculation bookkeeping (dispatch-time snapshot)
        e.spawned_by = self._shadow(core, len(core.rob), True)
        e.speculative = e.spawned_by is not None

        # control flow steering and stalls
        next_pc = pc + 1
        if m == "jmp":
            next_pc = ops[0].v
        elif m in ("bz", "bnz"):
            e.bhb_snap = pred.bhb_value(core.lcore)
            e.pred_taken = pred.pht_predict(ins.vaddr, e.bhb_snap)
            next_pc = ops[1].v if e.pred_taken else pc + 1
        elif m == "call":
            pred.rsb_push(pc + 1)
            next_pc = ops[0].v
        elif m == "calli":
            pred.rsb_push(pc + 1)
            t = pred.btb_predict(ins.vaddr, arch.mode, core.lcore,
                                 self.machine.ibrs, self.machine.stibp)
            if t is not None and 0 <= t < n:
                e.pred_target = t
                next_pc = t
            else:
                core.stall = ("control", e.uid)
        elif m == "jmpi":
            t = pred.btb_predict(ins.vaddr, arch.mode, core.lcore,
                                 self.machine.ibrs, self.machine.stibp)
            if t is not None and 0 <= t < n:
                e.pred_target = t
                next_pc = t
            else:
                core.stall = ("control", e.uid)
        elif m == "ret":
            t, source = pred.rsb_pop(ins.vaddr, arch.mode, core.lcore,
                                     self.machine.ibrs, self.machine.stibp)
            e.pred_source = source
            if t is not None and 0 <= t < n:
                e.pred_target = t
                next_pc = t
            else:
                core.stall = ("control", e.uid)
        elif m in ("ud2", "halt", "ctxsw", "wrpkru"):
            core.stall = ("drain", e.uid)

        # destination renaming
        if m in ("mov", "add", "sub", "mul", "and", "or", "xor", "shl", "shr",
                 "cmpeq", "cmpne", "cmpltu", "cmpgeu", "div", "cmovz", "cmovnz",
                 "lea", "load", "loadb", "rdmsr"):
            e.dest = ops[0].n
            core.rename[e.dest] = e.uid
        elif m in ("call", "calli", "ret"):
            e.dest = 14
            core.rename[14] = e.uid
        elif m == "fmov":
            dst = ops[0]
            if type(dst).__name__ == "FReg":
                e.fdest = dst.n
                core.frename[dst.n] = e.uid
            else:
                e.dest = dst.n
                core.rename[dst.n] = e.uid

        if core.stall is None:
            core.fetch_pc = next_pc
        else:
            core.fetch_pc = next_pc  # used after drain-stalls clear
        core.rob.append(e)
        core.live[e.uid] = e

    # -- squash ---------------------------------------------------------------
    def _squash_from(self, core, start, trigger_uid):
        killed = core.rob[start:]
        if not killed:
            return
        uids = []
        for e in killed:
            e.status = ST_SQUASHED
            uids.append(e.uid)
            core.live.pop(e.uid, None)
            self.machine.specbuf.drop(e.uid)
        del core.rob[start:]
        core.rename = {}
        core.frename = {}
        for e in core.rob:
            if e.dest is not None:
                core.rename[e.dest] = e.uid
            if e.fdest is not None:
                core.frename[e.fdest] = e.uid
        if core.stall is not None and len(core.stall) > 1 and core.stall[1] in uids:
            core.stall = None
        if core.stall is not None and core.stall[0] in ("end", "oor"):
            core.stall = None
        self.events.append((self.cycle, "squash", (trigger_uid, tuple(uids))))

    # -- execute ---------------------------------------------------------------
    def _execute(self, core):
        rob = core.rob
        machine = self.machine
        fence_active = False
        pos = 0
        while pos < len(rob):
            e = rob[pos]
            if e.status == ST_DONE:
                if e.ins.mnemonic == "fence" and self.config.lfence_blocks_execute:
                    fence_active = True
                if e.exception is not None and e.block_younger:
                    return
                pos += 1
                continue
            progressed_squash = self._try_execute(core, e, pos, fence_active)
            if progressed_squash:
                # a squash truncated the ROB at/after pos: stop the scan
                return
            if e.status == ST_DONE and e.exception is not None and e.block_younger:
                return
            if e.ins.mnemonic == "fence" and e.status == ST_DONE \
                    and self.config.lfence_blocks_execute:
                fence_active = True
            pos += 1

    def _fault(self, e, record, policy_override=None):
        e.exception = record
        e.policy = policy_override if policy_override is not None \
            else classify_fault(record, self.fmap)
        e.status = ST_DONE
        e.done_at = self.cycle + 1
        e.retire_at = self.cycle + FAULT_LATENCY
        e.result = None
        if e.policy == FWD_NONE:
            # data never reaches transient execution; for result-less faults
            # this also parks every younger micro-op until the fault resolves
            if not (e.is_load or e.ins.mnemonic in ("rdmsr", "fmov", "div")):
                e.block_younger = True
        self.events.append((self.cycle, "fwd",
                            (e.uid, record.fault_key, e.policy)))

    def _mem_checks(self, e, ea, size, access, core):
        """Pre-translation checks, then translation. Returns paddr or None."""
        if ea >= VA_LIMIT:
            self._fault(e, ExceptionRecord(K_SS, idx=e.idx))
            return None
        if size == 8 and ea % 8 != 0:
            self._fault(e, ExceptionRecord(K_AC, idx=e.idx))
            return None
        tr = self.machine.translate(ea, access, core.arch.mode, core.arch.pkru,
                                    core.arch.ptid, use_tlb=True, cycle=self.cycle)
        if not tr.ok:
            rec = ExceptionRecord(K_PF, tr.detail, e.idx)
            self._fault(e, rec)
            e.terminal_frame = tr.leaked_frame if tr.terminal else None
            e.paddr = tr.paddr
            return None
        return tr.paddr

    def _forwarded_fault_value(self, e):
        """Value a faulting load forwards transiently, per its policy."""
        if e.policy == FWD_ZERO:
            return 0
        if e.policy != FWD_REAL:
            return None
        if e.terminal_frame is not None:
            # L1 terminal-fault path: data forwarded only if the line indexed
            # by the leaked frame is resident
            paddr = (e.terminal_frame << PAGE_SHIFT) | (e.ea & (PAGE_SIZE - 1))
            val = 0
            hit = True
            for i in range(e.size):
                b = self.machine.cache.read_byte(paddr + i)
                if b is None:
                    hit = False
                    break
                val |= b << (8 * i)
            return val if hit else 0
        if e.paddr is None:
            return 0
        return self.machine.phys.read(e.paddr, e.size)

    def _gather_load(self, core, pos, e):
        """Store-to-load forwarding walk. Returns (value, 'ok'|'wait')."""
        rob = core.rob
        val = 0
        site = (core.arch.ptid, e.ins.vaddr)
        used_bypass = False
        for i in range(e.size):
            byte_addr = e.ea + i
            byte = None
            for j in range(pos - 1, -1, -1):
                s = rob[j]
                if not s.is_store:
                    continue
                if not s.agu_done:
                    if s.status == ST_DONE and s.exception is not None:
                        continue  # faulted before AGU (SS/AC): no address
                    # unresolved store address: disambiguator decides
                    if e.stl_bypassed:
                        continue
                    if self.machine.pred.stl_predict(site, self.machine.ssbd) == "bypass":
                        used_bypass = True
                        continue
                    return 0, "wait"
                if s.ea <= byte_addr < s.ea + s.size:
                    if s.exception is not None:
                        if s.policy == FWD_REAL:
                            pass  # faulting store still forwards its data
                        elif s.policy == FWD_ZERO:
                            byte = 0
                            break
                        else:
                            continue  # no forwarding from this store
                    if not s.store_val_ready:
                        return 0, "wait"
                    byte = (s.store_value >> (8 * (byte_addr - s.ea))) & 0xFF
                    break
            if byte is None:
                byte = self.machine.phys.read(e.paddr + i, 1)
            val |= byte << (8 * i)
        if used_bypass:
            e.stl_bypassed = True
        return val, "ok"

    def _store_value_ready(self, core, e):
        m = e.ins.mnemonic
        if m in ("call", "calli"):
            e.store_value = e.idx + 1
            e.store_val_ready = True
            return True
        ready, val, taint = self._reg_state(core, e, e.ins.ops[1].n)
        if not ready:
            return False
        e.store_value = val if m == "store" else val & 0xFF
        # widen storeb value to its single byte
        if m == "storeb":
            e.store_value = val & 0xFF
        e.store_val_ready = True
        return True

    def _resolve_control(self, core, e, pos, real_target):
        """Compare against the prediction, squash on mismatch, steer fetch."""
        n = len(core.program.instructions)
        e.resolved = True
        e.real_target = real_target
        valid = 0 <= real_target < n
        predicted = e.pred_target
        if predicted is None:
            # fetch was stalled on this op: no wrong path was fetched
            if core.stall is not None and len(core.stall) > 1 and core.stall[1] == e.uid:
                core.stall = None
            if valid:
                core.fetch_pc = real_target
            else:
                core.stall = ("oor", real_target)
            return False
        if predicted == real_target:
            return False
        self._squash_from(core, pos + 1, e.uid)
        if valid:
            core.fetch_pc = real_target
            core.stall = None
        else:
            core.stall = ("oor", real_target)
        return True

    def _check_stl_replay(self, core, store_entry, pos):
        """After a store learns its address, verify younger bypassing loads."""
        rob = core.rob
        for j in range(pos + 1, len(rob)):
            ld = rob[j]
            if not ld.is_load or not ld.stl_bypassed or not ld.agu_done:
                continue
            if ld.ea is None:
                continue
            if ld.ea < store_entry.ea + store_entry.size and \
                    store_entry.ea < ld.ea + ld.size:
                site = (core.arch.ptid, ld.ins.vaddr)
                self.machine.pred.stl_resolve(site, True)
                self.events.append((self.cycle, "stlreplay", (ld.uid, ld.idx)))
                self._squash_from(core, j, store_entry.uid)
                core.fetch_pc = ld.idx
                core.stall = None
                return True
        return False

    def _try_execute(self, core, e, pos, fence_active):
        """Advance one entry; returns True if a squash truncated the ROB."""
        m = e.ins.mnemonic
        machine = self.machine
        ops = e.ins.ops
        cycle = self.cycle

        def done(result=None, latency=0):
            e.result = result
            e.status = ST_DONE
            e.done_at = cycle + latency
            e.retire_at = e.done_at
            self.events.append((cycle, "exec", (e.uid, e.idx, m)))

        if m in ("nop", "fence", "halt", "ud2", "ctxsw", "wrpkru"):
            if m == "ud2":
                self._fault(e, ExceptionRecord(K_UD, idx=e.idx))
                return False
            if m == "wrpkru":
                ready, val, _ = self._reg_state(core, e, ops[0].n)
                if not ready:
                    return False
                done(val & 0xFFFFFFFF)
                return False
            done()
            return False

        if m == "mov":
            ready, val, taint = (True, None, False)
            if type(ops[1]).__name__ == "Reg":
                ready, val, taint = self._reg_state(core, e, ops[1].n)
                if not ready:
                    return False
            else:
                val = ops[1].v & U64
            if fence_active:
                return False
            done(val)
            if taint:
                e.taint_src = core.live[e.deps[ops[1].n]].taint_src
            return False

        if m in ("add", "sub", "mul", "and", "or", "xor", "shl", "shr",
                 "cmpeq", "cmpne", "cmpltu", "cmpgeu", "div"):
            r1, a, t1 = self._reg_state(core, e, ops[1].n)
            if not r1:
                return False
            if type(ops[2]).__name__ == "Reg":
                r2, b, t2 = self._reg_state(core, e, ops[2].n)
                if not r2:
                    return False
            else:
                b, t2 = ops[2].v & U64, False
            if fence_active:
                return False
            if m == "div" and b == 0:
                if machine.params.de_faults:
                    self._fault(e, ExceptionRecord(K_DE, idx=e.idx))
                    if e.policy == FWD_REAL or e.policy == FWD_ZERO:
                        e.result = 0  # hardware substitutes zero on both paths
                    return False
                done(0)
            else:
                done(_alu(m, a, b) if m != "div" else a // b)
            if t1 or t2:
                src = None
                if t1:
                    src = core.live[e.deps[ops[1].n]].taint_src
                elif type(ops[2]).__name__ == "Reg":
                    src = core.live[e.deps[ops[2].n]].taint_src
                e.taint_src = src
            return False

        if m in ("cmovz", "cmovnz"):
            r0, old, t0 = self._reg_state(core, e, ops[0].n)
            rc, c, tc = self._reg_state(core, e, ops[2].n)
            if not (r0 and rc):
                return False
            if type(ops[1]).__name__ == "Reg":
                rs, s, ts = self._reg_state(core, e, ops[1].n)
                if not rs:
                    return False
            else:
                s, ts = ops[1].v & U64, False
            if fence_active:
                return False
            take = (c == 0) == (m == "cmovz")
            done(s if take else old)
            if t0 or tc or ts:
                e.taint_src = next(
                    (core.live[e.deps[r]].taint_src for r in e.deps
                     if self._reg_state(core, e, r)[2]), None)
            return False

        if m == "lea":
            mem = ops[1]
            ready, ea = self._addr_ready(core, e, mem)
            if not ready or fence_active:
                return False
            done(ea)
            return False

        if m in ("bz", "bnz"):
            ready, val, _ = self._reg_state(core, e, ops[0].n)
            if not ready:
                return False
            taken = (val == 0) if m == "bz" else (val != 0)
            e.taken_outcome = taken
            e.resolved = True
            done(None)
            real_next = ops[1].v if taken else e.idx + 1
            if e.pred_taken is not None and e.pred_taken != taken:
                self._squash_from(core, pos + 1, e.uid)
                core.fetch_pc = real_next
                core.stall = None
                return True
            return False

        if m == "jmp":
            e.resolved = True
            done(None)
            return False

        if m == "jmpi":
            ready, val, taint = self._reg_state(core, e, ops[0].n)
            if not ready:
                return False
            if taint:
                return False  # tainted value blocked as a transient jump target
            done(None)
            return self._resolve_control(core, e, pos, val)

        if m in ("bound", "bndcl", "bndcu"):
            ready, val, _ = self._reg_state(core, e, ops[0].n)
            if not ready:
                return False
            feature = "bound" if m == "bound" else "mpx"
            if feature not in machine.params.features:
                self._fault(e, ExceptionRecord(K_UD, idx=e.idx))
                return False
            if m == "bound":
                bad = val < ops[1].v or val > ops[2].v
            elif m == "bndcl":
                bad = val < ops[1].v
            else:
                bad = val > ops[1].v
            if bad:
                self._fault(e, ExceptionRecord(K_BR, idx=e.idx))
                # a continuation fault with forward-real lets younger ops run;
                # zero/none park them until the exception retires
                if e.policy != FWD_REAL:
                    e.block_younger = True
                return False
            done(None)
            return False

        if m == "rdmsr":
            if type(ops[1]).__name__ == "Reg":
                ready, msr_id, _ = self._reg_state(core, e, ops[1].n)
                if not ready:
                    return False
            else:
                msr_id = ops[1].v
            if fence_active:
                return False
            if core.arch.mode != "supervisor":
                self._fault(e, ExceptionRecord(K_GP, idx=e.idx))
                if e.policy == FWD_REAL:
                    e.result = core.arch.msrs.get(msr_id, 0)
                elif e.policy == FWD_ZERO:
                    e.result = 0
                return False
            done(core.arch.msrs.get(msr_id, 0))
            return False

        if m == "fmov":
            dst, src = ops
            if fence_active:
                return False
            if not core.arch.fpu_available:
                self._fault(e, ExceptionRecord(K_NM, idx=e.idx))
                if type(dst).__name__ != "FReg":
                    if e.policy == FWD_REAL:
                        _, stale, _ = self._freg_state(core, e, src.n)
                        e.result = stale
                    elif e.policy == FWD_ZERO:
                        e.result = 0
                return False
            if type(dst).__name__ == "FReg":
                ready, val, _ = self._reg_state(core, e, src.n)
            else:
                ready, val, _ = self._freg_state(core, e, src.n)
            if not ready:
                return False
            done(val)
            return False

        if m == "flush":
            ready, ea = self._addr_ready(core, e, ops[0])
            if not ready or fence_active:
                return False
            try:
                machine.flush_line(ea, core.arch.ptid)
            except UnknownPageTable:
                raise
            done(None)
            return False

        # memory micro-ops: loads, stores, call/calli (stack push), ret
        return self._exec_mem(core, e, pos, fence_active)

    def _addr_ready(self, core, e, mem):
        ea = mem.disp
        if mem.base is not None:
            ready, val, taint = self._reg_state(core, e, mem.base)
            if not ready or taint:
                return False, 0
            ea += val
        if mem.index is not None:
            ready, val, taint = self._reg_state(core, e, mem.index)
            if not ready or taint:
                return False, 0
            ea += val * mem.scale
        return True, ea & U64

    def _exec_mem(self, core, e, pos, fence_active):
        m = e.ins.mnemonic
        machine = self.machine
        cycle = self.cycle

        if not e.agu_done:
            if m in ("load", "loadb"):
                mem = e.ins.ops[1]
                e.size = 8 if m == "load" else 1
                access = "read"
            elif m in ("store", "storeb"):
                mem = e.ins.ops[0]
                e.size = 8 if m == "store" else 1
                access = "write"
            elif m in ("call", "calli"):
                ready, sp, taint = self._reg_state(core, e, 14)
                if not ready or taint:
                    return False
                e.size = 8
                e.ea = (sp - 8) & U64
                paddr = self._mem_checks(e, e.ea, 8, "write", core)
                if paddr is None:
                    return False
                e.paddr = paddr
                e.agu_done = True
                self._store_value_ready(core, e)
                mem = None
                access = None
            elif m == "ret":
                ready, sp, taint = self._reg_state(core, e, 14)
                if not ready or taint:
                    return False
                e.size = 8
                e.ea = sp & U64
                paddr = self._mem_checks(e, e.ea, 8, "read", core)
                if paddr is None:
                    return False
                e.paddr = paddr
                e.agu_done = True
                mem = None
                access = None
            if m in ("load", "loadb", "store", "storeb"):
                ready, ea = self._addr_ready(core, e, mem)
                if not ready:
                    return False
                e.ea = ea
                paddr = self._mem_checks(e, ea, e.size, access, core)
                if paddr is None:
                    # faulting loads may still forward a policy value
                    if m in ("load", "loadb"):
                        e.result = self._forwarded_fault_value(e)
                    return False
                e.paddr = paddr
                e.agu_done = True
                if m in ("store", "storeb"):
                    if self._check_stl_replay(core, e, pos):
                        return True

        # store completion: address known, value known; write happens at retire
        if e.is_store:
            if not e.store_val_ready and not self._store_value_ready(core, e):
                return False
            if m == "calli":
                ready, target, taint = self._reg_state(core, e, e.ins.ops[0].n)
                if not ready or taint:
                    return False
                sp_old = None  # r14 result below
                e.result = e.ea  # new r14
                e.status = ST_DONE
                e.done_at = cycle
                e.retire_at = cycle
                self.events.append((cycle, "exec", (e.uid, e.idx, m)))
                return self._resolve_control(core, e, pos, target)
            e.result = e.ea if m == "call" else None
            e.status = ST_DONE
            e.done_at = cycle
            e.retire_at = cycle
            if m == "call":
                e.resolved = True
            self.events.append((cycle, "exec", (e.uid, e.idx, m)))
            return False

        # loads (and ret): execute stage is gated by an older fence
        if fence_active:
            return False
        val, status = self._gather_load(core, pos, e)
        if status == "wait":
            return False
        shadow_ctl = self._shadow(core, pos, False)
        shadow_full = shadow_ctl if shadow_ctl is not None \
            else self._shadow(core, pos, True)
        speculative = shadow_full is not None
        if machine.invisispec and speculative:
            if machine.cache.holds(e.paddr) or machine.specbuf.holds(e.paddr):
                latency = machine.cache.hit_latency
            else:
                machine.specbuf.fill(e.paddr, machine.phys, e.uid)
                e.buffered = True
                latency = machine.cache.miss_latency
                self.events.append((cycle, "buffill", (e.uid, e.paddr >> LINE_SHIFT)))
        else:
            latency, filled = machine.cache.access(e.paddr, machine.phys, fill=True)
            if filled:
                self.events.append((cycle, "fill", (e.paddr >> LINE_SHIFT, e.idx)))
        if machine.taint_tracking and shadow_ctl is not None:
            e.taint_src = shadow_ctl
        e.accessed = True
        e.status = ST_DONE
        e.done_at = cycle + latency
        e.retire_at = e.done_at
        e.result = val
        self.events.append((cycle, "exec", (e.uid, e.idx, e.ins.mnemonic)))
        if e.ins.mnemonic == "ret":
            # target only known once the stack read completes
            e.retire_at = e.done_at
            e.real_target = val
            # resolution happens when the data is available
            e.resolved = False
        return False

    def _resolve_pending_rets(self, core):
        for pos, e in enumerate(core.rob):
            if e.ins.mnemonic == "ret" and e.status == ST_DONE \
                    and not e.resolved and e.done_at < self.cycle:
                if self._resolve_control(core, e, pos, e.result & U64 if e.result is not None else -1):
                    return

    # -- retire ---------------------------------------------------------------
    def _retire(self, core):
        machine = self.machine
        retired = 0
        while core.rob and retired < RETIRE_WIDTH:
            e = core.rob[0]
            if e.status != ST_DONE or e.retire_at >= self.cycle:
                return
            if e.ins.mnemonic in ("jmpi", "calli", "ret") and not e.resolved:
                return
            if e.exception is not None:
                core.trace.append(e.exception)
                self.events.append((self.cycle, "exc",
                                    (e.exception.kind, e.exception.detail, e.idx)))
                core.rob.pop(0)
                core.live.pop(e.uid, None)
                machine.specbuf.drop(e.uid)
                self._squash_from(core, 0, e.uid)
                if core.trap_policy == "terminate-on-exception":
                    core.halted = True
                    core.final_pc = e.idx
                    core.arch.pending_exception = e.exception
                else:
                    core.fetch_pc = e.idx + 1
                    core.stall = None
                return
            self._commit(core, e)
            core.rob.pop(0)
            core.live.pop(e.uid, None)
            retired += 1
            self.events.append((self.cycle, "retire", (e.uid, e.idx)))
            if core.halted:
                return

    def _commit(self, core, e):
        m = e.ins.mnemonic
        arch = core.arch
        machine = self.machine
        pred = machine.pred

        if core.stall is not None and len(core.stall) > 1 and core.stall[1] == e.uid:
            core.stall = None

        if m == "halt":
            core.halted = True
            core.final_pc = e.idx
            return
        if m in ("bz", "bnz"):
            pred.pht_update(e.ins.vaddr, e.bhb_snap, e.taken_outcome)
            pred.note_branch_outcome(e.taken_outcome, core.lcore)
            return
        if m in ("jmpi", "ret", "calli"):
            if e.real_target is not None and 0 <= e.real_target < len(core.program.instructions):
                pred.btb_update(e.ins.vaddr, e.real_target, arch.mode, core.lcore)
        if e.is_store:
            if m in ("call", "calli"):
                arch.gpr[14] = e.ea
            machine.phys.write(e.paddr, e.size, e.store_value & U64)
            machine.cache.access(e.paddr, machine.phys, fill=True)
            self.events.append((self.cycle, "fill", (e.paddr >> LINE_SHIFT, e.idx)))
            return
        if m == "ret":
            arch.gpr[14] = (e.ea + 8) & U64
            return
        if e.is_load:
            arch.gpr[e.dest] = e.result & U64
            if e.buffered:
                machine.specbuf.commit(e.uid, machine.cache)
                self.events.append((self.cycle, "bufcommit", (e.uid,)))
            if e.stl_bypassed:
                pred.stl_resolve((arch.ptid, e.ins.vaddr), False)
            return
        if m == "wrpkru":
            arch.pkru = e.result
            return
        if m == "ctxsw":
            ctx = e.ins.ops[0]
            arch.mode = ctx.mode
            if ctx.pt is not None:
                if ctx.pt not in machine.tables and ctx.pt != "identity":
                    raise UnknownPageTable(ctx.pt)
                arch.ptid = ctx.pt
            if ctx.lazy_fpu:
                if machine.params.eager_fpu:
                    arch.fpu = [0] * 8
                else:
                    arch.fpu_available = False
            machine.context_switch(arch.ptid)
            return
        if m == "fmov" and e.fdest is not None:
            arch.fpu[e.fdest] = e.result & U64
            return
        if e.dest is not None and e.result is not None:
            arch.gpr[e.dest] = e.result & U64


def simulate(program, machine, init, config, trap_policy="terminate-on-exception"):
    """Run one program to completion on the out-of-order engine."""
    results = simulate_cores([(program, init, trap_policy, 0)], machine, config)
    return results[0]


def simulate_smt(specs, machine, config):
    """Two hardware threads with deterministic round-robin stage scheduling.

    specs: list of (program, init_state, trap_policy, lcore).
    """
    return simulate_cores(specs, machine, config)


def simulate_cores(specs, machine, config):
    pipe = Pipeline(machine, config)
    cores = [_Core(p, s, t, l) for (p, s, t, l) in specs]
    if cores and machine.current_ptid is None:
        machine.current_ptid = cores[0].arch.ptid

    while True:
        if all(c.halted for c in cores):
            break
        pipe.cycle += 1
        if pipe.cycle > config.cycle_budget:
            raise StepBudgetExceeded(f"pipeline exceeded {config.cycle_budget} cycles")
        for core in cores:
            if core.halted:
                continue
            pipe._execute(core)
            pipe._resolve_pending_rets(core)
            pipe._retire(core)
            pipe._fetch(core)
            if not core.halted and not core.rob and core.stall is not None \
                    and core.stall[0] in ("end", "oor"):
                core.halted = True
                core.final_pc = core.stall[1]

    machine.sink = None
    out = []
    for core in cores:
        core.arch.pc = core.final_pc if core.final_pc is not None else core.fetch_pc
        out.append(SimResult(core.arch, pipe.cycle, pipe.events, core.trace))
    return out
