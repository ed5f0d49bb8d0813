"""Kernel-facing machinery: physical memory, page tables, TLB, buffers, creds.

Page-table pages are real pages in the simulated physical memory, so a bit
flip landing in one rewrites translations with no extra bookkeeping.  Virtual
reads and writes go through the TLB first; a stale entry keeps pointing at
the old frame until an explicit flush, exactly the property the probing scan
depends on.

The model keeps a dirty index over page-table entries and file-page headers
(maintained from a single write hook on physical memory) so marker scans can
visit only pages that can possibly differ from the marker.  Every candidate
is re-read through the normal translation path before being reported, which
keeps the scan's observable behaviour identical to a full linear sweep.
"""

from __future__ import annotations

import bisect
import random
import struct
from dataclasses import dataclass, field

from .buddy_alloc import Block, BuddyState, OutOfMemoryError
from .dram_model import (
    FLIP_ONE_TO_ZERO,
    FLIP_ZERO_TO_ONE,
    PAGE_SIZE,
    Dram,
    InjectedFlip,
)

PTE_SIZE = 8
PTES_PER_PAGE = PAGE_SIZE // PTE_SIZE
PT_SPAN = PAGE_SIZE * PTES_PER_PAGE  # one table maps 2 MiB

PTE_PRESENT = 1 << 0
PTE_WRITABLE = 1 << 1
PTE_USER = 1 << 2
PTE_PFN_SHIFT = 12

# Probe value written into a captured table: present, writable, user
# (plus the accessed-style bit kernels set), frame number zero.
PROBE_PTE = 0x27

# Eight-byte tag written at offset 0 of every mapped file page.
MARKER = int.from_bytes(b"filemark", "little")

VIDEO_CHUNK_BYTES = 600 * 1024
VIDEO_MAX_CHUNKS = 32
SG_DEFAULT_BYTES = 32 * 1024
SG_MAX_BYTES = 124 * 1024
SG_MAX_OPENS = 1021

VMA_LIMIT = 65536


class OsModelError(Exception):
    pass


class VmaLimitError(OsModelError):
    pass


class DriverLimitError(OsModelError):
    pass


@dataclass(frozen=True)
class PteEntry:
    """A raw 64-bit entry; flag and frame accessors read the live bits.

    Keeping the raw value means encode(decode(v)) == v even for bits the
    model does not interpret.
    """

    raw: int

    @property
    def present(self) -> bool:
        return bool(self.raw & PTE_PRESENT)

    @property
    def writable(self) -> bool:
        return bool(self.raw & PTE_WRITABLE)

    @property
    def user(self) -> bool:
        return bool(self.raw & PTE_USER)

    @property
    def pfn(self) -> int:
        return (self.raw >> PTE_PFN_SHIFT) & ((1 << 40) - 1)

    @classmethod
    def make(
        cls,
        pfn: int,
        *,
        present: bool = True,
        writable: bool = True,
        user: bool = True,
        extra_flags: int = 0,
    ) -> "PteEntry":
        raw = (pfn << PTE_PFN_SHIFT) | extra_flags
        if present:
            raw |= PTE_PRESENT
        if writable:
            raw |= PTE_WRITABLE
        if user:
            raw |= PTE_USER
        return cls(raw)


class PhysicalMemory:
    """Sparse page store; unbacked pages read as zeros.

    A single write hook reports every content change so the owner can keep
    derived indexes current.  Writes with notify=False establish pristine
    baseline content without triggering the hook.
    """

    def __init__(self) -> None:
        self.pages: dict[int, bytearray] = {}
        self.write_hook = None

    def _page(self, pfn: int) -> bytearray:
        page = self.pages.get(pfn)
        if page is None:
            page = bytearray(PAGE_SIZE)
            self.pages[pfn] = page
        return page

    def set_page(self, pfn: int, content: bytes) -> None:
        if len(content) != PAGE_SIZE:
            raise ValueError("page content must be exactly one page")
        self.pages[pfn] = bytearray(content)

    def read(self, addr: int, length: int) -> bytes:
        out = bytearray()
        while length > 0:
            pfn, off = divmod(addr, PAGE_SIZE)
            n = min(length, PAGE_SIZE - off)
            page = self.pages.get(pfn)
            if page is None:
                out += bytes(n)
            else:
                out += page[off : off + n]
            addr += n
            length -= n
        return bytes(out)

    def read_u64(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, 8), "little")

    def write(self, addr: int, data: bytes, *, notify: bool = True) -> None:
        pos = 0
        while pos < len(data):
            pfn, off = divmod(addr + pos, PAGE_SIZE)
            n = min(len(data) - pos, PAGE_SIZE - off)
            self._page(pfn)[off : off + n] = data[pos : pos + n]
            if notify and self.write_hook is not None:
                self.write_hook(pfn, off, off + n)
            pos += n

    def write_u64(self, addr: int, value: int, *, notify: bool = True) -> None:
        self.write(addr, struct.pack("<Q", value), notify=notify)

    def flip_bit(self, addr: int, bit: int, direction: str) -> bool:
        """Apply a disturbance flip; returns False when the cell's pull
        direction matches the stored value already."""
        pfn, off = divmod(addr, PAGE_SIZE)
        page = self.pages.get(pfn)
        current = 0 if page is None else (page[off] >> bit) & 1
        if direction == FLIP_ONE_TO_ZERO:
            if not current:
                return False
            page[off] &= ~(1 << bit)  # type: ignore[index]
        elif direction == FLIP_ZERO_TO_ONE:
            if current:
                return False
            page = self._page(pfn)
            page[off] |= 1 << bit
        else:
            raise ValueError(f"unknown flip direction {direction!r}")
        if self.write_hook is not None:
            self.write_hook(pfn, off, off + 1)
        return True

    def backed_pfns(self) -> list[int]:
        return sorted(self.pages)


class TlbCache:
    """Unbounded virtual-page to frame cache with explicit flush."""

    def __init__(self) -> None:
        self.entries: dict[int, int] = {}
        self.flush_count = 0

    def lookup(self, vpage: int) -> int | None:
        return self.entries.get(vpage)

    def insert(self, vpage: int, pfn: int) -> None:
        self.entries[vpage] = pfn

    def flush(self) -> None:
        self.entries.clear()
        self.flush_count += 1


@dataclass
class TmpFile:
    """A shared file: every mapping of it reuses the same frames."""

    file_id: int
    size: int
    pfns: tuple[int, ...]
    blocks: tuple[Block, ...]


@dataclass
class Vma:
    base: int
    size: int
    file: TmpFile

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass
class PageTablePage:
    pfn: int
    window_base: int
    block: Block


@dataclass
class BufferChunk:
    """One driver reservation; block may be row-padded under mitigation."""

    block: Block
    size: int
    vbase: int | None = None

    def page_count(self) -> int:
        return -(-self.size // PAGE_SIZE)


@dataclass
class DoubleOwnedBuffer:
    """Device memory owned by the kernel yet mappable by the attacker."""

    driver: str
    chunks: list[BufferChunk]
    guard_spans: tuple[tuple[int, int], ...] = ()
    user_mapped: bool = False

    @property
    def total_bytes(self) -> int:
        return sum(c.size for c in self.chunks)

    @property
    def allocated_bytes(self) -> int:
        return sum(c.block.size for c in self.chunks)

    def page_vaddrs(self) -> list[int]:
        if not self.user_mapped:
            raise OsModelError("buffer is not user mapped")
        out = []
        for c in self.chunks:
            assert c.vbase is not None
            out.extend(range(c.vbase, c.vbase + c.page_count() * PAGE_SIZE, PAGE_SIZE))
        return out


@dataclass
class CredPage:
    """Three uids followed by three gids, the kernel's process identity."""

    pid: int
    pfn: int
    offset: int
    uid: int


def cred_pattern(uid: int) -> bytes:
    return struct.pack("<6I", uid, uid, uid, uid, uid, uid)


class OsModel:
    """Wires DRAM, the allocator, and the virtual-memory surface together."""

    def __init__(
        self,
        dram: Dram,
        buddy: BuddyState,
        *,
        kernel_partition: str = "kernel",
        user_partition: str = "user",
        vma_limit: int = VMA_LIMIT,
        map_base: int = 0x2000_0000_0000,
        buffer_base: int = 0x7000_0000_0000,
    ) -> None:
        self.dram = dram
        self.buddy = buddy
        self.kernel_partition = kernel_partition
        self.user_partition = user_partition
        self.vma_limit = vma_limit
        self.map_base = map_base
        self.buffer_base = buffer_base
        self.memory = PhysicalMemory()
        self.memory.write_hook = self._on_phys_write
        self.tlb = TlbCache()
        self.vmas: list[Vma] = []
        self._vma_bases: list[int] = []
        self.files: list[TmpFile] = []
        self.buffers: list[DoubleOwnedBuffer] = []
        self.creds: dict[int, CredPage] = {}
        self.windows: dict[int, PageTablePage] = {}
        self._pt_windows: dict[int, int] = {}  # pt pfn -> window base
        self._file_frames: dict[int, tuple[int, int]] = {}  # pfn -> (file_id, idx)
        self._buffer_pages: dict[int, int] = {}  # vpage -> pfn
        self._pt_templates: dict[tuple[int, int], bytes] = {}
        self._pte_dirty: set[int] = set()  # window page vaddrs
        self._dirty_file_pages: dict[int, set[int]] = {}
        self._next_map_base = map_base
        self._next_buffer_base = buffer_base
        self._markers_written: set[int] = set()

    # -- physical write hook ----------------------------------------------

    def _on_phys_write(self, pfn: int, start: int, end: int) -> None:
        window = self._pt_windows.get(pfn)
        if window is not None:
            for idx in range(start // PTE_SIZE, (end + PTE_SIZE - 1) // PTE_SIZE):
                self._pte_dirty.add(window + idx * PAGE_SIZE)
        frame = self._file_frames.get(pfn)
        if frame is not None and start < 8:
            file_id, idx = frame
            self._dirty_file_pages.setdefault(file_id, set()).add(idx)

    # -- files and mappings -------------------------------------------------

    def create_tmp_file(self, size: int) -> TmpFile:
        if size <= 0 or size % PT_SPAN:
            raise ValueError("file size must be a positive multiple of 2 MiB")
        pages = size // PAGE_SIZE
        blocks = []
        pfns = []
        for _ in range(pages):
            block = self.buddy.allocate(self.user_partition, 0, "tmp_file")
            blocks.append(block)
            pfns.append(block.base // PAGE_SIZE)
        file = TmpFile(len(self.files), size, tuple(pfns), tuple(blocks))
        self.files.append(file)
        for idx, pfn in enumerate(file.pfns):
            self._file_frames[pfn] = (file.file_id, idx)
        return file

    def _pt_template(self, file: TmpFile, page_offset: int) -> bytes:
        key = (file.file_id, page_offset)
        cached = self._pt_templates.get(key)
        if cached is None:
            vals = [
                PteEntry.make(file.pfns[(page_offset + i) % len(file.pfns)]).raw
                for i in range(PTES_PER_PAGE)
            ]
            cached = struct.pack(f"<{PTES_PER_PAGE}Q", *vals)
            self._pt_templates[key] = cached
        return cached

    def _vma_at(self, vaddr: int) -> Vma | None:
        # Bases are appended in strictly ascending order.
        i = bisect.bisect_right(self._vma_bases, vaddr) - 1
        if i >= 0:
            vma = self.vmas[i]
            if vma.base <= vaddr < vma.end:
                return vma
        return None

    def pristine_pte(self, window_base: int, idx: int) -> int:
        vma = self._vma_at(window_base)
        assert vma is not None
        page = (window_base - vma.base) // PAGE_SIZE + idx
        return PteEntry.make(vma.file.pfns[page % len(vma.file.pfns)]).raw

    def mmap_primitive(self, file: TmpFile, *, touch: bool = True) -> list[PageTablePage]:
        """Map the file once at the next slot; touching builds its tables.

        Raises VmaLimitError when the mapping count would reach the limit.
        """
        if len(self.vmas) + 1 >= self.vma_limit:
            raise VmaLimitError(f"mapping limit of {self.vma_limit} reached")
        base = self._next_map_base
        self._next_map_base += file.size
        vma = Vma(base, file.size, file)
        self.vmas.append(vma)
        self._vma_bases.append(vma.base)
        if not touch:
            return []
        new_pts: list[PageTablePage] = []
        for window in range(vma.base, vma.end, PT_SPAN):
            if window in self.windows:
                continue
            block = self.buddy.allocate(self.kernel_partition, 0, "page_table")
            pfn = block.base // PAGE_SIZE
            self.memory.set_page(
                pfn, self._pt_template(file, (window - vma.base) // PAGE_SIZE)
            )
            pt = PageTablePage(pfn, window, block)
            self.windows[window] = pt
            self._pt_windows[pfn] = window
            new_pts.append(pt)
        return new_pts

    def write_markers(self, file: TmpFile) -> None:
        """Stamp the marker into every page header; this is the pristine
        baseline, so the write hook is bypassed."""
        for pfn in file.pfns:
            self.memory.write_u64(pfn * PAGE_SIZE, MARKER, notify=False)
        self._markers_written.add(file.file_id)

    # -- translation --------------------------------------------------------

    def translate(self, vaddr: int, *, use_tlb: bool = True) -> int | None:
        vpage = vaddr & ~(PAGE_SIZE - 1)
        if use_tlb:
            cached = self.tlb.lookup(vpage)
            if cached is not None:
                return cached
        pfn = self._buffer_pages.get(vpage)
        if pfn is None:
            window = vpage & ~(PT_SPAN - 1)
            pt = self.windows.get(window)
            if pt is None:
                return None
            idx = (vpage - window) // PAGE_SIZE
            raw = self.memory.read_u64(pt.pfn * PAGE_SIZE + idx * PTE_SIZE)
            entry = PteEntry(raw)
            if not entry.present:
                # A file-backed access through a non-present entry takes a
                # minor fault; the kernel reinstalls the mapping from the
                # file, healing whatever cleared the bit.
                if self._vma_at(vpage) is None:
                    return None
                raw = self.pristine_pte(window, idx)
                self.memory.write_u64(pt.pfn * PAGE_SIZE + idx * PTE_SIZE, raw)
                entry = PteEntry(raw)
            pfn = entry.pfn
        self.tlb.insert(vpage, pfn)
        return pfn

    def flush_tlb(self) -> None:
        self.tlb.flush()

    def read_virtual(self, vaddr: int, length: int) -> bytes | None:
        end = (vaddr + length - 1) & ~(PAGE_SIZE - 1)
        if end != vaddr & ~(PAGE_SIZE - 1):
            raise ValueError("virtual reads must stay within one page")
        pfn = self.translate(vaddr)
        if pfn is None:
            return None
        return self.memory.read(pfn * PAGE_SIZE + (vaddr & (PAGE_SIZE - 1)), length)

    def read_u64_virtual(self, vaddr: int) -> int | None:
        data = self.read_virtual(vaddr, 8)
        if data is None:
            return None
        return int.from_bytes(data, "little")

    def write_virtual(self, vaddr: int, data: bytes) -> bool:
        end = (vaddr + len(data) - 1) & ~(PAGE_SIZE - 1)
        if end != vaddr & ~(PAGE_SIZE - 1):
            raise ValueError("virtual writes must stay within one page")
        pfn = self.translate(vaddr)
        if pfn is None:
            return False
        self.memory.write(pfn * PAGE_SIZE + (vaddr & (PAGE_SIZE - 1)), data)
        return True

    def write_u64_virtual(self, vaddr: int, value: int) -> bool:
        return self.write_virtual(vaddr, struct.pack("<Q", value))

    # -- marker scan ----------------------------------------------------------

    def iter_nonmarker_pages(self):
        """Mapped pages whose first eight bytes differ from the marker,
        ascending, reads honouring the TLB.

        Only dirty-index candidates are visited; any other page provably
        still translates to a file page with an intact marker header.
        Candidates whose table entry has returned to its pristine value and
        whose file header is intact are dropped from the index.
        """
        cands = set(self._pte_dirty)
        for file_id, dirty in self._dirty_file_pages.items():
            if not dirty:
                continue
            for vma in self.vmas:
                if vma.file.file_id == file_id:
                    cands.update(vma.base + idx * PAGE_SIZE for idx in dirty)
        for vaddr in sorted(cands):
            if self._vma_at(vaddr) is None:
                continue
            value = self.read_u64_virtual(vaddr)
            if value is not None and value != MARKER:
                yield vaddr
            elif vaddr in self._pte_dirty:
                window = vaddr & ~(PT_SPAN - 1)
                idx = (vaddr - window) // PAGE_SIZE
                pt = self.windows.get(window)
                if pt is not None:
                    raw = self.memory.read_u64(pt.pfn * PAGE_SIZE + idx * PTE_SIZE)
                    if raw == self.pristine_pte(window, idx):
                        self._pte_dirty.discard(vaddr)

    def scan_markers(self) -> list[int]:
        return list(self.iter_nonmarker_pages())

    # -- double-owned device buffers -------------------------------------------

    def open_video(self, chunk_count: int = VIDEO_MAX_CHUNKS, *, isolated: bool = False) -> DoubleOwnedBuffer:
        """Reserve video capture chunks: fixed 600 KiB each, at most 32."""
        if chunk_count < 1 or chunk_count > VIDEO_MAX_CHUNKS:
            raise DriverLimitError(
                f"video driver accepts 1..{VIDEO_MAX_CHUNKS} chunks"
            )
        return self._open_chunks("video", chunk_count, VIDEO_CHUNK_BYTES, isolated)

    def open_sg(
        self,
        opens: int,
        reserved_size: int = SG_DEFAULT_BYTES,
        *,
        isolated: bool = False,
    ) -> DoubleOwnedBuffer:
        """Reserve one generic-scsi buffer per open; resizable to 124 KiB."""
        if opens < 1 or opens > SG_MAX_OPENS:
            raise DriverLimitError(f"sg driver accepts 1..{SG_MAX_OPENS} opens")
        if reserved_size <= 0 or reserved_size > SG_MAX_BYTES:
            raise DriverLimitError(
                f"sg reserved size must be within 1..{SG_MAX_BYTES} bytes"
            )
        return self._open_chunks("sg", opens, reserved_size, isolated)

    def _open_chunks(
        self, driver: str, count: int, chunk_bytes: int, isolated: bool
    ) -> DoubleOwnedBuffer:
        owner = f"{driver}_buffer"
        chunks: list[BufferChunk] = []
        guards: list[tuple[int, int]] = []
        for _ in range(count):
            if isolated:
                isolation = self.buddy.allocate_isolated_buffer(
                    self.kernel_partition, chunk_bytes, owner
                )
                chunks.append(BufferChunk(isolation.block, chunk_bytes))
                guards.extend(isolation.guard_spans)
            else:
                pages = -(-chunk_bytes // PAGE_SIZE)
                block = self.buddy.allocate_pages(self.kernel_partition, pages, owner)
                chunks.append(BufferChunk(block, chunk_bytes))
        buffer = DoubleOwnedBuffer(driver, chunks, tuple(guards))
        self.buffers.append(buffer)
        return buffer

    def map_buffer(self, buffer: DoubleOwnedBuffer) -> None:
        """Give the attacker a user mapping of every chunk."""
        for chunk in buffer.chunks:
            base = self._next_buffer_base
            chunk.vbase = base
            pages = chunk.page_count()
            self._next_buffer_base += (pages + 1) * PAGE_SIZE
            for i in range(pages):
                self._buffer_pages[base + i * PAGE_SIZE] = (
                    chunk.block.base // PAGE_SIZE + i
                )
        buffer.user_mapped = True

    # -- creds ------------------------------------------------------------------

    def plant_cred(self, pid: int, uid: int, rng: random.Random) -> CredPage:
        """Place a process's identity record at a random free user page."""
        if pid in self.creds:
            raise OsModelError(f"pid {pid} already has a cred page")
        part = self.buddy.partitions[self.user_partition]
        pages = part.size // PAGE_SIZE
        block = None
        for _ in range(10000):
            base = part.base + rng.randrange(pages) * PAGE_SIZE
            try:
                block = self.buddy.allocate_at(self.user_partition, base, 0, "cred")
                break
            except OutOfMemoryError:
                continue
        if block is None:
            raise OutOfMemoryError("no free page for a cred record")
        offset = rng.randrange(0, PAGE_SIZE - 24 + 1, 4)
        pfn = block.base // PAGE_SIZE
        self.memory.write(pfn * PAGE_SIZE + offset, cred_pattern(uid), notify=False)
        cred = CredPage(pid, pfn, offset, uid)
        self.creds[pid] = cred
        return cred

    def getuid(self, pid: int) -> int:
        cred = self.creds[pid]
        data = self.memory.read(cred.pfn * PAGE_SIZE + cred.offset, 4)
        return struct.unpack("<I", data)[0]

    # -- flips --------------------------------------------------------------------

    def apply_flips(self, flips: list[InjectedFlip]) -> list[InjectedFlip]:
        """Write hammering outcomes into memory; returns those that changed
        a stored bit."""
        applied = []
        for flip in flips:
            if self.memory.flip_bit(flip.addr, flip.bit, flip.direction):
                applied.append(flip)
        return applied

    def pt_pfns(self) -> set[int]:
        return set(self._pt_windows)
