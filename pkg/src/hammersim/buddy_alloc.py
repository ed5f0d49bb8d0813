"""Partitioned buddy page allocator with owner tags and guard-row reservations.

Policy mirrors the usual kernel allocator: allocation takes the smallest
sufficient order and the lowest address within that order, splits return the
lower half, and freeing coalesces eagerly with the buddy (base XOR size).
Partitions are hard walls: no block ever crosses one, and neighbouring
partitions must be separated by at least one full row-index span so rows are
never shared across the divide.

Guard spans reserved by allocate_isolated_buffer belong to neither the free
pool nor any owner; conservation is allocated + free + guard == capacity.
"""

from __future__ import annotations

import random
from bisect import bisect_left, insort
from dataclasses import dataclass

from .dram_model import PAGE_SIZE


class BuddyError(Exception):
    """Base class for allocator errors."""


class OutOfMemoryError(BuddyError):
    pass


class FreeError(BuddyError):
    """Double free, unknown block, or a free that crosses bookkeeping."""


class GuardPlacementError(BuddyError):
    pass


@dataclass(frozen=True)
class Partition:
    """A contiguous physical range managed independently."""

    name: str
    base: int
    size: int

    def __post_init__(self) -> None:
        if self.size <= 0 or self.base < 0:
            raise ValueError("partition must have positive size and base >= 0")
        if self.base % PAGE_SIZE or self.size % PAGE_SIZE:
            raise ValueError("partition bounds must be page aligned")

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass(frozen=True)
class Block:
    """A live allocation; pages need not be a power of two for carve-outs."""

    partition: str
    base: int
    pages: int
    owner: str

    @property
    def size(self) -> int:
        return self.pages * PAGE_SIZE

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass(frozen=True)
class IsolatedAllocation:
    """Buffer block plus the guard spans reserved around it."""

    block: Block
    guard_spans: tuple[tuple[int, int], ...]

    @property
    def guard_bytes(self) -> int:
        return sum(size for _, size in self.guard_spans)


@dataclass(frozen=True)
class BuddyInfoSnapshot:
    """Free-block counts per order for every partition."""

    counts: tuple[tuple[str, tuple[int, ...]], ...]
    max_order: int

    def order_counts(self, partition: str) -> tuple[int, ...]:
        for name, row in self.counts:
            if name == partition:
                return row
        raise KeyError(partition)

    def free_bytes_below(self, partition: str, order: int) -> int:
        row = self.order_counts(partition)
        return sum(n * (PAGE_SIZE << o) for o, n in enumerate(row[:order]))

    def total_free_bytes(self, partition: str) -> int:
        row = self.order_counts(partition)
        return sum(n * (PAGE_SIZE << o) for o, n in enumerate(row))

    def text(self) -> str:
        lines = []
        for name, row in self.counts:
            cells = " ".join(f"{n:6d}" for n in row)
            lines.append(f"{name:>8} {cells}")
        return "\n".join(lines)


def _aligned_chunks(base: int, pages: int, max_order: int):
    """Split an arbitrary page run into maximal buddy-aligned blocks."""
    addr = base
    remaining = pages
    while remaining > 0:
        page_index = addr // PAGE_SIZE
        if page_index == 0:
            align = max_order
        else:
            align = (page_index & -page_index).bit_length() - 1
        order = min(align, max_order, remaining.bit_length() - 1)
        yield addr, order
        addr += PAGE_SIZE << order
        remaining -= 1 << order


class BuddyState:
    """The allocator: per-partition free lists ordered by address."""

    def __init__(
        self,
        partitions,
        *,
        max_order: int = 10,
        row_span: int | None = None,
        record_splits: bool = False,
    ) -> None:
        parts = sorted(partitions, key=lambda p: p.base)
        if not parts:
            raise ValueError("at least one partition required")
        names = [p.name for p in parts]
        if len(set(names)) != len(names):
            raise ValueError("partition names must be unique")
        if row_span is not None:
            if row_span <= 0 or row_span % PAGE_SIZE:
                raise ValueError("row_span must be a positive multiple of the page size")
            for p in parts:
                if p.base % row_span or p.size % row_span:
                    raise ValueError(
                        f"partition {p.name} must be aligned to the row span"
                    )
        for a, b in zip(parts, parts[1:]):
            gap = b.base - a.end
            if gap < 0:
                raise ValueError("partitions overlap")
            if len(parts) > 1 and row_span is not None and gap < row_span:
                raise ValueError(
                    "partitions must be separated by at least one row-index span"
                )
        self.partitions: dict[str, Partition] = {p.name: p for p in parts}
        self.max_order = max_order
        self.row_span = row_span
        self._free: dict[str, list[list[int]]] = {}
        self._allocated: dict[int, Block] = {}
        self._guards: dict[str, list[tuple[int, int]]] = {p.name: [] for p in parts}
        self._free_bytes: dict[str, int] = {p.name: 0 for p in parts}
        self._alloc_bytes: dict[str, int] = {p.name: 0 for p in parts}
        self.split_log: list[tuple[str, int, int]] = []
        self._record_splits = record_splits
        for p in parts:
            lists: list[list[int]] = [[] for _ in range(max_order + 1)]
            self._free[p.name] = lists
            for addr, order in _aligned_chunks(p.base, p.size // PAGE_SIZE, max_order):
                lists[order].append(addr)
            self._free_bytes[p.name] = p.size

    # -- queries ---------------------------------------------------------

    def buddy_info(self) -> BuddyInfoSnapshot:
        rows = tuple(
            (name, tuple(len(lst) for lst in lists))
            for name, lists in self._free.items()
        )
        return BuddyInfoSnapshot(rows, self.max_order)

    def buddyinfo_text(self) -> str:
        return self.buddy_info().text()

    def free_bytes(self, partition: str) -> int:
        return self._free_bytes[partition]

    def allocated_bytes(self, partition: str) -> int:
        return self._alloc_bytes[partition]

    def guard_bytes(self, partition: str) -> int:
        return sum(size for _, size in self._guards[partition])

    def guard_spans(self, partition: str) -> tuple[tuple[int, int], ...]:
        return tuple(self._guards[partition])

    def free_bytes_below(self, partition: str, order: int) -> int:
        lists = self._free[partition]
        return sum(len(lists[o]) * (PAGE_SIZE << o) for o in range(min(order, len(lists))))

    def blocks(self, partition: str | None = None):
        for block in self._allocated.values():
            if partition is None or block.partition == partition:
                yield block

    def partition_of(self, addr: int) -> Partition | None:
        for p in self.partitions.values():
            if p.base <= addr < p.end:
                return p
        return None

    # -- allocation ------------------------------------------------------

    def allocate(self, partition: str, order: int, owner: str) -> Block:
        """Smallest sufficient order, lowest address first; splits keep the
        lower half."""
        if order < 0 or order > self.max_order:
            raise ValueError(f"order {order} out of range")
        lists = self._free[partition]
        for j in range(order, self.max_order + 1):
            if lists[j]:
                base = lists[j].pop(0)
                if self._record_splits and j != order:
                    self.split_log.append((partition, order, j))
                while j > order:
                    j -= 1
                    insort(lists[j], base + (PAGE_SIZE << j))
                block = Block(partition, base, 1 << order, owner)
                self._register(block)
                return block
        raise OutOfMemoryError(
            f"no free block of order >= {order} in partition {partition!r}"
        )

    def allocate_pages(self, partition: str, pages: int, owner: str) -> Block:
        """Contiguous run of exactly `pages` pages; the covering block's tail
        is returned to the free lists immediately."""
        if pages <= 0:
            raise ValueError("pages must be positive")
        order = (pages - 1).bit_length()
        if order > self.max_order:
            raise OutOfMemoryError("run larger than the maximum order")
        covering = self.allocate(partition, order, owner)
        if covering.pages == pages:
            return covering
        del self._allocated[covering.base]
        block = Block(partition, covering.base, pages, owner)
        self._allocated[block.base] = block
        tail_base = block.end
        tail_pages = covering.pages - pages
        self._alloc_bytes[partition] -= tail_pages * PAGE_SIZE
        self._free_bytes[partition] += tail_pages * PAGE_SIZE
        lists = self._free[partition]
        for addr, o in _aligned_chunks(tail_base, tail_pages, self.max_order):
            self._coalesce_in(lists, partition, addr, o)
        return block

    def allocate_at(self, partition: str, base: int, order: int, owner: str) -> Block:
        """Carve a specific block out of the free pool (setup helper)."""
        if order < 0 or order > self.max_order:
            raise ValueError(f"order {order} out of range")
        size = PAGE_SIZE << order
        if base % size:
            raise ValueError("base not aligned to the requested order")
        lists = self._free[partition]
        for j in range(order, self.max_order + 1):
            candidate = base & ~((PAGE_SIZE << j) - 1)
            lst = lists[j]
            i = bisect_left(lst, candidate)
            if i < len(lst) and lst[i] == candidate:
                lst.pop(i)
                while j > order:
                    j -= 1
                    half = PAGE_SIZE << j
                    if base & half:
                        insort(lists[j], candidate)
                        candidate += half
                    else:
                        insort(lists[j], candidate + half)
                block = Block(partition, base, 1 << order, owner)
                self._register(block)
                return block
        raise OutOfMemoryError(f"no free block containing {base:#x}")

    def _register(self, block: Block) -> None:
        self._allocated[block.base] = block
        self._alloc_bytes[block.partition] += block.size
        self._free_bytes[block.partition] -= block.size

    # -- freeing ---------------------------------------------------------

    def free(self, block: Block) -> None:
        registered = self._allocated.get(block.base)
        if registered is None or registered != block:
            raise FreeError(f"block at {block.base:#x} is not allocated")
        del self._allocated[block.base]
        self._alloc_bytes[block.partition] -= block.size
        self._free_bytes[block.partition] += block.size
        lists = self._free[block.partition]
        for addr, order in _aligned_chunks(block.base, block.pages, self.max_order):
            self._coalesce_in(lists, block.partition, addr, order)

    def _coalesce_in(self, lists, partition: str, base: int, order: int) -> None:
        part = self.partitions[partition]
        while order < self.max_order:
            size = PAGE_SIZE << order
            buddy = base ^ size
            if buddy < part.base or buddy + size > part.end:
                break
            lst = lists[order]
            i = bisect_left(lst, buddy)
            if i < len(lst) and lst[i] == buddy:
                lst.pop(i)
                base = min(base, buddy)
                order += 1
            else:
                break
        insort(lists[order], base)

    # -- guarded buffers --------------------------------------------------

    def allocate_isolated_buffer(
        self, partition: str, size: int, owner: str
    ) -> IsolatedAllocation:
        """Place a buffer with one reserved guard row span on each side.

        The guard spans cover whole row-index spans, so no other allocation
        can ever share or neighbour the buffer's rows.  Guards stay reserved
        for the lifetime of the allocator.
        """
        if self.row_span is None:
            raise GuardPlacementError("allocator built without a row span")
        if size <= 0:
            raise GuardPlacementError("buffer size must be positive")
        span = self.row_span
        body = -(-size // span) * span
        total_pages = (body + 2 * span) // PAGE_SIZE
        order = (total_pages - 1).bit_length()
        if order > self.max_order:
            raise GuardPlacementError("guarded buffer exceeds the maximum order")
        try:
            covering = self.allocate(partition, order, owner)
        except OutOfMemoryError as exc:
            raise GuardPlacementError(str(exc)) from exc
        # The covering block is aligned to its own size >= 4 row spans,
        # so carving at span boundaries keeps whole row indexes together.
        base = covering.base
        guard_lo = (base, span)
        buffer_base = base + span
        guard_hi = (buffer_base + body, span)
        leftover_base = guard_hi[0] + span
        leftover_pages = (covering.end - leftover_base) // PAGE_SIZE
        del self._allocated[covering.base]
        self._alloc_bytes[partition] -= covering.size
        block = Block(partition, buffer_base, body // PAGE_SIZE, owner)
        self._allocated[block.base] = block
        self._alloc_bytes[partition] += block.size
        self._guards[partition].extend([guard_lo, guard_hi])
        if leftover_pages > 0:
            lists = self._free[partition]
            self._free_bytes[partition] += leftover_pages * PAGE_SIZE
            for addr, o in _aligned_chunks(leftover_base, leftover_pages, self.max_order):
                self._coalesce_in(lists, partition, addr, o)
        return IsolatedAllocation(block, (guard_lo, guard_hi))


@dataclass
class PreloadState:
    """What the workload preload left behind.

    fresh_halves are allocated blocks whose buddies are also allocated;
    freeing one later injects exactly that many bytes of small free blocks
    into the pool without any coalescing.
    """

    bulk_blocks: list[Block]
    anchors: list[Block]
    fresh_halves: list[Block]

    def inject_fresh(self, buddy: "BuddyState") -> int:
        injected = 0
        for half in self.fresh_halves:
            buddy.free(half)
            injected += half.size
        self.fresh_halves = []
        return injected


def preload_workload(
    buddy: BuddyState,
    partition: str,
    *,
    residue_bytes: int,
    bulk_bytes: int,
    reserve_low_bytes: int,
    small_max_order: int,
    rng: random.Random,
    fresh_bytes: int = 0,
    max_attempts: int = 2000,
) -> PreloadState:
    """Seed a background-workload memory state.

    Allocates bulk blocks at random positions above the reserved low region
    (those stay allocated), then constructs exactly residue_bytes of free
    small blocks whose buddies stay allocated, so they cannot coalesce away.
    fresh_bytes builds additional small blocks that stay allocated until
    PreloadState.inject_fresh releases them.
    """
    if residue_bytes % PAGE_SIZE or fresh_bytes % PAGE_SIZE:
        raise ValueError("residue and fresh bytes must be page granular")
    part = buddy.partitions[partition]
    lo = part.base + reserve_low_bytes
    if lo >= part.end:
        raise ValueError("low reserve leaves no room for the workload")

    def place(order: int, owner: str) -> Block:
        size = PAGE_SIZE << order
        start = -(-lo // size) * size
        slots = (part.end - start) // size
        if slots <= 0:
            raise OutOfMemoryError("region too small for requested order")
        last_error: Exception | None = None
        for _ in range(max_attempts):
            base = start + rng.randrange(slots) * size
            try:
                return buddy.allocate_at(partition, base, order, owner)
            except OutOfMemoryError as exc:
                last_error = exc
        raise OutOfMemoryError(f"workload placement failed: {last_error}")

    bulk_blocks: list[Block] = []
    placed = 0
    while placed < bulk_bytes:
        order = buddy.max_order
        while order > 0 and (PAGE_SIZE << order) > bulk_bytes - placed:
            order -= 1
        block = place(order, "workload")
        bulk_blocks.append(block)
        placed += block.size

    def build_pairs(total_bytes: int) -> tuple[list[Block], list[Block]]:
        pair_anchors: list[Block] = []
        halves: list[Block] = []
        remaining = total_bytes // PAGE_SIZE
        while remaining > 0:
            top = min(small_max_order, remaining.bit_length() - 1)
            order = rng.randint(0, top)
            size = PAGE_SIZE << order
            pair_size = size * 2
            start = -(-lo // pair_size) * pair_size
            slots = (part.end - start) // pair_size
            for _ in range(max_attempts):
                pair_base = start + rng.randrange(slots) * pair_size
                try:
                    anchor = buddy.allocate_at(partition, pair_base, order, "workload")
                except OutOfMemoryError:
                    continue
                try:
                    half = buddy.allocate_at(
                        partition, pair_base + size, order, "workload"
                    )
                except OutOfMemoryError:
                    buddy.free(anchor)
                    continue
                pair_anchors.append(anchor)
                halves.append(half)
                remaining -= 1 << order
                break
            else:
                raise OutOfMemoryError("could not place residue pair")
        return pair_anchors, halves

    anchors, residue_halves = build_pairs(residue_bytes)
    fresh_anchors, fresh_halves = build_pairs(fresh_bytes)
    anchors.extend(fresh_anchors)

    # Carving anchors splits large blocks and strands free siblings below
    # the maximum order; take those as workload memory, so what remains
    # free is max-order blocks plus exactly the halves freed below.
    counts = buddy.buddy_info().order_counts(partition)
    for order in range(min(buddy.max_order, len(counts))):
        for _ in range(counts[order]):
            anchors.append(buddy.allocate(partition, order, "workload"))

    # Freeing the residue halves last keeps them out of the placements
    # above; each buddy is an allocated anchor, so nothing coalesces.
    for half in residue_halves:
        buddy.free(half)
    return PreloadState(bulk_blocks, anchors, fresh_halves)
