"""Independent oracles shared by the unit and acceptance tests.

These deliberately recompute behavior through different mechanisms than
the package: the mapping oracle folds selector bits with numpy over every
address, the bitmap allocator tracks a free bitmap as one big integer
instead of per-order free lists, and the verification oracle sweeps every
mapped page linearly instead of consulting the dirty index.
"""

from __future__ import annotations

import random

import numpy as np

from hammersim.ambush import DRIVER_VIDEO, plan, run_ambush
from hammersim.buddy_alloc import (
    Block,
    BuddyState,
    OutOfMemoryError,
    Partition,
    preload_workload,
)
from hammersim.dram_model import PAGE_SIZE, Dram, DramGeometry, VulnerabilityMap
from hammersim.os_model import MARKER, PROBE_PTE, OsModel
from hammersim.profiles import simple_mapping

MIB = 1024 * 1024


def numpy_coord_keys(geometry: DramGeometry) -> np.ndarray:
    """Map every physical address to a packed coordinate key, vectorized."""
    spec = geometry.mapping
    capacity = geometry.capacity
    addrs = np.arange(capacity, dtype=np.uint64)

    def fold(bits) -> np.ndarray:
        acc = np.zeros(capacity, dtype=np.uint64)
        for b in bits:
            acc ^= (addrs >> np.uint64(b)) & np.uint64(1)
        return acc

    def coordinate(selectors) -> np.ndarray:
        value = np.zeros(capacity, dtype=np.uint64)
        for i, bits in enumerate(selectors):
            value |= fold(bits) << np.uint64(i)
        return value

    dimm = coordinate(spec.dimm_select_bits)
    rank = coordinate(spec.rank_select_bits)
    bank = coordinate(spec.bank_select_bits)

    lo, hi = spec.row_index_bit_range
    row = (addrs >> np.uint64(lo)) & np.uint64((1 << (hi - lo + 1)) - 1)

    used = {b for sel in (spec.dimm_select_bits, spec.rank_select_bits,
                          spec.bank_select_bits) for bits in sel for b in bits[:1]}
    used |= set(range(lo, hi + 1))
    column_bits = [b for b in range(capacity.bit_length() - 1) if b not in used]
    column = np.zeros(capacity, dtype=np.uint64)
    for i, b in enumerate(sorted(column_bits)):
        column |= ((addrs >> np.uint64(b)) & np.uint64(1)) << np.uint64(i)

    key = dimm
    for part, size in (
        (rank, geometry.ranks_per_dimm),
        (bank, geometry.banks_per_rank),
        (row, geometry.rows_per_bank),
        (column, 1 << len(column_bits)),
    ):
        key = key * np.uint64(size) + part
    return key


class BitmapBuddy:
    """Bitmap-backed reference allocator with the same placement policy.

    The free state is one integer per partition, bit i set when page i
    (relative to the partition base) is free.  Maximal free blocks are
    derived from the bitmap on demand, so split and coalesce behavior is
    implicit rather than tracked.
    """

    def __init__(self, partitions: list[Partition], max_order: int = 10) -> None:
        self.partitions = {p.name: p for p in partitions}
        self.max_order = max_order
        self.bits = {
            p.name: (1 << (p.size // PAGE_SIZE)) - 1 for p in partitions
        }
        # Alignment masks depend only on pool geometry, so build them once.
        self._align = {
            p.name: [
                self._aligned_mask(p.size // PAGE_SIZE, j)
                for j in range(max_order + 2)
            ]
            for p in partitions
        }

    @staticmethod
    def _aligned_mask(pages: int, order: int) -> int:
        # Bits at positions that are multiples of 2**order.
        step = 1 << order
        mask = 0
        for pos in range(0, pages, step):
            mask |= 1 << pos
        return mask

    def _full_masks(self, name: str) -> list[int]:
        """full[j] has bit i set when pages [i, i + 2^j) are all free."""
        part = self.partitions[name]
        pages = part.size // PAGE_SIZE
        full = [self.bits[name] & ((1 << pages) - 1)]
        for j in range(1, self.max_order + 1):
            prev = full[j - 1]
            full.append(prev & (prev >> (1 << (j - 1))))
        return full

    def free_blocks(self, name: str) -> set[tuple[int, int]]:
        """Maximal aligned free blocks as (absolute_base, order) pairs."""
        part = self.partitions[name]
        pages = part.size // PAGE_SIZE
        base_page = part.base // PAGE_SIZE
        full = self._full_masks(name)
        align = self._align[name]
        out: set[tuple[int, int]] = set()
        for j in range(self.max_order + 1):
            candidates = full[j] & align[j]
            if j < self.max_order:
                # Drop halves of fully-free aligned parent blocks.
                parents = full[j + 1] & align[j + 1]
                candidates &= ~(parents | (parents << (1 << j)))
            pos = candidates
            while pos:
                low = (pos & -pos).bit_length() - 1
                block_pages = 1 << j
                if low + block_pages <= pages:
                    out.add(((base_page + low) * PAGE_SIZE, j))
                pos &= pos - 1
        return out

    def allocate(self, name: str, order: int) -> int | None:
        """Lowest address of the smallest sufficient maximal block."""
        blocks = self.free_blocks(name)
        best: int | None = None
        for j in range(order, self.max_order + 1):
            candidates = [b for b, o in blocks if o == j]
            if candidates:
                best = min(candidates)
                break
        if best is None:
            return None
        page = (best - self.partitions[name].base) // PAGE_SIZE
        span = (1 << order)
        mask = ((1 << span) - 1) << page
        self.bits[name] &= ~mask
        return best

    def free(self, name: str, base: int, order: int) -> None:
        page = (base - self.partitions[name].base) // PAGE_SIZE
        span = 1 << order
        self.bits[name] |= ((1 << span) - 1) << page

    def free_pages(self, name: str) -> int:
        return self.bits[name].bit_count()


def free_block_set(buddy: BuddyState, partition: str) -> set[tuple[int, int]]:
    lists = buddy._free[partition]
    return {(addr, order) for order, lst in enumerate(lists) for addr in lst}


def run_op_sequence(seed: int, steps: int, base: int = 4 * MIB,
                    size: int = 4 * MIB) -> None:
    """Random alloc/free walk comparing allocator and oracle after every op."""
    part = Partition("pool", base, size)
    buddy = BuddyState([part], max_order=10)
    oracle = BitmapBuddy([part], max_order=10)
    rng = random.Random(seed)
    live: list[Block] = []
    for _ in range(steps):
        if not live or rng.random() < 0.55:
            order = min(rng.randrange(11), rng.randrange(11))
            want = oracle.allocate("pool", order)
            try:
                block = buddy.allocate("pool", order, "t")
            except OutOfMemoryError:
                assert want is None
                continue
            assert want == block.base
            live.append(block)
        else:
            block = live.pop(rng.randrange(len(live)))
            buddy.free(block)
            oracle.free("pool", block.base, (block.pages - 1).bit_length())
        assert free_block_set(buddy, "pool") == oracle.free_blocks("pool")
    assert buddy.free_bytes("pool") == oracle.free_pages("pool") * PAGE_SIZE


def small_attack_sim(*, vuln: VulnerabilityMap | None = None, seed: int = 1,
                     threshold: int = 24 * MIB, residue: int = 2 * MIB):
    """128 MiB two-bank machine with the full placement already run."""
    geo = simple_mapping(banks=2, rows=8192, row_size=8192)
    span = 2 * 8192
    buddy = BuddyState(
        [Partition("kernel", 0, 64 * MIB),
         Partition("user", 64 * MIB + span, 63 * MIB)],
        row_span=span,
    )
    dram = Dram(geo, vuln if vuln is not None else VulnerabilityMap(geo))
    os_model = OsModel(dram, buddy)
    preload_workload(
        buddy, "kernel",
        residue_bytes=residue,
        bulk_bytes=8 * MIB,
        reserve_low_bytes=40 * MIB,
        small_max_order=2,
        rng=random.Random(seed),
    )
    placement = run_ambush(os_model, plan(threshold, DRIVER_VIDEO))
    return os_model, placement


def fuzz_injections(os_model: OsModel, rng: random.Random, count: int) -> int:
    """Flip random bits in table frames (and a few file headers)."""
    pt_list = sorted(os_model.pt_pfns())
    file = os_model.files[0]
    injected = 0
    for _ in range(count):
        roll = rng.random()
        if roll < 0.75:
            pfn = rng.choice(pt_list)
            addr = pfn * PAGE_SIZE + rng.randrange(PAGE_SIZE)
        else:
            pfn = rng.choice(file.pfns)
            addr = pfn * PAGE_SIZE + rng.randrange(16)
        direction = rng.choice(["1to0", "0to1"])
        if os_model.memory.flip_bit(addr, rng.randrange(8), direction):
            injected += 1
    os_model.flush_tlb()
    return injected


def brute_force_verify(os_model: OsModel) -> tuple[int, int] | None:
    """Reference probe scan that never consults the dirty index.

    The candidate list comes from one linear sweep of every mapped page.
    Re-scans after each probe walk the stride-512 probe positions directly:
    a page can only read non-marker if its entry or file header changed,
    and between sweeps only slot-1 entries change (probe writes and their
    restores), so checking every slot-1 position reproduces the capture
    algorithm's reads, repairs, and result exactly.
    """

    def sweep(stride_from: int | None) -> list[tuple[int, int]]:
        out = []
        for vma in os_model.vmas:
            start = vma.base
            step = PAGE_SIZE
            if stride_from is not None:
                start = vma.base + stride_from * PAGE_SIZE
                step = 512 * PAGE_SIZE
            for vaddr in range(start, vma.end, step):
                value = os_model.read_u64_virtual(vaddr)
                if value is not None and value != MARKER:
                    out.append((vaddr, value))
        return out

    for va, _ in sweep(None):
        old_pte = os_model.read_u64_virtual(va + 8)
        if old_pte is None:
            continue
        os_model.write_u64_virtual(va + 8, PROBE_PTE)
        os_model.flush_tlb()
        found = None
        for vb, _ in sweep(1):
            if vb != va:
                found = vb
                break
        if found is not None:
            return va, found
        os_model.write_u64_virtual(va + 8, old_pte)
    return None
