"""Placement planning and execution: drain small blocks, interleave tables.

The plan mirrors the attack's own arithmetic: the device-buffer reservation
is charged at whole mebibytes, the page-table budget is what remains of the
threshold after the buffer and the mapping file, and the file doubles until
the mapping count fits under the VMA limit.  One mapping of a 2 MiB file
costs exactly one page-table page, so draining the allocator's small blocks
is just repeated mapping.

Execution enforces the threshold as a hard cap on actual bytes charged to
the attack (buffer blocks + file pages + table pages), which stops the
stuffing phase slightly before the plan's mapping budget when the charged
buffer figure was rounded down.
"""

from __future__ import annotations

from dataclasses import dataclass

from .dram_model import PAGE_SIZE, page_row_keys, target_block_size
from .os_model import (
    OsModel,
    SG_MAX_BYTES,
    VIDEO_CHUNK_BYTES,
    VIDEO_MAX_CHUNKS,
    VMA_LIMIT,
    DoubleOwnedBuffer,
    TmpFile,
    VmaLimitError,
)

MIB = 1 << 20

DRIVER_VIDEO = "video"
DRIVER_SG = "sg"
DRIVERS = (DRIVER_VIDEO, DRIVER_SG)

DEFAULT_FILE_SIZE = 2 * MIB
DEFAULT_SG_OPENS = 256


class AmbushError(Exception):
    pass


class PlanError(AmbushError):
    pass


class DrainError(AmbushError):
    pass


class PlacementError(AmbushError):
    pass


@dataclass(frozen=True)
class AmbushPlan:
    """Derived placement arithmetic for one threshold/driver combination."""

    threshold_mem_size: int
    driver: str
    chunk_size: int
    chunk_count: int
    dev_request_bytes: int
    dev_buf_size: int
    file_size: int
    pt_size: int
    map_mem_size: int
    vma_num: int
    vma_limit: int
    page_size: int = PAGE_SIZE

    def __post_init__(self) -> None:
        if self.driver not in DRIVERS:
            raise PlanError(f"unknown driver {self.driver!r}")
        if self.pt_size != self.threshold_mem_size - self.dev_buf_size - self.file_size:
            raise PlanError("pt_size does not balance the threshold")
        if self.pt_size < 0:
            raise PlanError("threshold too small for the device buffers")
        if self.map_mem_size != self.pt_size * (self.page_size // 8):
            raise PlanError("map_mem_size must be pt_size * entries-per-page-byte")
        if self.vma_num != self.map_mem_size // self.file_size:
            raise PlanError("vma_num does not match map_mem_size / file_size")
        if self.vma_num >= self.vma_limit:
            raise PlanError("vma_num must stay below the VMA limit")
        if self.dev_request_bytes != self.chunk_size * self.chunk_count:
            raise PlanError("device request must be chunk_size * chunk_count")
        if self.dev_buf_size != (self.dev_request_bytes // MIB) * MIB:
            raise PlanError("charged buffer size must be whole mebibytes")

    @property
    def pt_page_budget(self) -> int:
        return self.pt_size // self.page_size


def plan(
    threshold: int,
    driver: str,
    *,
    sg_opens: int = DEFAULT_SG_OPENS,
    sg_reserved: int = SG_MAX_BYTES,
    file_size: int = DEFAULT_FILE_SIZE,
    vma_limit: int = VMA_LIMIT,
) -> AmbushPlan:
    """Compute the placement arithmetic, doubling the file as needed."""
    if driver == DRIVER_VIDEO:
        chunk_size, chunk_count = VIDEO_CHUNK_BYTES, VIDEO_MAX_CHUNKS
    elif driver == DRIVER_SG:
        chunk_size, chunk_count = sg_reserved, sg_opens
    else:
        raise PlanError(f"unknown driver {driver!r}")
    dev_request = chunk_size * chunk_count
    dev_charged = (dev_request // MIB) * MIB
    if file_size <= 0 or file_size % DEFAULT_FILE_SIZE:
        raise PlanError("file size must be a positive multiple of 2 MiB")
    while True:
        pt_size = threshold - dev_charged - file_size
        if pt_size < 0:
            raise PlanError(
                "threshold leaves no room for the mapping file and buffers"
            )
        map_mem = pt_size * (PAGE_SIZE // 8)
        vma_num = map_mem // file_size
        if vma_num < vma_limit:
            break
        file_size *= 2
    return AmbushPlan(
        threshold_mem_size=threshold,
        driver=driver,
        chunk_size=chunk_size,
        chunk_count=chunk_count,
        dev_request_bytes=dev_request,
        dev_buf_size=dev_charged,
        file_size=file_size,
        pt_size=pt_size,
        map_mem_size=map_mem,
        vma_num=vma_num,
        vma_limit=vma_limit,
    )


@dataclass
class Placement:
    """What the executed placement left in memory."""

    plan: AmbushPlan
    file: TmpFile
    buffer: DoubleOwnedBuffer | None
    drained_pt_pages: int
    stuffed_pt_pages: int
    vmas_created: int
    fresh_injected_bytes: int
    mitigated: bool

    @property
    def pt_pages(self) -> int:
        return self.drained_pt_pages + self.stuffed_pt_pages

    @property
    def footprint_bytes(self) -> int:
        buffer_bytes = self.buffer.allocated_bytes if self.buffer else 0
        return buffer_bytes + self.file.size + self.pt_pages * PAGE_SIZE


class MappingDriver:
    """Owns the mapping file and budget; stamps markers after the first map."""

    def __init__(self, os_model: OsModel, plan_: AmbushPlan) -> None:
        self.os = os_model
        self.plan = plan_
        self.file = os_model.create_tmp_file(plan_.file_size)
        self.mapped = 0
        self.pt_pages = 0

    @property
    def budget_left(self) -> int:
        return self.plan.vma_num - self.mapped

    def map_once(self) -> int:
        if self.budget_left <= 0:
            raise VmaLimitError("plan mapping budget exhausted")
        new_pts = self.os.mmap_primitive(self.file)
        self.mapped += 1
        if self.mapped == 1:
            self.os.write_markers(self.file)
        self.pt_pages += len(new_pts)
        return len(new_pts)


def drain_small_blocks(
    os_model: OsModel,
    mapper: MappingDriver,
    *,
    fresh_injector=None,
    fresh_cap_bytes: int = 0,
) -> tuple[int, int]:
    """Map the file until no free block below the target order remains.

    When fresh_injector is given it runs once after the initial drain; any
    small blocks it releases are drained too, up to fresh_cap_bytes extra.
    Returns (pt pages drained, fresh bytes injected).
    """
    buddy = os_model.buddy
    partition = os_model.kernel_partition
    target_order = _order_of(target_block_size(os_model.dram.geometry))
    start_pages = mapper.pt_pages
    injected = 0
    extra_budget = 0
    injector_ran = False
    while True:
        while buddy.free_bytes_below(partition, target_order) > 0:
            if mapper.budget_left <= 0:
                raise DrainError(
                    "mapping budget exhausted before small blocks were drained"
                )
            drained_so_far = (mapper.pt_pages - start_pages) * PAGE_SIZE
            if injector_ran and drained_so_far >= extra_budget:
                break
            mapper.map_once()
        if fresh_injector is not None and not injector_ran:
            injector_ran = True
            injected = fresh_injector()
            extra_budget = (
                (mapper.pt_pages - start_pages) * PAGE_SIZE
                + min(injected, fresh_cap_bytes)
            )
            continue
        break
    return mapper.pt_pages - start_pages, injected


def _order_of(size: int) -> int:
    pages = size // PAGE_SIZE
    return pages.bit_length() - 1


def place_interleaved(
    os_model: OsModel,
    plan_: AmbushPlan,
    mapper: MappingDriver,
    *,
    mitigation: bool = False,
) -> DoubleOwnedBuffer:
    """Reserve the device buffers, then stuff tables into the splits.

    Stuffing continues until either the plan's mapping budget or the
    threshold cap on actual charged bytes is reached, whichever binds
    first.
    """
    if plan_.driver == DRIVER_VIDEO:
        buffer = os_model.open_video(plan_.chunk_count, isolated=mitigation)
    else:
        buffer = os_model.open_sg(
            plan_.chunk_count, plan_.chunk_size, isolated=mitigation
        )
    os_model.map_buffer(buffer)
    fixed = buffer.allocated_bytes + plan_.file_size
    if fixed > plan_.threshold_mem_size:
        raise PlacementError("buffers and file alone exceed the threshold")
    pages_per_map = plan_.file_size // (PAGE_SIZE * 512)
    cap_pages = (plan_.threshold_mem_size - fixed) // PAGE_SIZE
    while (
        mapper.budget_left > 0
        and mapper.pt_pages + max(pages_per_map, 1) <= cap_pages
    ):
        mapper.map_once()
    return buffer


def run_ambush(
    os_model: OsModel,
    plan_: AmbushPlan,
    *,
    mitigation: bool = False,
    fresh_injector=None,
    fresh_cap_bytes: int = 0,
) -> Placement:
    """Execute the full placement: file, drain, buffers, stuffing."""
    mapper = MappingDriver(os_model, plan_)
    drained, injected = drain_small_blocks(
        os_model,
        mapper,
        fresh_injector=fresh_injector,
        fresh_cap_bytes=fresh_cap_bytes,
    )
    buffer = place_interleaved(os_model, plan_, mapper, mitigation=mitigation)
    placement = Placement(
        plan=plan_,
        file=mapper.file,
        buffer=buffer,
        drained_pt_pages=drained,
        stuffed_pt_pages=mapper.pt_pages - drained,
        vmas_created=mapper.mapped,
        fresh_injected_bytes=injected,
        mitigated=mitigation,
    )
    if placement.footprint_bytes > plan_.threshold_mem_size:
        raise PlacementError("placement exceeded the memory threshold")
    return placement


@dataclass(frozen=True)
class AdjacencyReport:
    """Row adjacency between buffer rows and page-table rows."""

    adjacent: bool
    pairs: tuple[tuple[tuple[int, int, int, int], tuple[int, int, int, int]], ...]


def verify_adjacency(os_model: OsModel, placement: Placement) -> AdjacencyReport:
    """Check whether any buffer row neighbours a page-table row in-bank."""
    geometry = os_model.dram.geometry
    pt_rows: set[tuple[int, int, int, int]] = set()
    for pfn in os_model.pt_pfns():
        pt_rows |= page_row_keys(pfn, geometry)
    pairs = []
    buffer = placement.buffer
    if buffer is None:
        return AdjacencyReport(False, ())
    seen: set[tuple] = set()
    for chunk in buffer.chunks:
        first = chunk.block.base // PAGE_SIZE
        for pfn in range(first, first + chunk.page_count()):
            for key in page_row_keys(pfn, geometry):
                d, r, b, row = key
                for neighbor_row in (row - 1, row + 1):
                    neighbor = (d, r, b, neighbor_row)
                    if neighbor in pt_rows:
                        pair = (key, neighbor)
                        if pair not in seen:
                            seen.add(pair)
                            pairs.append(pair)
    pairs.sort()
    return AdjacencyReport(bool(pairs), tuple(pairs))
