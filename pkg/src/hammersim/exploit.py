"""Flip verification, page-table capture, and privilege escalation.

The verification scan walks the mapped range for pages whose header no
longer reads as the marker.  Each such page may be a page table reached
through a corrupted translation: writing a probe entry into its slot 1 and
re-scanning the stride-512 positions (the pages those slot-1 entries map)
tells the two cases apart.  On failure the saved entry is written back
through the same translation, leaving the tables bit-identical.

With a captured table, escalation walks physical frames through the probe
entry looking for a page carrying six consecutive identical 32-bit ids, the
shape of a process identity record.  A zeroed uid is only trusted after the
process observes it; look-alike records are restored and skipped.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from .dram_model import (
    MODE_SINGLE_SIDED,
    PAGE_SIZE,
    InjectedFlip,
)
from .os_model import MARKER, OsModel, PROBE_PTE, PteEntry, cred_pattern
from .timing_channel import (
    ChannelModel,
    PairSelectionError,
    select_hammer_pair,
)

STATUS_NONE = "none"
STATUS_FLIPPABLE = "flippable_only"
STATUS_KERNEL = "kernel_privilege"
STATUS_ROOT = "root_privilege"
STATUS_ORDER = (STATUS_NONE, STATUS_FLIPPABLE, STATUS_KERNEL, STATUS_ROOT)

PROBE_ENTRY_INDEX = 1


def _is_probe_position(os_model: OsModel, vaddr: int) -> bool:
    page_index = (vaddr - os_model.map_base) // PAGE_SIZE
    return page_index % 512 == PROBE_ENTRY_INDEX


def verify_and_take_pt(os_model: OsModel) -> tuple[int, int] | None:
    """Find a non-marker page that is a controllable page table.

    Returns (va, vb): va writes into the captured table, vb reads through
    its probe slot.  Failed probes restore the original entry before the
    scan moves on.
    """
    for va in list(os_model.iter_nonmarker_pages()):
        old_pte = os_model.read_u64_virtual(va + PROBE_ENTRY_INDEX * 8)
        if old_pte is None:
            continue
        os_model.write_u64_virtual(va + PROBE_ENTRY_INDEX * 8, PROBE_PTE)
        os_model.flush_tlb()
        found = None
        for vb in os_model.iter_nonmarker_pages():
            if vb != va and _is_probe_position(os_model, vb):
                found = vb
                break
        if found is not None:
            return va, found
        os_model.write_u64_virtual(va + PROBE_ENTRY_INDEX * 8, old_pte)
    return None


def escalate_root(
    os_model: OsModel,
    va: int,
    vb: int,
    pid: int,
) -> bool:
    """Walk physical frames through the captured table until the process's
    own identity record is found and zeroed.

    Pages that merely look like a record are restored and skipped; only a
    uid change the process itself observes counts.
    """
    cred = os_model.creds[pid]
    pattern = cred_pattern(cred.uid)
    probe_addr = va + PROBE_ENTRY_INDEX * 8
    for pfn in os_model.memory.backed_pfns():
        os_model.write_u64_virtual(probe_addr, PteEntry.make(pfn).raw)
        os_model.flush_tlb()
        page = os_model.read_virtual(vb, PAGE_SIZE)
        if page is None:
            continue
        offset = page.find(pattern)
        while offset >= 0:
            os_model.write_virtual(vb + offset, struct.pack("<I", 0))
            if os_model.getuid(pid) == 0:
                return True
            os_model.write_virtual(vb + offset, struct.pack("<I", cred.uid))
            offset = page.find(pattern, offset + 4)
    return False


@dataclass
class ExploitOutcome:
    """End state of a hammering campaign."""

    status: str
    rounds: int
    flips: list[InjectedFlip] = field(default_factory=list)
    pt_flip_count: int = 0
    found_va: int | None = None
    found_vb: int | None = None
    pair_attempts: int = 0
    pair_selection_failed: bool = False

    @property
    def flip_count(self) -> int:
        return len(self.flips)


def hammer_loop(
    os_model: OsModel,
    buffer_page_vaddrs: list[int],
    channel: ChannelModel,
    rng: random.Random,
    *,
    rounds_cap: int,
    reps_per_round: int,
    pid: int,
    pair_attempt_cap: int = 5000,
) -> ExploitOutcome:
    """Alternate hammer rounds with verification until capture or cap.

    Each round times a fresh pair from the buffer's user mapping, hammers
    it, applies any flips, flushes the TLB, and runs the verification scan.
    """
    outcome = ExploitOutcome(status=STATUS_NONE, rounds=0)
    pt_frames = os_model.pt_pfns()
    for _ in range(rounds_cap):
        outcome.rounds += 1
        try:
            (va_a, va_b), attempts, _ = select_hammer_pair(
                os_model,
                buffer_page_vaddrs,
                channel,
                rng,
                max_attempts=pair_attempt_cap,
            )
        except PairSelectionError:
            outcome.pair_selection_failed = True
            break
        outcome.pair_attempts += attempts
        pa = os_model.translate(va_a)
        pb = os_model.translate(va_b)
        assert pa is not None and pb is not None
        flips = os_model.dram.hammer(
            [pa * PAGE_SIZE, pb * PAGE_SIZE],
            reps_per_round,
            MODE_SINGLE_SIDED,
            rng,
        )
        applied = os_model.apply_flips(flips)
        outcome.flips.extend(applied)
        outcome.pt_flip_count += sum(
            1 for f in applied if f.addr // PAGE_SIZE in pt_frames
        )
        os_model.flush_tlb()
        result = verify_and_take_pt(os_model)
        if result is not None:
            outcome.found_va, outcome.found_vb = result
            outcome.status = STATUS_KERNEL
            if escalate_root(os_model, outcome.found_va, outcome.found_vb, pid):
                outcome.status = STATUS_ROOT
            break
    if outcome.status == STATUS_NONE and outcome.pt_flip_count > 0:
        outcome.status = STATUS_FLIPPABLE
    return outcome
