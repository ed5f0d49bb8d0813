"""DRAM geometry, physical-address mapping, row-buffer state, and hammering.

The address map is linear over GF(2): every DIMM/rank/bank coordinate bit is
the XOR of a configured set of physical-address bits, the row index is a
contiguous bit range, and the column packs whatever bits remain.  The first
bit of each selector list (its "primary" bit) must be unique, outside the row
range, and not an auxiliary bit of another selector; that keeps the map
constructively invertible, which unmap_dram_to_phys exploits.

Hammering is cell-granular and seeded.  A row only disturbs its neighbours
when it is re-activated repeatedly, which requires a row-buffer conflict:
two aggressor rows in the same bank, or the one-location mode where the
controller closes rows on its own.  Flips are drawn per vulnerable cell with
probability scaled by hammer mode and activation dose.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

PAGE_SIZE = 4096

FLIP_ONE_TO_ZERO = "1to0"
FLIP_ZERO_TO_ONE = "0to1"
FLIP_DIRECTIONS = (FLIP_ONE_TO_ZERO, FLIP_ZERO_TO_ONE)

MODE_DOUBLE_SIDED = "double_sided"
MODE_SINGLE_SIDED = "single_sided"
MODE_ONE_LOCATION = "one_location"
HAMMER_MODES = (MODE_DOUBLE_SIDED, MODE_SINGLE_SIDED, MODE_ONE_LOCATION)


class DramError(Exception):
    """Base class for DRAM model errors."""


class AddressRangeError(DramError):
    pass


class MappingError(DramError):
    pass


class HammerModeError(DramError):
    pass


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed derived from the given parts.

    Used wherever a child RNG must be reproducible independently of call
    order (per-row cell generation, per-trial seeding).
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _ilog2(n: int, what: str) -> int:
    if n <= 0 or n & (n - 1):
        raise ValueError(f"{what} must be a positive power of two, got {n}")
    return n.bit_length() - 1


def _parity(x: int) -> int:
    return x.bit_count() & 1


@dataclass(frozen=True)
class MappingSpec:
    """Physical-address-to-DRAM translation rule.

    Each selector is a tuple of bit lists, one list per coordinate bit
    (LSB first); the coordinate bit is the XOR of the listed physical
    address bits.  row_index_bit_range is inclusive on both ends.
    """

    dimm_select_bits: tuple[tuple[int, ...], ...]
    rank_select_bits: tuple[tuple[int, ...], ...]
    bank_select_bits: tuple[tuple[int, ...], ...]
    row_index_bit_range: tuple[int, int]

    @staticmethod
    def _normalize(lists) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(int(b) for b in lst) for lst in lists)

    @classmethod
    def make(cls, dimm, rank, bank, row_range) -> "MappingSpec":
        return cls(
            cls._normalize(dimm),
            cls._normalize(rank),
            cls._normalize(bank),
            (int(row_range[0]), int(row_range[1])),
        )

    def selectors(self) -> tuple[tuple[int, ...], ...]:
        return self.dimm_select_bits + self.rank_select_bits + self.bank_select_bits


@dataclass(frozen=True)
class DramCoord:
    """Location of a byte: (dimm, rank, bank, row, column)."""

    dimm: int
    rank: int
    bank: int
    row: int
    column: int

    def bank_key(self) -> tuple[int, int, int]:
        return (self.dimm, self.rank, self.bank)

    def row_key(self) -> tuple[int, int, int, int]:
        return (self.dimm, self.rank, self.bank, self.row)


@dataclass(frozen=True)
class DramGeometry:
    """Module counts, row dimensions, and the address mapping.

    All counts must be powers of two and the row size a multiple of the
    page size, so capacity is a power of two and the mapping can be a
    bit-level bijection.
    """

    dimms: int
    ranks_per_dimm: int
    banks_per_rank: int
    rows_per_bank: int
    row_size: int
    mapping: MappingSpec

    def __post_init__(self) -> None:
        dimm_bits = _ilog2(self.dimms, "dimms")
        rank_bits = _ilog2(self.ranks_per_dimm, "ranks_per_dimm")
        bank_bits = _ilog2(self.banks_per_rank, "banks_per_rank")
        row_bits = _ilog2(self.rows_per_bank, "rows_per_bank")
        _ilog2(self.row_size, "row_size")
        if self.row_size % PAGE_SIZE:
            raise ValueError("row_size must be a multiple of the page size")

        m = self.mapping
        if len(m.dimm_select_bits) != dimm_bits:
            raise MappingError("dimm selector count does not match dimm count")
        if len(m.rank_select_bits) != rank_bits:
            raise MappingError("rank selector count does not match rank count")
        if len(m.bank_select_bits) != bank_bits:
            raise MappingError("bank selector count does not match bank count")

        addr_bits = (
            dimm_bits + rank_bits + bank_bits + row_bits + _ilog2(self.row_size, "row_size")
        )
        row_lo, row_hi = m.row_index_bit_range
        if row_hi - row_lo + 1 != row_bits:
            raise MappingError("row bit range width does not match rows_per_bank")
        if row_lo < 0 or row_hi >= addr_bits:
            raise MappingError("row bit range outside the address width")

        row_set = set(range(row_lo, row_hi + 1))
        primaries: list[int] = []
        for sel in m.selectors():
            if not sel:
                raise MappingError("empty selector bit list")
            if any(b < 0 or b >= addr_bits for b in sel):
                raise MappingError("selector bit outside the address width")
            primaries.append(sel[0])
        if len(set(primaries)) != len(primaries):
            raise MappingError("selector primary bits must be distinct")
        if row_set & set(primaries):
            raise MappingError("selector primary bits must not overlap the row range")

        column_bits = tuple(
            b for b in range(addr_bits) if b not in row_set and b not in set(primaries)
        )
        known = row_set | set(column_bits)
        for sel in m.selectors():
            for b in sel[1:]:
                if b not in known:
                    raise MappingError(
                        "auxiliary selector bits must come from row or column bits"
                    )

        masks = tuple(sum(1 << b for b in sel) for sel in m.selectors())
        object.__setattr__(self, "_addr_bits", addr_bits)
        object.__setattr__(self, "_row_lo", row_lo)
        object.__setattr__(self, "_row_hi", row_hi)
        object.__setattr__(self, "_column_bits", column_bits)
        object.__setattr__(self, "_primaries", tuple(primaries))
        object.__setattr__(self, "_selector_masks", masks)
        object.__setattr__(self, "_dimm_bits", dimm_bits)
        object.__setattr__(self, "_rank_bits", rank_bits)
        object.__setattr__(self, "_bank_bits", bank_bits)
        # Bits below the page offset that can change the row key of an
        # address; a 4 KiB page spans several rows when any are present.
        inpage = [b for b in primaries if b < 12]
        inpage += [b for b in range(row_lo, row_hi + 1) if b < 12]
        object.__setattr__(self, "_inpage_row_bits", tuple(sorted(set(inpage))))

    @property
    def capacity(self) -> int:
        return (
            self.dimms
            * self.ranks_per_dimm
            * self.banks_per_rank
            * self.rows_per_bank
            * self.row_size
        )

    @property
    def addr_bits(self) -> int:
        return self._addr_bits  # type: ignore[attr-defined]

    @property
    def column_bits(self) -> tuple[int, ...]:
        return self._column_bits  # type: ignore[attr-defined]

    def validate_coord(self, coord: DramCoord) -> None:
        if not (
            0 <= coord.dimm < self.dimms
            and 0 <= coord.rank < self.ranks_per_dimm
            and 0 <= coord.bank < self.banks_per_rank
            and 0 <= coord.row < self.rows_per_bank
            and 0 <= coord.column < self.row_size
        ):
            raise AddressRangeError(f"coordinate out of bounds: {coord}")


def rows_size_per_row_index(geometry: DramGeometry) -> int:
    """Bytes of physical memory sharing one row-index value across all banks."""
    return geometry.dimms * geometry.ranks_per_dimm * geometry.banks_per_rank * geometry.row_size


def target_block_size(geometry: DramGeometry) -> int:
    """Smallest block guaranteed to span two full row indexes."""
    return rows_size_per_row_index(geometry) * 2


def map_phys_to_dram(addr: int, geometry: DramGeometry) -> DramCoord:
    """Translate a physical byte address to its DRAM coordinate."""
    if addr < 0 or addr >= geometry.capacity:
        raise AddressRangeError(f"address {addr:#x} outside capacity")
    masks = geometry._selector_masks  # type: ignore[attr-defined]
    nd = geometry._dimm_bits  # type: ignore[attr-defined]
    nr = geometry._rank_bits  # type: ignore[attr-defined]
    vals = [_parity(addr & m) for m in masks]
    dimm = rank = bank = 0
    for i in range(nd):
        dimm |= vals[i] << i
    for i in range(nr):
        rank |= vals[nd + i] << i
    for i in range(len(masks) - nd - nr):
        bank |= vals[nd + nr + i] << i
    row_lo = geometry._row_lo  # type: ignore[attr-defined]
    row_hi = geometry._row_hi  # type: ignore[attr-defined]
    row = (addr >> row_lo) & ((1 << (row_hi - row_lo + 1)) - 1)
    column = 0
    for i, b in enumerate(geometry.column_bits):
        column |= ((addr >> b) & 1) << i
    return DramCoord(dimm, rank, bank, row, column)


def unmap_dram_to_phys(coord: DramCoord, geometry: DramGeometry) -> int:
    """Inverse of map_phys_to_dram."""
    geometry.validate_coord(coord)
    row_lo = geometry._row_lo  # type: ignore[attr-defined]
    addr = coord.row << row_lo
    for i, b in enumerate(geometry.column_bits):
        addr |= ((coord.column >> i) & 1) << b
    nd = geometry._dimm_bits  # type: ignore[attr-defined]
    nr = geometry._rank_bits  # type: ignore[attr-defined]
    want: list[int] = []
    for i in range(nd):
        want.append((coord.dimm >> i) & 1)
    for i in range(nr):
        want.append((coord.rank >> i) & 1)
    for i in range(geometry._bank_bits):  # type: ignore[attr-defined]
        want.append((coord.bank >> i) & 1)
    primaries = geometry._primaries  # type: ignore[attr-defined]
    masks = geometry._selector_masks  # type: ignore[attr-defined]
    # Auxiliary bits live in row/column positions, all already placed.
    for prim, mask, target in zip(primaries, masks, want):
        aux = mask & ~(1 << prim)
        if target ^ _parity(addr & aux):
            addr |= 1 << prim
    return addr


def row_neighbors(
    coord: DramCoord, geometry: DramGeometry
) -> tuple[DramCoord | None, DramCoord | None]:
    """Rows physically adjacent in the same bank, None at array edges."""
    below = above = None
    if coord.row > 0:
        below = DramCoord(coord.dimm, coord.rank, coord.bank, coord.row - 1, coord.column)
    if coord.row < geometry.rows_per_bank - 1:
        above = DramCoord(coord.dimm, coord.rank, coord.bank, coord.row + 1, coord.column)
    return below, above


def page_row_keys(pfn: int, geometry: DramGeometry) -> set[tuple[int, int, int, int]]:
    """All (dimm, rank, bank, row) keys a 4 KiB page touches."""
    base = pfn * PAGE_SIZE
    if base < 0 or base + PAGE_SIZE > geometry.capacity:
        raise AddressRangeError(f"page {pfn:#x} outside capacity")
    bits = geometry._inpage_row_bits  # type: ignore[attr-defined]
    masks = geometry._selector_masks  # type: ignore[attr-defined]
    nd = geometry._dimm_bits  # type: ignore[attr-defined]
    nr = geometry._rank_bits  # type: ignore[attr-defined]
    nb = geometry._bank_bits  # type: ignore[attr-defined]
    row_lo = geometry._row_lo  # type: ignore[attr-defined]
    row_mask = (1 << (geometry._row_hi - row_lo + 1)) - 1  # type: ignore[attr-defined]
    keys: set[tuple[int, int, int, int]] = set()
    # Same fold as map_phys_to_dram, skipping the unused column.
    for combo in range(1 << len(bits)):
        addr = base
        for i, b in enumerate(bits):
            if (combo >> i) & 1:
                addr |= 1 << b
        dimm = rank = bank = 0
        for i in range(nd):
            dimm |= ((addr & masks[i]).bit_count() & 1) << i
        for i in range(nr):
            rank |= ((addr & masks[nd + i]).bit_count() & 1) << i
        for i in range(nb):
            bank |= ((addr & masks[nd + nr + i]).bit_count() & 1) << i
        keys.add((dimm, rank, bank, (addr >> row_lo) & row_mask))
    return keys


@dataclass(frozen=True)
class VulnCell:
    """One flippable cell with its firing probability and direction."""

    coord: DramCoord
    bit: int
    probability: float
    direction: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("cell probability must be within [0, 1]")
        if self.bit < 0 or self.bit > 7:
            raise ValueError("cell bit offset must be within [0, 7]")
        if self.direction not in FLIP_DIRECTIONS:
            raise ValueError(f"unknown flip direction {self.direction!r}")


def _poisson(rng: random.Random, lam: float) -> int:
    if lam <= 0:
        return 0
    limit = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


class VulnerabilityMap:
    """Sparse per-cell susceptibility, generated lazily per bank row.

    Rows are independently "weak" with probability weak_row_rate; a weak row
    carries a Poisson number of cells at uniform positions.  Generation is
    keyed by a seed derived from the row key, so the same map emerges no
    matter which rows are queried first.
    """

    def __init__(
        self,
        geometry: DramGeometry,
        *,
        weak_row_rate: float = 0.0,
        cells_per_weak_row: float = 0.0,
        cell_probability: float = 1.0,
        directions: tuple[str, ...] = FLIP_DIRECTIONS,
        seed: int = 0,
    ) -> None:
        if not 0.0 <= weak_row_rate <= 1.0:
            raise ValueError("weak_row_rate must be within [0, 1]")
        if cells_per_weak_row < 0:
            raise ValueError("cells_per_weak_row must be non-negative")
        if not 0.0 <= cell_probability <= 1.0:
            raise ValueError("cell_probability must be within [0, 1]")
        for d in directions:
            if d not in FLIP_DIRECTIONS:
                raise ValueError(f"unknown flip direction {d!r}")
        self.geometry = geometry
        self.weak_row_rate = weak_row_rate
        self.cells_per_weak_row = cells_per_weak_row
        self.cell_probability = cell_probability
        self.directions = tuple(directions)
        self.seed = seed
        self._explicit: dict[tuple[int, int, int, int], tuple[VulnCell, ...]] = {}
        self._cache: dict[tuple[int, int, int, int], tuple[VulnCell, ...]] = {}

    @classmethod
    def from_cells(cls, geometry: DramGeometry, cells) -> "VulnerabilityMap":
        vm = cls(geometry)
        grouped: dict[tuple[int, int, int, int], list[VulnCell]] = {}
        for cell in cells:
            geometry.validate_coord(cell.coord)
            grouped.setdefault(cell.coord.row_key(), []).append(cell)
        vm._explicit = {k: tuple(v) for k, v in grouped.items()}
        return vm

    def cells_in_row(self, row_key: tuple[int, int, int, int]) -> tuple[VulnCell, ...]:
        if row_key in self._explicit:
            return self._explicit[row_key]
        cached = self._cache.get(row_key)
        if cached is not None:
            return cached
        cells: tuple[VulnCell, ...] = ()
        if self.weak_row_rate > 0.0:
            rng = random.Random(derive_seed(self.seed, "row", *row_key))
            if rng.random() < self.weak_row_rate:
                n = _poisson(rng, self.cells_per_weak_row)
                d, r, b, row = row_key
                made = []
                for _ in range(n):
                    col = rng.randrange(self.geometry.row_size)
                    bit = rng.randrange(8)
                    direction = rng.choice(self.directions)
                    made.append(
                        VulnCell(
                            DramCoord(d, r, b, row, col),
                            bit,
                            self.cell_probability,
                            direction,
                        )
                    )
                cells = tuple(made)
        self._cache[row_key] = cells
        return cells


@dataclass
class BankState:
    """Per-bank open row and activation counters."""

    open_row: int | None = None
    activation_counts: dict[int, int] = field(default_factory=dict)

    def activate(self, row: int, count: int = 1) -> None:
        self.open_row = row
        self.activation_counts[row] = self.activation_counts.get(row, 0) + count


@dataclass(frozen=True)
class HammerParams:
    """Knobs shared by all hammer calls.

    dose is the activation count at which a cell's configured probability
    applies unscaled; mode multipliers keep double-sided the most effective
    and one-location the least.
    """

    dose: int = 1_000_000
    double_sided_multiplier: float = 1.0
    single_sided_multiplier: float = 0.5
    one_location_multiplier: float = 0.2

    def multiplier(self, mode: str) -> float:
        if mode == MODE_DOUBLE_SIDED:
            return self.double_sided_multiplier
        if mode == MODE_SINGLE_SIDED:
            return self.single_sided_multiplier
        if mode == MODE_ONE_LOCATION:
            return self.one_location_multiplier
        raise HammerModeError(f"unknown hammer mode {mode!r}")


@dataclass(frozen=True)
class InjectedFlip:
    """A fired cell: where it is and which way it pulls the bit."""

    addr: int
    bit: int
    direction: str
    coord: DramCoord


class Dram:
    """Geometry plus bank state and the hammer entry point."""

    def __init__(
        self,
        geometry: DramGeometry,
        vuln_map: VulnerabilityMap | None = None,
        params: HammerParams | None = None,
    ) -> None:
        self.geometry = geometry
        self.vuln_map = vuln_map if vuln_map is not None else VulnerabilityMap(geometry)
        self.params = params if params is not None else HammerParams()
        self.banks: dict[tuple[int, int, int], BankState] = {}

    def bank(self, key: tuple[int, int, int]) -> BankState:
        state = self.banks.get(key)
        if state is None:
            state = BankState()
            self.banks[key] = state
        return state

    @property
    def total_activations(self) -> int:
        return sum(
            sum(b.activation_counts.values()) for b in self.banks.values()
        )

    def hammer(
        self,
        aggressors: list[int],
        reps: int,
        mode: str,
        rng: random.Random,
    ) -> list[InjectedFlip]:
        """Activate aggressor rows and draw flips in their neighbours.

        Only rows that suffer repeated re-activation disturb anything:
        in double/single-sided modes that means at least two distinct
        aggressor rows in the same bank; one-location relies on the
        controller's own closing policy instead.
        """
        if mode not in HAMMER_MODES:
            raise HammerModeError(f"unknown hammer mode {mode!r}")
        if not aggressors:
            raise HammerModeError("at least one aggressor address required")
        if reps <= 0:
            raise ValueError("reps must be positive")
        coords = [map_phys_to_dram(a, self.geometry) for a in aggressors]

        if mode == MODE_ONE_LOCATION and len(coords) != 1:
            raise HammerModeError("one_location takes exactly one aggressor")
        if mode == MODE_DOUBLE_SIDED:
            if len(coords) != 2:
                raise HammerModeError("double_sided takes exactly two aggressors")
            a, b = coords
            if a.bank_key() != b.bank_key() or abs(a.row - b.row) != 2:
                raise HammerModeError(
                    "double_sided aggressors must sandwich one victim row in one bank"
                )

        per_bank: dict[tuple[int, int, int], list[int]] = {}
        for c in coords:
            rows = per_bank.setdefault(c.bank_key(), [])
            if c.row not in rows:
                rows.append(c.row)

        hammered: list[tuple[tuple[int, int, int], int]] = []
        for key, rows in per_bank.items():
            state = self.bank(key)
            if mode == MODE_ONE_LOCATION or len(rows) >= 2:
                for row in rows:
                    state.activate(row, reps)
                    hammered.append((key, row))
            else:
                # A lone row per bank stays in the row buffer: opened once,
                # never re-activated, so it cannot disturb its neighbours.
                state.activate(rows[0], 1)

        mult = self.params.multiplier(mode)
        dose_factor = reps / self.params.dose
        flips: list[InjectedFlip] = []
        fired: set[tuple[tuple[int, int, int, int], int, int]] = set()
        for key, row in hammered:
            for victim_row in (row - 1, row + 1):
                if victim_row < 0 or victim_row >= self.geometry.rows_per_bank:
                    continue
                victim_key = (key[0], key[1], key[2], victim_row)
                for cell in self.vuln_map.cells_in_row(victim_key):
                    p = min(1.0, cell.probability * mult * dose_factor)
                    if rng.random() >= p:
                        continue
                    ident = (victim_key, cell.coord.column, cell.bit)
                    if ident in fired:
                        continue
                    fired.add(ident)
                    addr = unmap_dram_to_phys(cell.coord, self.geometry)
                    flips.append(InjectedFlip(addr, cell.bit, cell.direction, cell.coord))
        return flips
