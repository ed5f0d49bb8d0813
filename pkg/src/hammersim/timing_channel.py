"""Row-buffer timing side channel for picking hammerable address pairs.

Alternating accesses to two rows of the same bank keep evicting each other
from the row buffer, so their paired access latency sits above the conflict
threshold; any other pair arrangement stays below it.  The model draws a
latency for the pair's true arrangement from one of two seeded lobes and
classifies purely from the drawn cycle count, so misclassification falls out
of the configured rates rather than from peeking at ground truth.

The lobe shapes are one choice among many consistent with the published
per-class classification rates; only the threshold rule and the rates are
contractual.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass

from .dram_model import DramGeometry, map_phys_to_dram

CONFLICT_THRESHOLD_CYCLES = 360


class ChannelError(Exception):
    pass


class PairSelectionError(ChannelError):
    """No pair classified as conflicting within the attempt budget."""


@dataclass(frozen=True)
class ChannelModel:
    """Classification threshold and per-class accuracy rates."""

    threshold_cycles: int = CONFLICT_THRESHOLD_CYCLES
    p_high_given_conflict: float = 1.0
    p_low_given_other: float = 1.0
    high_spread: int = 140
    low_spread: int = 120

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_high_given_conflict <= 1.0:
            raise ValueError("p_high_given_conflict must be within [0, 1]")
        if not 0.0 <= self.p_low_given_other <= 1.0:
            raise ValueError("p_low_given_other must be within [0, 1]")
        if self.threshold_cycles <= self.low_spread + 1:
            raise ValueError("low lobe would cross below zero cycles")


@dataclass(frozen=True)
class LatencySample:
    """One paired-access measurement and its classification."""

    addr_a: int
    addr_b: int
    cycles: int
    classified_conflict: bool
    true_conflict: bool


def is_row_conflict_pair(addr_a: int, addr_b: int, geometry: DramGeometry) -> bool:
    """Ground truth: same dimm/rank/bank, different rows."""
    ca = map_phys_to_dram(addr_a, geometry)
    cb = map_phys_to_dram(addr_b, geometry)
    return ca.bank_key() == cb.bank_key() and ca.row != cb.row


def sample_latency_phys(
    addr_a: int,
    addr_b: int,
    geometry: DramGeometry,
    model: ChannelModel,
    rng: random.Random,
) -> LatencySample:
    """Draw a paired-access latency for two physical addresses."""
    truth = is_row_conflict_pair(addr_a, addr_b, geometry)
    if truth:
        above = rng.random() < model.p_high_given_conflict
    else:
        above = rng.random() >= model.p_low_given_other
    if above:
        cycles = model.threshold_cycles + int(
            rng.triangular(0, model.high_spread, model.high_spread * 0.25)
        )
    else:
        cycles = (
            model.threshold_cycles
            - 1
            - int(rng.triangular(0, model.low_spread, model.low_spread * 0.25))
        )
    classified = cycles >= model.threshold_cycles
    return LatencySample(addr_a, addr_b, cycles, classified, truth)


def sample_latency(os_model, vaddr_a: int, vaddr_b: int, model: ChannelModel, rng: random.Random) -> LatencySample:
    """Virtual-address wrapper; translations honour the TLB."""
    pa = os_model.translate(vaddr_a)
    pb = os_model.translate(vaddr_b)
    if pa is None or pb is None:
        raise ChannelError("cannot time an unmapped address")
    geometry = os_model.dram.geometry
    byte_a = pa * 4096 + (vaddr_a & 4095)
    byte_b = pb * 4096 + (vaddr_b & 4095)
    return sample_latency_phys(byte_a, byte_b, geometry, model, rng)


def select_hammer_pair(
    os_model,
    page_vaddrs: list[int],
    model: ChannelModel,
    rng: random.Random,
    *,
    max_attempts: int = 5000,
) -> tuple[tuple[int, int], int, list[LatencySample]]:
    """Probe random page pairs until one classifies as a row conflict.

    Returns the virtual pair, the attempt count, and the samples drawn.
    Raises PairSelectionError when the attempt budget runs out.
    """
    if len(page_vaddrs) < 2:
        raise PairSelectionError("need at least two pages to time")
    samples: list[LatencySample] = []
    for attempt in range(1, max_attempts + 1):
        a, b = rng.sample(page_vaddrs, 2)
        sample = sample_latency(os_model, a, b, model, rng)
        samples.append(sample)
        if sample.classified_conflict:
            return (a, b), attempt, samples
    raise PairSelectionError(
        f"no conflicting pair classified within {max_attempts} attempts"
    )


def samples_to_csv(samples, stream) -> None:
    writer = csv.writer(stream)
    writer.writerow(["addr_a", "addr_b", "cycles", "classified_conflict", "true_conflict"])
    for s in samples:
        writer.writerow(
            [s.addr_a, s.addr_b, s.cycles, int(s.classified_conflict), int(s.true_conflict)]
        )
