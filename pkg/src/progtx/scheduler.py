"""Turn a stream of per-slot bit budgets into a transmission plan.

Progressive policies stream their units (packets or RVQ stages) in order and
may split a unit across slots; a decode event fires in every slot where at
least one unit finishes. The non-progressive baseline has no memory across
slots: in each slot it sends the largest quality level that fits whole, or
nothing at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ProgressiveMasking:
    group_size: int = 4
    n_max: int = 32
    kind: str = field(default="progressive_masking", init=False)

    def __post_init__(self):
        if self.group_size < 1 or self.n_max < 1:
            raise ValueError("group_size and n_max must be >= 1")


@dataclass(frozen=True)
class ProgressiveRVQ:
    bpi: int = 8
    m_max: int = 10
    kind: str = field(default="progressive_rvq", init=False)

    def __post_init__(self):
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")


@dataclass(frozen=True)
class NonProgressive:
    """One-shot codec with rate control.

    ``levels`` are target stream sizes in bits, smallest first. For each
    target the encoder picks the (channels kept, step knob) pair from the
    search grid with the best PSNR whose stream fits.
    """

    levels: tuple[int, ...] = (300, 380, 480, 600)
    steps: tuple[float, ...] = (0.5, 0.7, 1.0, 1.4, 2.0, 2.8, 4.0, 5.6, 8.0)
    max_keep: int = 32
    kind: str = field(default="nonprogressive", init=False)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("at least one quality level required")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("quality level targets must be strictly increasing")
        if not self.steps or self.max_keep < 1:
            raise ValueError("empty rate-control search grid")


Policy = ProgressiveMasking | ProgressiveRVQ | NonProgressive


@dataclass
class TransmissionPlan:
    kind: str
    bits_used: np.ndarray  # per slot in the planning window
    unit_slots: list[int | None]  # completion slot per unit (progressive)
    decode_slots: list[int]  # strictly increasing
    decode_units: list[int]  # units delivered so far (or level index + 1) at each event
    complete: bool
    level: int | None = None  # non-progressive: delivered quality level, 0-based

    @property
    def n_slots(self) -> int:
        return len(self.bits_used)

    def slots_occupied(self) -> int:
        """Slots the image held the channel: through completion, else the whole window."""
        return self.decode_slots[-1] + 1 if self.complete else self.n_slots

    def records(self) -> list[dict]:
        out, done, k = [], 0, 0
        for s in range(self.slots_occupied()):
            if k < len(self.decode_slots) and self.decode_slots[k] == s:
                done = self.decode_units[k]
                k += 1
            out.append({"slot": s, "bits_used": int(self.bits_used[s]),
                        "units_completed": done, "decodable": done > 0})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


def _check_sizes(sizes: Sequence[int]) -> np.ndarray:
    arr = np.asarray(sizes, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("payload must contain at least one unit")
    if np.any(arr < 0):
        raise ValueError("unit sizes must be non-negative")
    return arr


def plan_progressive(sizes: Sequence[int], budgets: Sequence[int], kind: str = "progressive"
                     ) -> TransmissionPlan:
    sizes = _check_sizes(sizes)
    budgets = np.asarray(budgets, dtype=np.int64)
    cum_budget = np.cumsum(budgets)
    cum_units = np.cumsum(sizes)
    # unit i is done in the first slot whose cumulative budget covers it
    done_at = np.searchsorted(cum_budget, cum_units, side="left")
    unit_slots = [int(s) if s < len(budgets) else None for s in done_at]
    total = int(cum_units[-1])
    sent_before = np.concatenate([[0], cum_budget[:-1]]) if len(budgets) else np.zeros(0, np.int64)
    bits_used = np.clip(total - sent_before, 0, budgets)
    complete = unit_slots[-1] is not None
    if complete:
        bits_used = bits_used[: unit_slots[-1] + 1]
    decode_slots, decode_units = [], []
    for i, s in enumerate(unit_slots):
        if s is None:
            break
        if decode_slots and decode_slots[-1] == s:
            decode_units[-1] = i + 1
        else:
            decode_slots.append(s)
            decode_units.append(i + 1)
    return TransmissionPlan(kind, bits_used, unit_slots, decode_slots, decode_units, complete)


def plan_nonprogressive(level_sizes: Sequence[int], budgets: Sequence[int]) -> TransmissionPlan:
    sizes = _check_sizes(level_sizes)
    if np.any(np.diff(sizes) <= 0):
        raise ValueError("quality level sizes must be strictly increasing")
    budgets = np.asarray(budgets, dtype=np.int64)
    fits = budgets >= sizes[0]
    if not fits.any():
        return TransmissionPlan("nonprogressive", np.zeros(len(budgets), np.int64), [None],
                                [], [], False)
    slot = int(np.argmax(fits))
    level = int(np.searchsorted(sizes, budgets[slot], side="right")) - 1
    bits = np.zeros(slot + 1, np.int64)
    bits[slot] = sizes[level]
    return TransmissionPlan("nonprogressive", bits, [slot], [slot], [level + 1], True, level)


def plan_image(policy: Policy, payload: Sequence[int], budgets: Sequence[int]) -> TransmissionPlan:
    """Plan one image. ``payload`` is unit sizes (progressive) or level sizes (baseline)."""
    if isinstance(policy, NonProgressive):
        return plan_nonprogressive(payload, budgets)
    return plan_progressive(payload, budgets, policy.kind)


def first_decode_slot(plan: TransmissionPlan) -> int | None:
    return plan.decode_slots[0] if plan.decode_slots else None


def completion_slot(plan: TransmissionPlan) -> int | None:
    return plan.decode_slots[-1] if plan.complete else None
