"""Liveness-based planning of working buffers for static-memory inference."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Step:
    """One program point: which tensors it reads and the tensor it produces."""

    name: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ArenaPlan:
    buffer_sizes: list[int]
    assignment: dict[int, int]  # tensor id -> buffer index
    peak_live_bytes: int
    total_bytes: int


def plan_memory(tensor_sizes: list[int], steps: list[Step],
                keep_alive: tuple[int, ...] = ()) -> ArenaPlan:
    """Assign tensors to reusable buffers so no two live tensors share one.

    A tensor is live from the step that produces it (tensors no step produces
    are treated as program inputs, live from the start) through its last use.
    Tensors in ``keep_alive`` stay live to the end. Assignment is first-fit
    in production order; a buffer's size is the largest tensor it ever holds.
    """
    n = len(tensor_sizes)
    produced_at = [-1] * n
    last_use = [-1] * n
    for s, step in enumerate(steps):
        if not 0 <= step.output < n:
            raise ValueError(f"step {step.name}: output tensor {step.output} unknown")
        produced_at[step.output] = s
        for t in step.inputs:
            if not 0 <= t < n:
                raise ValueError(f"step {step.name}: input tensor {t} unknown")
            last_use[t] = max(last_use[t], s)
    for t in keep_alive:
        last_use[t] = len(steps)
    for t in range(n):
        # a produced-but-never-read tensor still exists at its producing step
        last_use[t] = max(last_use[t], produced_at[t])

    def live_at(t: int, s: int) -> bool:
        return produced_at[t] <= s <= last_use[t]

    peak = 0
    for s in range(len(steps)):
        peak = max(peak, sum(tensor_sizes[t] for t in range(n) if live_at(t, s)))

    order = sorted(range(n), key=lambda t: (produced_at[t], t))
    buffer_sizes: list[int] = []
    buffer_free_at: list[int] = []  # step index after which the buffer is free
    assignment: dict[int, int] = {}
    for t in order:
        start = produced_at[t]
        chosen = None
        for b in range(len(buffer_sizes)):
            if buffer_free_at[b] < start:
                chosen = b
                break
        if chosen is None:
            chosen = len(buffer_sizes)
            buffer_sizes.append(0)
            buffer_free_at.append(-2)
        assignment[t] = chosen
        buffer_sizes[chosen] = max(buffer_sizes[chosen], tensor_sizes[t])
        buffer_free_at[chosen] = last_use[t]

    # planner invariant: simultaneously live tensors never share a buffer
    for a in range(n):
        for b in range(a + 1, n):
            if assignment[a] == assignment[b]:
                overlap = (produced_at[a] <= last_use[b] and produced_at[b] <= last_use[a])
                if overlap:
                    raise AssertionError(
                        f"planner bug: tensors {a} and {b} share buffer {assignment[a]}"
                    )

    return ArenaPlan(buffer_sizes, assignment, peak, sum(buffer_sizes))


class Arena:
    """Tracks buffer acquisition so tests can prove inference allocates nothing.

    All acquisition happens while the arena is open; ``freeze()`` closes it
    and any further acquisition raises.
    """

    def __init__(self) -> None:
        self.acquired_bytes = 0
        self.acquisitions = 0
        self.frozen = False

    def acquire(self, nbytes: int) -> None:
        if self.frozen:
            raise RuntimeError("arena is frozen: inference must not acquire memory")
        self.acquisitions += 1
        self.acquired_bytes += int(nbytes)

    def freeze(self) -> None:
        self.frozen = True
