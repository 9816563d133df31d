"""Non-conservative spring-block cellular automaton on a square lattice.

Scalar reference case of the coupled threshold-oscillator family: a force
grid is loaded uniformly until the maximal site reaches the threshold, then
all critical sites topple simultaneously, each resetting to zero and handing
a fraction of its pre-topple force to its nearest neighbors. Open boundaries:
force leaving the lattice is lost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ProtocolError(RuntimeError):
    """Load/relax called in the wrong lattice state."""


class RunawayError(RuntimeError):
    """Relaxation exceeded the generation cap."""


DEFAULT_GENERATION_CAP = 1_000_000


@dataclass
class OfcLattice:
    """Square force lattice with threshold and neighbor transfer fraction."""

    force: np.ndarray
    threshold: float
    transfer: float

    def __post_init__(self) -> None:
        f = self.force
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ValueError("force grid must be square")
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise ValueError("forces must be finite and >= 0")
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        # The zero-transfer corner case is allowed: topples then never propagate.
        if not 0.0 <= self.transfer <= 0.25:
            raise ValueError("transfer fraction must lie in [0, 0.25]")

    @property
    def side(self) -> int:
        return self.force.shape[0]

    @classmethod
    def random(
        cls, side: int, transfer: float, threshold: float = 1.0, seed: int = 0
    ) -> "OfcLattice":
        """Uniform initial forces on [0, threshold)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(
            force=rng.uniform(0.0, threshold, size=(side, side)),
            threshold=threshold,
            transfer=transfer,
        )


@dataclass(frozen=True)
class AvalancheTrace:
    """Toppled sites per generation; size counts every topple event."""

    generations: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.generations)

    @property
    def n_generations(self) -> int:
        return len(self.generations)


def uniform_load(lattice: OfcLattice) -> tuple[OfcLattice, float]:
    """Add the same load everywhere so the maximal site reaches the threshold.

    Mutates the lattice in place and returns it with the load applied.
    A site already strictly beyond the threshold means relaxation was not
    completed and is a protocol error; an exact hit loads zero.
    """
    peak = float(lattice.force.max())
    if peak > lattice.threshold:
        raise ProtocolError("uniform_load called while a critical site exists")
    load = lattice.threshold - peak
    lattice.force += load
    return lattice, load


def relax(lattice: OfcLattice, generation_cap: int = DEFAULT_GENERATION_CAP) -> AvalancheTrace:
    """Topple all critical sites generation by generation until none remain.

    Within a generation the toppling set is fixed before any force moves:
    simultaneously critical sites do not feed each other until the next
    generation. The cap is a safety net; it cannot trigger for transfer
    fractions <= 0.25 on open boundaries.
    """
    f = lattice.force
    fc = lattice.threshold
    a = lattice.transfer
    crit = f >= fc
    if not crit.any():
        raise ProtocolError("relax requires at least one critical site")
    generations: list[np.ndarray] = []
    while crit.any():
        if len(generations) >= generation_cap:
            raise RunawayError(f"relaxation exceeded {generation_cap} generations")
        generations.append(np.argwhere(crit))
        outgoing = np.where(crit, a * f, 0.0)
        f[crit] = 0.0
        f[1:, :] += outgoing[:-1, :]
        f[:-1, :] += outgoing[1:, :]
        f[:, 1:] += outgoing[:, :-1]
        f[:, :-1] += outgoing[:, 1:]
        crit = f >= fc
    return AvalancheTrace(tuple(generations))


def run_ofc(
    lattice: OfcLattice,
    num_avalanches: int,
    *,
    warmup: int | None = None,
    generation_cap: int = DEFAULT_GENERATION_CAP,
) -> list[int]:
    """Alternate loading and relaxation; return post-warm-up avalanche sizes.

    The warm-up default of 10 * side^2 avalanches removes the initial
    transient before statistics are collected.
    """
    if num_avalanches < 1:
        raise ValueError("num_avalanches must be >= 1")
    if warmup is None:
        warmup = 10 * lattice.side**2
    sizes: list[int] = []
    for step in range(warmup + num_avalanches):
        uniform_load(lattice)
        trace = relax(lattice, generation_cap=generation_cap)
        if lattice.force.max() >= lattice.threshold:
            raise AssertionError("post-relaxation force at or above threshold")
        if step >= warmup:
            sizes.append(trace.size)
    return sizes
