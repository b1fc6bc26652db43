"""
Performance accounting: the PerfReport written after a run from the
per-rank timers, and the model flop rate derived from P2P pair counters.
"""

from dataclasses import dataclass, field
from typing import Dict

from fmm.constants import Flops
from fmm.errors import InvalidInputError
from fmm.timers import Category


@dataclass
class PerfReport:
    """
    Timing breakdown and model flop count of one run.

    Attributes:
        categories: category -> seconds (max over ranks)
        model_flops: 70 * Biot-Savart pairs + 104 * stretching pairs, all ranks
        wall_time: seconds
        ranks: rank count P
        comm_total: total exchange time (max over ranks)
    """
    categories: Dict[str, float] = field(default_factory=lambda: {name: 0.0 for name in Category.ALL})
    model_flops: int = 0
    wall_time: float = 0.0
    ranks: int = 1
    comm_total: float = 0.0

    @classmethod
    def from_timers(cls, timers_per_rank, pairs_bs, pairs_st, wall_time):
        """Reduce per-rank timers by max, the way wall-clock categories combine."""
        timers_per_rank = list(timers_per_rank)
        categories = {name: max((t.durations.get(name, 0.0) for t in timers_per_rank), default=0.0)
                      for name in Category.ALL}
        comm_total = max((t.comm_total for t in timers_per_rank), default=0.0)
        flops = Flops.BIOT_SAVART * int(pairs_bs) + Flops.STRETCHING * int(pairs_st)
        return cls(categories, flops, wall_time, max(1, len(timers_per_rank)), comm_total)

    @property
    def unattributed(self):
        return self.wall_time - sum(self.categories.values())

    @property
    def flop_rate(self):
        return self.model_flops / self.wall_time if self.wall_time > 0 else 0.0

    def to_lines(self):
        """``category=duration_seconds`` lines of the report file."""
        lines = [f"{name}={self.categories.get(name, 0.0):.6f}" for name in Category.ALL]
        lines += [
            f"unattributed={self.unattributed:.6f}",
            f"comm_total={self.comm_total:.6f}",
            f"wall_time={self.wall_time:.6f}",
            f"ranks={self.ranks}",
            f"model_flops={self.model_flops}",
            f"flop_rate={self.flop_rate:.6e}",
        ]
        return lines

    def write(self, path, header_lines=()):
        with open(path, "w", encoding="utf-8") as f:
            for line in header_lines:
                f.write(f"# {line}\n")
            for line in self.to_lines():
                f.write(line + "\n")
        return path


def flop_model(pair_count_bs, pair_count_st, wall_time, ranks=1):
    """
    Model flop rate (70 pairs_bs + 104 pairs_st) / wall_time summed over ranks.

    Args:
        pair_count_bs: Biot-Savart pairs per rank
        pair_count_st: stretching pairs per rank
        wall_time: seconds, > 0
        ranks: number of ranks contributing the same pair counts

    Returns:
        float: flop/s
    """
    if not wall_time > 0:
        raise InvalidInputError(f"wall_time must be > 0, got {wall_time}")
    if ranks < 1:
        raise InvalidInputError(f"ranks must be >= 1, got {ranks}")
    flops = Flops.BIOT_SAVART * float(pair_count_bs) + Flops.STRETCHING * float(pair_count_st)
    return ranks * flops / wall_time
