from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError

Interval = tuple[int, int]


@dataclass
class Episode:
    """One clip: co-occurring video segment and subtitle feature rows.

    ``gt_intervals`` maps an emotion id to inclusive (start, end) segment
    intervals and is only populated for evaluation data.
    """

    episode_id: str
    V: np.ndarray
    S: np.ndarray
    labels: tuple[int, ...]
    gt_intervals: dict[int, list[Interval]] | None = field(default=None)

    def __post_init__(self) -> None:
        # ids are written unquoted into dataset and detection files
        if not self.episode_id or any(c.isspace() or c == "," for c in self.episode_id):
            raise PreconditionError(f"episode id {self.episode_id!r} must be non-empty without spaces or commas")
        self.V = np.asarray(self.V, dtype=np.float64)
        self.S = np.asarray(self.S, dtype=np.float64)
        self.labels = tuple(sorted(set(int(e) for e in self.labels)))
        if self.V.ndim != 2 or self.V.shape != self.S.shape:
            raise PreconditionError(
                f"episode {self.episode_id}: V {self.V.shape} and S {self.S.shape} must share T x d"
            )
        if self.gt_intervals is not None:
            T = self.T
            fixed = {}
            for e, spans in self.gt_intervals.items():
                fixed[int(e)] = [(int(a), int(b)) for a, b in spans]
                for a, b in fixed[int(e)]:
                    if not 0 <= a <= b < T:
                        raise PreconditionError(
                            f"episode {self.episode_id}: interval ({a}, {b}) outside [0, {T - 1}]"
                        )
            self.gt_intervals = fixed

    @property
    def T(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.episode_id == other.episode_id
            and self.labels == other.labels
            and self.gt_intervals == other.gt_intervals
            and np.array_equal(self.V, other.V)
            and np.array_equal(self.S, other.S)
        )
