"""Synthetic episodes with planted emotion events.

Each class has a video prototype and a subtitle prototype. Background rows
are Gaussian noise; an event of class ``e`` over ``[a, b]`` adds
``snr * prototype`` to those video rows and to a (possibly shifted) run of
subtitle rows of the same length.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .episode import Episode
from .errors import ConfigError, ParseError, PreconditionError

FORMAT_MAGIC = "emoloc-dataset"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 6
    d: int = 16
    T_range: tuple[int, int] = (32, 32)
    n_train: int = 500
    n_test: int = 100
    events_range: tuple[int, int] = (1, 4)
    event_len_range: tuple[int, int] = (3, 7)
    snr: float = 2.0
    noise: float = 1.0
    shift: int = 0
    modal_correlation: float = 0.5
    seed: int = 42
    max_retries: int = 200

    def __post_init__(self) -> None:
        for name in ("T_range", "events_range", "event_len_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.n_classes < 2 or self.d < 1:
            raise ConfigError("need n_classes >= 2 and d >= 1")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("episode counts must be non-negative")
        if self.shift < 0:
            raise ConfigError(f"shift must be >= 0, got {self.shift}")
        if self.snr < 0 or self.noise < 0:
            raise ConfigError("snr and noise must be non-negative")
        if not -1.0 <= self.modal_correlation <= 1.0:
            raise ConfigError("modal_correlation must lie in [-1, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        for name in ("T_range", "events_range", "event_len_range"):
            if name in raw:
                raw[name] = tuple(raw[name])
        return cls(**raw)


@dataclass
class Dataset:
    episodes: list[Episode]
    n_classes: int
    d: int
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]


def _place_events(rng, T: int, classes, cfg: SynthConfig):
    """Non-overlapping events in the order given, uniform over arrangements.

    Lengths are redrawn while they do not fit; the leftover rows are then
    split into k + 1 gaps by stars and bars.
    """
    k = len(classes)
    lo, hi = cfg.event_len_range
    for _ in range(cfg.max_retries):
        lengths = rng.integers(lo, hi + 1, size=k)
        slack = T - int(lengths.sum())
        if slack >= 0:
            break
    else:
        raise PreconditionError(
            f"could not fit {k} events of length {lo}..{hi} in T = {T} after {cfg.max_retries} tries"
        )
    bars = np.sort(rng.choice(slack + k, size=k, replace=False))
    placed = []
    used = 0
    for i, e in enumerate(classes):
        a = int(bars[i]) - i + used
        b = a + int(lengths[i]) - 1
        placed.append((int(e), a, b))
        used += int(lengths[i])
    return placed


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(cfg.seed)
    N, d = cfg.n_classes, cfg.d
    proto_v = rng.standard_normal((N, d))
    rho = cfg.modal_correlation
    proto_s = rho * proto_v + math.sqrt(1.0 - rho * rho) * rng.standard_normal((N, d))

    def episode(tag: str, i: int, with_gt: bool) -> Episode:
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        k = int(rng.integers(cfg.events_range[0], min(cfg.events_range[1], N) + 1))
        classes = rng.choice(N, size=k, replace=False)
        V = cfg.noise * rng.standard_normal((T, d))
        S = cfg.noise * rng.standard_normal((T, d))
        gt: dict[int, list[tuple[int, int]]] = {}
        for e, a, b in _place_events(rng, T, classes, cfg):
            V[a:b + 1] += cfg.snr * proto_v[e]
            off = int(rng.integers(-cfg.shift, cfg.shift + 1)) if cfg.shift else 0
            off = min(max(off, -a), T - 1 - b)
            S[a + off:b + off + 1] += cfg.snr * proto_s[e]
            gt.setdefault(e, []).append((a, b))
        return Episode(
            episode_id=f"{tag}-{i:05d}",
            V=V,
            S=S,
            labels=tuple(gt),
            gt_intervals=gt if with_gt else None,
        )

    meta = json.loads(json.dumps(asdict(cfg)))  # same form a reloaded file has
    train = Dataset([episode("train", i, False) for i in range(cfg.n_train)], N, d, cfg.seed, meta)
    test = Dataset([episode("test", i, True) for i in range(cfg.n_test)], N, d, cfg.seed, meta)
    return train, test


def random_baseline(episodes, seed: int = 0):
    """One uniformly random interval (over all start <= end pairs) per episode label."""
    from .inference import Detection

    rng = np.random.default_rng(seed)
    dets = []
    for ep in episodes:
        T = ep.T
        for e in ep.labels:
            k = int(rng.integers(0, T * (T + 1) // 2))
            # decode k into (start, end): rows of start have T - start entries
            start = 0
            while k >= T - start:
                k -= T - start
                start += 1
            dets.append(Detection(ep.episode_id, e, start, start + k, 1.0))
    return dets


# ---------------------------------------------------------------- file format


def _fmt_row(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def save(dataset: Dataset, path) -> None:
    lines = [
        f"{FORMAT_MAGIC} {FORMAT_VERSION}",
        f"N {dataset.n_classes}",
        f"d {dataset.d}",
        f"seed {dataset.seed}",
        f"config {json.dumps(dataset.config, sort_keys=True)}",
        f"episodes {len(dataset.episodes)}",
    ]
    for ep in dataset.episodes:
        lines.append(f"episode {ep.episode_id} T {ep.T}")
        lines.append("labels " + " ".join(str(e) for e in ep.labels))
        if ep.gt_intervals is not None:
            lines.append("gt")
            for e in sorted(ep.gt_intervals):
                for a, b in ep.gt_intervals[e]:
                    lines.append(f"interval {e} {a} {b}")
        lines.append("V")
        lines.extend(_fmt_row(r) for r in ep.V)
        lines.append("S")
        lines.extend(_fmt_row(r) for r in ep.S)
        lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, text: str, path):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.path = path

    def error(self, msg: str, line: int | None = None) -> ParseError:
        return ParseError(msg, line=self.pos if line is None else line, path=self.path)

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise self.error(f"unexpected end of file, expected {what}", self.pos + 1)
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def keyed(self, key: str) -> str:
        line = self.next(key)
        head, _, rest = line.partition(" ")
        if head != key:
            raise self.error(f"expected {key!r}, found {line[:40]!r}")
        return rest

    def integer(self, key: str) -> int:
        raw = self.keyed(key)
        try:
            return int(raw)
        except ValueError:
            raise self.error(f"{key}: not an integer: {raw!r}") from None

    def matrix(self, key: str, rows: int, cols: int) -> np.ndarray:
        if self.next(key) != key:
            raise self.error(f"expected section {key!r}")
        out = np.empty((rows, cols))
        for r in range(rows):
            parts = self.next(f"{key} row {r}").split()
            if len(parts) != cols:
                raise self.error(f"{key} row {r}: expected {cols} values, found {len(parts)}")
            try:
                out[r] = [float(x) for x in parts]
            except ValueError:
                raise self.error(f"{key} row {r}: malformed number") from None
        return out


def load(path) -> Dataset:
    rd = _Reader(Path(path).read_text(), path)
    head = rd.next("header").split()
    if len(head) != 2 or head[0] != FORMAT_MAGIC:
        raise rd.error("not an emoloc dataset file")
    if head[1] != str(FORMAT_VERSION):
        raise rd.error(f"unsupported format version {head[1]}")
    N = rd.integer("N")
    d = rd.integer("d")
    seed = rd.integer("seed")
    try:
        config = json.loads(rd.keyed("config"))
    except json.JSONDecodeError as exc:
        raise rd.error(f"config: {exc}") from None
    count = rd.integer("episodes")
    episodes = []
    for _ in range(count):
        parts = rd.keyed("episode").split()
        if len(parts) != 3 or parts[1] != "T":
            raise rd.error("episode header must be 'episode <id> T <length>'")
        ep_id = parts[0]
        try:
            T = int(parts[2])
        except ValueError:
            raise rd.error(f"bad T {parts[2]!r}") from None
        try:
            labels = tuple(int(x) for x in rd.keyed("labels").split())
        except ValueError:
            raise rd.error("labels must be integers") from None
        gt = None
        if rd.pos < len(rd.lines) and rd.lines[rd.pos] == "gt":
            rd.pos += 1
            gt = {}
            while rd.pos < len(rd.lines) and rd.lines[rd.pos].startswith("interval "):
                try:
                    e, a, b = (int(x) for x in rd.next("interval").split()[1:])
                except ValueError:
                    raise rd.error("interval must be 'interval <label> <start> <end>'") from None
                gt.setdefault(e, []).append((a, b))
        V = rd.matrix("V", T, d)
        S = rd.matrix("S", T, d)
        if rd.next("end") != "end":
            raise rd.error("expected 'end'")
        try:
            episodes.append(Episode(ep_id, V, S, labels, gt))
        except PreconditionError as exc:
            raise rd.error(str(exc)) from None
    if rd.pos != len(rd.lines):
        raise rd.error("trailing content after last episode", rd.pos + 1)
    return Dataset(episodes, N, d, seed, config)
