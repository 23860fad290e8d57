from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dcin import DcinModel, classify, dcin_forward
from .episode import Episode
from .errors import ConfigError, ParseError


@dataclass(frozen=True)
class Detection:
    episode_id: str
    emotion: int
    start: int
    end: int
    confidence: float

    def line(self) -> str:
        return f"{self.episode_id},{self.emotion},{self.start},{self.end},{self.confidence!r}"


def matching_scores(model: DcinModel, episode: Episode) -> np.ndarray:
    """Per-segment, per-emotion score: mean of the video and subtitle class probabilities."""
    out = dcin_forward(model, episode)
    pv = classify(out.VL, "video", model.classifiers).value
    ps = classify(episode.S, "subtitle", model.classifiers).value
    return 0.5 * (pv + ps)


def default_thresholds(n_classes: int) -> tuple[float, float]:
    return 2.0 / n_classes, 1.2 / n_classes


def detect(M: np.ndarray, gamma1: float, gamma2: float, episode_id: str = "") -> list[Detection]:
    """Threshold emotions on their peak score, then grow one interval around each peak."""
    if not 0.0 <= gamma2 <= gamma1 <= 1.0:
        raise ConfigError(f"need 0 <= gamma2 <= gamma1 <= 1, got gamma1={gamma1}, gamma2={gamma2}")
    M = np.asarray(M, dtype=np.float64)
    T, N = M.shape
    dets = []
    for e in range(N):
        col = M[:, e]
        peak = int(np.argmax(col))
        if not col[peak] > gamma1:
            continue
        lo = peak
        while lo > 0 and col[lo - 1] > gamma2:
            lo -= 1
        hi = peak
        while hi < T - 1 and col[hi + 1] > gamma2:
            hi += 1
        dets.append(Detection(episode_id, e, lo, hi, float(col[peak])))
    return dets


def infer(model: DcinModel, episodes, gamma1=None, gamma2=None) -> list[Detection]:
    g1, g2 = default_thresholds(model.config.n_classes)
    gamma1 = g1 if gamma1 is None else gamma1
    gamma2 = g2 if gamma2 is None else gamma2
    dets = []
    for ep in episodes:
        dets.extend(detect(matching_scores(model, ep), gamma1, gamma2, ep.episode_id))
    return dets


def write_detections(dets, path) -> None:
    Path(path).write_text("".join(d.line() + "\n" for d in dets))


def read_detections(path) -> list[Detection]:
    dets = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 5:
            raise ParseError(f"expected 5 comma-separated fields, found {len(parts)}", n, path)
        try:
            dets.append(Detection(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4])))
        except ValueError as exc:
            raise ParseError(str(exc), n, path) from None
    return dets
