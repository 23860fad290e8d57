"""Cross-modal consensus learning and the training loop.

For each video-level label the model retrieves its most relevant video
segment and subtitle sentence, looks up the partner in the other modality
(optionally searching a +/-R window), and is trained so that the two
modalities agree on the emotion distribution and on the location.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dcin import DcinModel, classify, context_sensitive_loss, dcin_forward
from .episode import Episode
from .errors import ConfigError, PreconditionError, TrainingError

log = logging.getLogger(__name__)

LOSS_PARTS = ("L_cs", "L_cmc", "L_vc", "L_sc")
CE_EPS = 1e-12


@dataclass(frozen=True)
class CclConfig:
    beta: float = 0.1
    relax: int = 2
    mode: str = "mask"
    tau: float = 0.1
    lambdas: tuple[float, float, float, float] = (0.001, 1.0, 1.0, 0.7)
    lr: float = 1e-4
    batch_size: int = 32
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.relax < 0:
            raise ConfigError(f"relax must be >= 0, got {self.relax}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.mode not in ("mask", "soft"):
            raise ConfigError(f"mode must be 'mask' or 'soft', got {self.mode!r}")
        if len(self.lambdas) != 4 or any(w < 0 for w in self.lambdas):
            raise ConfigError(f"lambdas must be four non-negative weights, got {self.lambdas}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass
class RetrievalResult:
    """A selection over rows ``[start, start + n)`` of a length-``length`` sequence.

    ``weights`` picks the row(s) used downstream (one-hot in mask mode).
    ``index_weights`` is the differentiable distribution behind ``soft_index``.
    """

    emotion: int
    index: int
    start: int
    length: int
    weights: Tensor
    index_weights: Tensor
    feature: Tensor
    soft_index: Tensor

    def gather(self, M) -> Tensor:
        n = self.weights.shape[1]
        M = ad.as_tensor(M)
        rows = M if (self.start == 0 and n == M.shape[0]) else ad.slice_rows(M, self.start, self.start + n)
        return ad.matmul(self.weights, rows)

    @property
    def full_weights(self) -> np.ndarray:
        w = np.zeros(self.length)
        w[self.start:self.start + self.weights.shape[1]] = self.weights.value[0]
        return w


def _one_hot(n: int, i: int) -> Tensor:
    w = np.zeros((1, n))
    w[0, i] = 1.0
    return Tensor(w)


def _positions(start: int, n: int) -> Tensor:
    return Tensor(np.arange(start, start + n, dtype=np.float64)[:, None])


def retrieve_most_relevant(P, e: int, features, mode: str = "mask", tau: float = 0.1) -> RetrievalResult:
    """Pick the row of ``features`` whose class-``e`` probability is highest."""
    P, features = ad.as_tensor(P), ad.as_tensor(features)
    T, N = P.shape
    if not 0 <= e < N:
        raise IndexError(f"emotion id {e} out of range for {N} classes")
    scores = ad.column(P, e)
    hard = int(np.argmax(scores.value[0]))
    index_w = ad.softmax_rows(ad.scale(scores, 1.0 / tau))
    weights = _one_hot(T, hard) if mode == "mask" else index_w
    return RetrievalResult(
        emotion=e,
        index=hard,
        start=0,
        length=T,
        weights=weights,
        index_weights=index_w,
        feature=ad.matmul(weights, features),
        soft_index=ad.matmul(index_w, _positions(0, T)),
    )


def alignment_relaxation(
    anchor_feature,
    anchor_index: int,
    other_stream,
    R: int,
    beta: float,
    mode: str = "mask",
    tau: float = 0.1,
    emotion: int = -1,
    diagnostics: Counter | None = None,
) -> RetrievalResult:
    """Best partner of the anchor within +/-R positions of the other stream.

    Candidates score cos(anchor, row_q) - beta * |anchor_index - q|.
    """
    anchor_feature, other_stream = ad.as_tensor(anchor_feature), ad.as_tensor(other_stream)
    T = other_stream.shape[0]
    if not 0 <= anchor_index < T:
        raise IndexError(f"anchor index {anchor_index} outside [0, {T - 1}]")
    if anchor_feature.value.ndim == 1 and anchor_feature.node is None:
        anchor_feature = Tensor(anchor_feature.value[None, :])
    if R == 0:
        w = _one_hot(1, 0)
        return RetrievalResult(
            emotion=emotion,
            index=anchor_index,
            start=anchor_index,
            length=T,
            weights=w,
            index_weights=w,
            feature=ad.slice_rows(other_stream, anchor_index, anchor_index + 1),
            soft_index=Tensor(np.array([[float(anchor_index)]])),
        )
    lo = max(0, anchor_index - R)
    hi = min(T - 1, anchor_index + R)
    n = hi - lo + 1
    window = ad.slice_rows(other_stream, lo, hi + 1) if n != T else other_stream
    if diagnostics is not None:
        zero_rows = int(np.count_nonzero(~np.any(window.value, axis=1)))
        if not np.any(anchor_feature.value):
            zero_rows = n
        if zero_rows:
            diagnostics["zero_norm_cosine"] += zero_rows
    penalty = beta * np.abs(np.arange(lo, hi + 1) - anchor_index, dtype=np.float64)[None, :]
    score = ad.sub(ad.cosine_rows(anchor_feature, window), Tensor(penalty))
    hard_local = int(np.argmax(score.value[0]))
    index_w = ad.softmax_rows(ad.scale(score, 1.0 / tau))
    weights = _one_hot(n, hard_local) if mode == "mask" else index_w
    return RetrievalResult(
        emotion=emotion,
        index=lo + hard_local,
        start=lo,
        length=T,
        weights=weights,
        index_weights=index_w,
        feature=ad.matmul(weights, window),
        soft_index=ad.matmul(index_w, _positions(lo, n)),
    )


def _pseudo_label(row: Tensor, key, cache: dict | None) -> np.ndarray:
    if cache is None:
        return row.value
    return cache.setdefault(key, row.value.copy())


def consensus_loss(target_row, pred_row) -> Tensor:
    """Cross-entropy of ``pred_row`` against the detached pseudo-label ``target_row``."""
    target = ad.as_tensor(target_row).value
    pred = ad.as_tensor(pred_row)
    if target.shape != pred.shape:
        raise ValueError(f"consensus_loss: {target.shape} vs {pred.shape}")
    return ad.scale(ad.sum_all(ad.mul(Tensor(target), ad.log(pred, CE_EPS))), -1.0)


def index_consensus_losses(res_ve, res_vs, res_se, res_sv) -> tuple[Tensor, Tensor]:
    """Squared gaps between soft indices, each divided by the sequence length."""
    T = res_ve.length
    L_vc = ad.square(ad.scale(ad.sub(res_ve.soft_index, res_vs.soft_index), 1.0 / T))
    L_sc = ad.square(ad.scale(ad.sub(res_se.soft_index, res_sv.soft_index), 1.0 / T))
    return ad.sum_all(L_vc), ad.sum_all(L_sc)


def episode_loss(
    model: DcinModel,
    episode: Episode,
    cfg: CclConfig,
    diagnostics: Counter | None = None,
    pseudo_labels: dict | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted training objective for one episode; returns (total, parts).

    Pseudo-label rows are constants. Passing a ``pseudo_labels`` dict records
    them on first use and replays them afterwards, which pins the objective
    that reverse mode differentiates (used by finite-difference checks).
    """
    if not episode.labels:
        raise PreconditionError(f"episode {episode.episode_id} has no labels")
    N = model.config.n_classes
    for e in episode.labels:
        if not 0 <= e < N:
            raise PreconditionError(f"episode {episode.episode_id}: label {e} not in [0, {N})")
    out = dcin_forward(model, episode)
    clf = model.classifiers
    P0 = classify(out.V0, "video", clf)
    PV = classify(out.VL, "video", clf)
    PS = classify(Tensor(episode.S), "subtitle", clf)
    S = Tensor(episode.S)

    L_cs = context_sensitive_loss(P0, PV, model.config.margin)
    cmc_terms, vc_terms, sc_terms = [], [], []
    for e in episode.labels:
        ve = retrieve_most_relevant(PV, e, out.VL, cfg.mode, cfg.tau)
        se = retrieve_most_relevant(PS, e, S, cfg.mode, cfg.tau)
        sv = alignment_relaxation(ve.feature, ve.index, S, cfg.relax, cfg.beta,
                                  cfg.mode, cfg.tau, e, diagnostics)
        vs = alignment_relaxation(se.feature, se.index, out.VL, cfg.relax, cfg.beta,
                                  cfg.mode, cfg.tau, e, diagnostics)
        t_v = _pseudo_label(ve.gather(PV), (e, "video"), pseudo_labels)
        t_s = _pseudo_label(se.gather(PS), (e, "subtitle"), pseudo_labels)
        cmc_terms.append(consensus_loss(t_v, sv.gather(PS)))
        cmc_terms.append(consensus_loss(t_s, vs.gather(PV)))
        L_vc, L_sc = index_consensus_losses(ve, vs, se, sv)
        vc_terms.append(L_vc)
        sc_terms.append(L_sc)

    inv = 1.0 / len(episode.labels)
    parts = {
        "L_cs": L_cs,
        "L_cmc": ad.scale(_sum(cmc_terms), inv),
        "L_vc": ad.scale(_sum(vc_terms), inv),
        "L_sc": ad.scale(_sum(sc_terms), inv),
    }
    total = None
    for w, name in zip(cfg.lambdas, LOSS_PARTS):
        term = ad.scale(parts[name], w)
        total = term if total is None else ad.add(total, term)
    return total, parts


def _sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def loss_and_grads(model: DcinModel, episode: Episode, cfg: CclConfig, diagnostics=None):
    """Returns (part values, total value, gradient per parameter name)."""
    tape = Tape()
    bound_model, bound = model.bind(tape)
    total, parts = episode_loss(bound_model, episode, cfg, diagnostics)
    values = {k: v.item() for k, v in parts.items()}
    total_value = total.item()
    if total.node is None:
        grads = {k: np.zeros(t.shape) for k, t in bound.items()}
    else:
        g = ad.backward(tape, total)
        grads = {k: g[t.node] if t.node in g else np.zeros(t.shape) for k, t in bound.items()}
    return values, total_value, grads


# ---------------------------------------------------------------- optimization


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    L_cs: float
    L_cmc: float
    L_vc: float
    L_sc: float
    total: float
    diagnostics: dict = field(default_factory=dict)

    CSV_HEADER = "epoch,L_cs,L_cmc,L_vc,L_sc,total"

    def csv(self) -> str:
        return f"{self.epoch},{self.L_cs!r},{self.L_cmc!r},{self.L_vc!r},{self.L_sc!r},{self.total!r}"


def train(
    model: DcinModel,
    dataset: list[Episode],
    cfg: CclConfig,
    epochs: int,
    seed: int = 0,
    on_epoch=None,
) -> list[EpochRecord]:
    """Mini-batch Adam on the mean episode loss. Updates ``model`` in place."""
    if not dataset:
        raise PreconditionError("training dataset is empty")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    history: list[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(dataset))
        sums = dict.fromkeys(LOSS_PARTS, 0.0)
        sums["total"] = 0.0
        diag: Counter = Counter()
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for idx in batch:
                ep = dataset[idx]
                values, total, grads = loss_and_grads(model, ep, cfg, diag)
                for name, val in (*values.items(), ("total", total)):
                    if not math.isfinite(val):
                        raise TrainingError(
                            f"epoch {epoch}: non-finite {name} on episode {ep.episode_id}"
                        )
                    sums[name] += val
                for k, g in grads.items():
                    acc[k] += g
            inv = 1.0 / len(batch)
            opt.step({k: g * inv for k, g in acc.items()})
        n = len(dataset)
        rec = EpochRecord(epoch, *(sums[k] / n for k in (*LOSS_PARTS, "total")),
                          diagnostics=dict(diag))
        history.append(rec)
        log.debug("epoch %d total %.6f", epoch, rec.total)
        if on_epoch is not None:
            on_epoch(rec)
    return history
