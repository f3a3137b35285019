"""Inherent explanation channels and the analyses built on them.

* saliency: class-token attention over image patches, up-sampled to the frame
* modality weights: per-frame (s_f, s_p) from scored fusion
* time scores: per-frame contribution scores c from the attention GRU, and
  the templated verbal cue derived from them
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_ppm
from .models import IMAGE_SIZE, AddresseeLabel

REGIONS = ("BEGINNING", "MIDDLE", "END")
CUE_TEMPLATE = "I paid most attention to the {region} of what you said."
PAPER_RANK_CORRELATION = -0.87
PAPER_MODALITY_MEAN = 0.5
PAPER_MODALITY_STD = 0.04


@dataclass
class SaliencyMap:
    grid: np.ndarray
    layer: int
    head_mode: str          # "MEAN" or "SINGLE(h)"
    frame: int = -1

    def to_dict(self) -> dict:
        return {"layer": self.layer, "head_mode": self.head_mode, "frame": self.frame,
                "grid": np.round(self.grid, 6).tolist()}


@dataclass
class ModalityWeights:
    """Per-frame (s_f, s_p) pairs, shape (k, 2)."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 2:
            raise ValueError(f"modality weights must be (k, 2), got {self.values.shape}")
        if not np.allclose(self.values.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("each (s_f, s_p) pair must sum to 1")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def s_f(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def s_p(self) -> np.ndarray:
        return self.values[:, 1]


@dataclass
class TimeScores:
    """Per-frame contribution scores c; they sum to 1."""
    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        if self.c.size == 0 or abs(self.c.sum() - 1.0) > 1e-6:
            raise ValueError("time scores must be non-empty and sum to 1")

    def __array__(self, dtype=None, copy=None):
        return self.c if dtype is None else self.c.astype(dtype)

    def __len__(self) -> int:
        return self.c.size

    @property
    def k(self) -> int:
        return self.c.size


@dataclass
class VerbalCue:
    region: str
    window_avg: float
    threshold_used: float
    window_start: int = 0

    @property
    def sentence(self) -> str:
        return CUE_TEMPLATE.format(region=self.region.lower())

    def to_dict(self) -> dict:
        return {"region": self.region, "window_avg": self.window_avg, "threshold_used": self.threshold_used,
                "window_start": self.window_start, "sentence": self.sentence}


@dataclass
class ExplanationBundle:
    prediction: AddresseeLabel
    confidence: float
    saliency: SaliencyMap | None = None
    modality: ModalityWeights | None = None
    times: TimeScores | None = None
    cue: VerbalCue | None = None
    theta: float | None = None

    def to_dict(self) -> dict:
        return {
            "prediction": self.prediction.name,
            "confidence": self.confidence,
            "saliency": None if self.saliency is None else self.saliency.to_dict(),
            "modality": None if self.modality is None else
            [{"s_f": float(a), "s_p": float(b)} for a, b in self.modality.values],
            "times": None if self.times is None else [float(v) for v in self.times.c],
            "cue": None if self.cue is None else self.cue.to_dict(),
            "theta": self.theta,
        }


# -- saliency ---------------------------------------------------------------------------

def saliency_from_attention(attention_stack, layer: int | None = None, head_mode="MEAN",
                            crop_size: int = 48, patch_size: int = 4) -> SaliencyMap:
    """Class-token -> patch attention of one image as a 50x50 map in [0, 1].

    ``attention_stack``: per-layer arrays shaped (heads, N, N), N = 1 + patches.
    ``layer`` defaults to the penultimate layer.  ``head_mode`` is "MEAN" or a
    head index.  The patch grid is up-sampled by nearest neighbour; the
    border outside the centre crop repeats the nearest edge value.
    """
    depth = len(attention_stack)
    if depth == 0:
        raise ValueError("empty attention stack")
    if layer is None:
        layer = max(depth - 2, 0)
    if not -depth <= layer < depth:
        raise IndexError(f"layer {layer} out of range for {depth} layers")
    att = np.asarray(attention_stack[layer], dtype=np.float64)
    heads = att.shape[0]
    row = att[:, 0, 1:]
    if isinstance(head_mode, str) and head_mode.upper() == "MEAN":
        vals, mode = row.mean(axis=0), "MEAN"
    else:
        h = int(head_mode)
        if not 0 <= h < heads:
            raise IndexError(f"head {h} out of range for {heads} heads")
        vals, mode = row[h], f"SINGLE({h})"
    g = crop_size // patch_size
    if vals.size != g * g:
        raise ValueError(f"attention covers {vals.size} patches, expected {g * g}")
    grid = np.kron(vals.reshape(g, g), np.ones((patch_size, patch_size)))
    lo = (IMAGE_SIZE - crop_size) // 2
    grid = np.pad(grid, ((lo, IMAGE_SIZE - crop_size - lo),) * 2, mode="edge")
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return SaliencyMap(grid, layer % depth, mode)


def write_saliency_ppm(path, sal: SaliencyMap) -> None:
    g = np.clip(sal.grid, 0.0, 1.0)
    write_ppm(path, np.repeat(g[..., None], 3, axis=-1))


# -- verbal cue -------------------------------------------------------------------------

def window_averages(c, w: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    k = c.shape[-1]
    if not 1 <= w <= k:
        raise ValueError(f"window {w} must satisfy 1 <= w <= k = {k}")
    csum = np.concatenate([np.zeros(c.shape[:-1] + (1,)), np.cumsum(c, axis=-1)], axis=-1)
    return (csum[..., w:] - csum[..., :-w]) / w


def region_of(center: int, k: int) -> str:
    return REGIONS[min(center // math.ceil(k / 3), 2)]


def verbal_cue(c, theta: float = 0.02, w: int = 3) -> VerbalCue | None:
    """Emit a cue when the best sliding-window average of ``c`` exceeds 1/k + theta.

    The region is the third of the sequence containing the winning window's
    centre; the earliest window wins ties.
    """
    if theta < 0:
        raise ValueError(f"theta must be non-negative, got {theta}")
    c = np.asarray(c, dtype=np.float64)
    k = c.size
    avgs = window_averages(c, w)
    start = int(np.argmax(avgs))
    best = float(avgs[start])
    threshold = 1.0 / k + theta
    if not best > threshold:
        return None
    return VerbalCue(region_of(start + (w - 1) // 2, k), best, threshold, start)


def trigger_probability(times, thetas, w: int = 3) -> list[tuple[float, float]]:
    """Fraction of sequences that produce a cue, for each threshold.

    ``times``: (n, k) contribution scores, or a list of ExplanationBundles.
    """
    if isinstance(times, (list, tuple)) and times and isinstance(times[0], ExplanationBundle):
        times = np.stack([b.times.c for b in times])
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 2 or times.shape[0] == 0:
        raise ValueError("trigger_probability needs a non-empty (n, k) array of time scores")
    k = times.shape[1]
    best = window_averages(times, w).max(axis=1)
    return [(float(t), float(np.mean(best > 1.0 / k + t))) for t in thetas]


def theta_grid(spec: str) -> np.ndarray:
    """'start:stop:step' (inclusive stop) -> array."""
    start, stop, step = (float(v) for v in spec.split(":"))
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 12)


def write_trigger_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "probability"])
        for t, p in curve:
            w.writerow([repr(t), repr(p)])


# -- bundles ----------------------------------------------------------------------------

def bundles_from_forward(details, theta: float = 0.02, window: int = 3, layer=None, head_mode="MEAN",
                         crop_size: int = 48, patch_size: int = 4) -> list[ExplanationBundle]:
    """Assemble per-sequence bundles from batched forward outputs (see AddresseeEstimator.forward_details)."""
    logits = details.extras["logits"]
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    out = []
    for i in range(len(logits)):
        b = ExplanationBundle(AddresseeLabel(int(probs[i].argmax())), float(probs[i].max()), theta=theta)
        if details.modality is not None:
            b.modality = ModalityWeights(details.modality[i])
        if details.times is not None:
            b.times = TimeScores(details.times[i])
            b.cue = verbal_cue(b.times, theta, min(window, b.times.k))
        if details.attention is not None:
            frame = int(np.argmax(b.times.c)) if b.times is not None else details.attention[0].shape[1] - 1
            stack = [a[i, frame] for a in details.attention]
            b.saliency = saliency_from_attention(stack, layer, head_mode, crop_size, patch_size)
            b.saliency.frame = frame
        out.append(b)
    return out


def export_bundles(out_dir, bundles) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, b in enumerate(bundles):
        p = out / f"bundle_{i:04d}.json"
        p.write_text(json.dumps(b.to_dict()))
        written.append(p)
        if b.saliency is not None:
            q = out / f"saliency_{i:04d}.ppm"
            write_saliency_ppm(q, b.saliency)
            written.append(q)
    return written


# -- modality analysis ------------------------------------------------------------------

def modality_stats(model, X) -> tuple[float, float]:
    """Mean and standard deviation of the pose weight s_p over every frame of ``X``."""
    spec = model._config().model
    if spec.fusion != "SCORED":
        raise ValueError(f"modality statistics need SCORED fusion, model uses {spec.fusion}")
    sp = model.forward_details(X).modality[..., 1].ravel()
    return float(sp.mean()), float(sp.std())


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)      # (dim, seed, std)
    rho: float = 0.0
    p_value: float = 1.0
    degenerate: bool = False
    reference_rho: float = PAPER_RANK_CORRELATION

    def per_dim_log_std(self) -> dict:
        out: dict = {}
        for dim, _, std in self.rows:
            out.setdefault(dim, []).append(math.log(max(std, 1e-300)))
        return {d: float(np.mean(v)) for d, v in out.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dim", "seed", "std"])
            for dim, seed, std in self.rows:
                w.writerow([dim, seed, repr(std)])


def rank_correlation(dims, stds) -> tuple[float, float, bool]:
    """Spearman correlation of dim vs log(std); (0, 1, True) when either side is constant."""
    from scipy.stats import spearmanr
    dims = np.asarray(dims, dtype=float)
    logs = np.log(np.maximum(np.asarray(stds, dtype=float), 1e-300))
    if np.ptp(dims) == 0 or np.ptp(logs) == 0:
        return 0.0, 1.0, True
    rho, p = spearmanr(dims, logs)
    return float(rho), float(p), False


def expressiveness_sweep(dims, seeds, train_seqs, eval_seqs=None, config_factory=None) -> SweepResult:
    """Train one SCORED-fusion model per (dim, seed) and correlate dim with log-std of s_p."""
    from .estimator import AddresseeEstimator
    from .training import RunConfig
    dims, seeds = list(dims), list(seeds)
    if len(set(dims)) < 3 or len(set(seeds)) < 2:
        raise ValueError("sweep needs at least 3 distinct dims and 2 seeds")
    config_factory = config_factory or RunConfig.sweep_xae
    eval_seqs = train_seqs if eval_seqs is None else eval_seqs
    res = SweepResult()
    for dim in dims:
        cfg = config_factory(dim)
        for seed in seeds:
            est = AddresseeEstimator(cfg, random_state=seed).fit(train_seqs)
            _, std = modality_stats(est, eval_seqs)
            res.rows.append((dim, seed, std))
    res.rho, res.p_value, res.degenerate = rank_correlation([r[0] for r in res.rows], [r[2] for r in res.rows])
    return res
