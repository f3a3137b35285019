"""Run configuration, training loop, metrics and leave-one-interaction-out evaluation."""
from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import AugmentParams
from .models import N_CLASSES, AddresseeLabel, ModelSpec
from .optim import GroupOptimizer, ParamGroup
from .tensor import cross_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class GroupConfig:
    optimizer: str = "Adam"
    lr: float = 1e-3
    gamma: float = 1.0


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec.xae_default)
    groups: dict = field(default_factory=dict)
    batch_size: int = 4
    num_epochs: int = 8
    normalization: str = "TRUE_STATS"
    augment: AugmentParams = field(default_factory=AugmentParams)
    use_augmentation: bool = True
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    fold_plan: str = "leave_one_interaction_out"
    cue_theta: float = 0.02
    cue_window: int = 3
    init: str = "fan_in_uniform"
    adam_betas: tuple = (0.9, 0.999)
    rms_alpha: float = 0.99
    eps: float = 1e-8
    eval_batch: int = 32

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        if isinstance(self.augment, dict):
            self.augment = AugmentParams(**self.augment)
        self.groups = {k: (GroupConfig(**v) if isinstance(v, dict) else v) for k, v in self.groups.items()}
        self.adam_betas = tuple(self.adam_betas)
        self.normalization = self.normalization.upper()
        if self.batch_size < 1 or self.num_epochs < 0:
            raise ValueError("batch_size must be >= 1 and num_epochs >= 0")
        if self.normalization not in ("TRUE_STATS", "FIXED_REF"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def iae_default(cls) -> "RunConfig":
        return cls(
            model=ModelSpec.iae_default(),
            groups={"net1": GroupConfig("RMS", 0.00018, 0.75),
                    "net2": GroupConfig("RMS", 0.01, 0.9725),
                    "net3": GroupConfig("Adam", 0.00009, 0.5)},
            batch_size=16, num_epochs=15)

    @classmethod
    def xae_default(cls) -> "RunConfig":
        return cls(
            model=ModelSpec.xae_default(),
            groups={"net1": GroupConfig("RMS", 0.00003791, 0.70807),
                    "net2": GroupConfig("RMS", 0.00117708, 0.96882),
                    "net3": GroupConfig("RMS", 0.00185, 0.51241),
                    "net4": GroupConfig("Adam", 0.00006085, 0.9274)},
            batch_size=4, num_epochs=8)

    @classmethod
    def tiny_xae(cls, dim: int = 24, **model_kw) -> "RunConfig":
        """Desk-scale XAE that trains on a few hundred synthetic sequences in minutes."""
        return cls(
            model=ModelSpec.tiny_xae(dim, **model_kw),
            groups={"net1": GroupConfig("Adam", 1e-3, 0.9),
                    "net2": GroupConfig("Adam", 3e-3, 0.9),
                    "net3": GroupConfig("Adam", 3e-3, 0.9),
                    "net4": GroupConfig("Adam", 3e-3, 0.9)},
            batch_size=8, num_epochs=8, use_augmentation=False, seeds=[0, 1, 2])

    @classmethod
    def sweep_xae(cls, dim: int = 16) -> "RunConfig":
        """Single-block variant of ``tiny_xae`` used for the fusion-dimension sweep."""
        return cls.tiny_xae(dim, embed_dim=16, depth=1)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        presets = {"iae_default": cls.iae_default, "xae_default": cls.xae_default, "tiny_xae": cls.tiny_xae,
                   "sweep_xae": cls.sweep_xae}
        if name not in presets:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return presets[name]()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a config document; a bare preset name is also accepted."""
        p = Path(path)
        if not p.exists():
            try:
                return cls.preset(str(path))
            except KeyError:
                raise FileNotFoundError(f"config not found: {path}") from None
        data = yaml.safe_load(p.read_text()) or {}
        base = cls.preset(data.pop("preset")).to_dict() if "preset" in data else cls().to_dict()
        for key, val in data.items():
            if isinstance(val, dict) and isinstance(base.get(key), dict):
                base[key] = {**base[key], **val}
            else:
                base[key] = val
        return cls.from_dict(base)


# -- metrics ----------------------------------------------------------------------------

def confusion(predictions, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    p = np.asarray(predictions, dtype=int)
    t = np.asarray(labels, dtype=int)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError(f"need equal-length, non-empty inputs (got {p.shape} and {t.shape})")
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (t, p), 1)
    return cm


def per_class_f1(predictions, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = confusion(predictions, labels, n_classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    return np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)


def weighted_f1(predictions, labels, n_classes: int = N_CLASSES) -> float:
    """Per-class F1 averaged with weights proportional to class support.

    Computed in exact rational arithmetic on the integer counts, so the
    returned float is the correctly rounded value.
    """
    cm = confusion(predictions, labels, n_classes)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    total = sum((Fraction(2 * int(cm[c, c]) * int(support[c]), int(predicted[c] + support[c]))
                 for c in range(n_classes) if cm[c, c] > 0), Fraction(0))
    return float(total / int(support.sum()))


def weighted_mean(values, weights) -> float:
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    return float(values @ weights / weights.sum())


# -- training loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    epoch_loss: list = field(default_factory=list)
    batch_loss: list = field(default_factory=list)
    initial_loss: float | None = None
    lrs: dict = field(default_factory=dict)


def make_param_groups(net, config: RunConfig) -> list[ParamGroup]:
    groups = []
    for name, params in net.param_groups().items():
        gc = config.groups.get(name, GroupConfig())
        groups.append(ParamGroup(name, params, gc.optimizer, gc.lr, gc.gamma))
    return groups


def mean_loss(net, faces, poses, labels, batch: int = 32) -> float:
    from .tensor import no_grad
    total = 0.0
    with no_grad():
        for i in range(0, len(labels), batch):
            loss = cross_entropy(net.forward(faces[i:i + batch], poses[i:i + batch]).logits, labels[i:i + batch])
            total += loss.item() * len(labels[i:i + batch])
    return total / max(len(labels), 1)


def train(net, faces: np.ndarray, poses: np.ndarray, labels, config: RunConfig, seed: int = 0,
          prepare=None, frozen=(), track_initial: bool = False, verbose: int = 0) -> TrainResult:
    """Mini-batch training, one optimizer per parameter group, all stepped every batch.

    ``prepare(faces_batch, rng, training)`` maps raw frames to network input
    (augmentation + normalization); identity when None.  Groups named in
    ``frozen`` are excluded from gradient flow and updates.
    """
    labels = np.asarray([int(AddresseeLabel.coerce(v)) for v in labels], dtype=int)
    n = len(labels)
    rng = np.random.default_rng(seed)
    groups = make_param_groups(net, config)
    for g in groups:
        if g.name in frozen:
            g.freeze()
    opts = [GroupOptimizer(g) for g in groups]
    res = TrainResult()
    if track_initial and n:
        init_faces = prepare(faces, None, False) if prepare else faces
        res.initial_loss = mean_loss(net, init_faces, poses, labels, config.eval_batch)
    for epoch in range(config.num_epochs):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            fb = prepare(faces[idx], rng, True) if prepare else faces[idx]
            out = net.forward(fb, poses[idx], training=True, rng=rng)
            loss = cross_entropy(out.logits, labels[idx])
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for o in opts:
                o.zero_grad()
            loss.backward()
            for o in opts:
                o.step(epoch)
            losses.append(val)
        res.batch_loss.extend(losses)
        res.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        for o in opts:
            res.lrs.setdefault(o.group.name, []).append(o.group.lr(epoch))
        if verbose:
            log.info("epoch %d loss %.4f", epoch, res.epoch_loss[-1])
    for g in groups:
        if g.name in frozen:
            g.unfreeze()
    return res


# -- cross-validation ---------------------------------------------------------------------

@dataclass
class FoldResult:
    test_id: str
    seed: int
    f1: float
    n: int
    confusion: list
    per_class_f1: list


@dataclass
class EvalReport:
    folds: list = field(default_factory=list)
    f1: float = float("nan")
    per_class_f1: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    per_seed_f1: dict = field(default_factory=dict)
    n_sequences: int = 0

    @classmethod
    def aggregate(cls, folds: list[FoldResult]) -> "EvalReport":
        rep = cls(folds=list(folds))
        if not folds:
            return rep
        rep.f1 = weighted_mean([f.f1 for f in folds], [f.n for f in folds])
        for seed in sorted({f.seed for f in folds}):
            sub = [f for f in folds if f.seed == seed]
            rep.per_seed_f1[seed] = weighted_mean([f.f1 for f in sub], [f.n for f in sub])
        cm = np.sum([np.asarray(f.confusion) for f in folds], axis=0)
        rep.confusion = cm.tolist()
        tp = np.diag(cm).astype(float)
        denom = cm.sum(axis=0) + cm.sum(axis=1)
        rep.per_class_f1 = np.divide(2 * tp, denom, out=np.zeros(len(tp)), where=denom > 0).tolist()
        rep.n_sequences = int(sum(f.n for f in folds))
        return rep

    def to_dict(self) -> dict:
        return {"f1": self.f1, "per_class_f1": self.per_class_f1, "confusion": self.confusion,
                "per_seed_f1": {str(k): v for k, v in self.per_seed_f1.items()},
                "n_sequences": self.n_sequences, "folds": [asdict(f) for f in self.folds]}

    def write(self, out_dir) -> None:
        import csv
        import json
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1))
        with open(out / "folds.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["test_id", "seed", "f1", "n"])
            for f in self.folds:
                w.writerow([f.test_id, f.seed, repr(f.f1), f.n])
        write_confusion_csv(out / "confusion.csv", self.confusion)


def write_confusion_csv(path, cm) -> None:
    import csv
    names = [lab.name for lab in AddresseeLabel]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, cm):
            w.writerow([name] + [int(v) for v in row])


def write_loss_csv(path, result: TrainResult) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(result.epoch_loss):
            w.writerow([e, repr(v)])


def plan_runs(interaction_ids, seeds) -> list[tuple[str, int]]:
    """Outer leave-one-interaction-out runs: one per (held-out interaction, seed)."""
    ids = list(dict.fromkeys(str(i) for i in interaction_ids))
    if len(ids) < 2:
        raise ValueError(f"cross-validation needs at least 2 interactions, got {len(ids)}")
    return [(i, int(s)) for i in ids for s in seeds]


def split_by_interaction(seqs, test_id: str):
    train = [s for s in seqs if s.source_id != test_id]
    test = [s for s in seqs if s.source_id == test_id]
    return train, test


def _run_fold(config: RunConfig, seqs, test_id: str, seed: int) -> FoldResult:
    from .estimator import AddresseeEstimator
    train_seqs, test_seqs = split_by_interaction(seqs, test_id)
    est = AddresseeEstimator(config=config, random_state=seed).fit(train_seqs)
    if test_id in est.normalizer_.source_ids_:
        raise TrainingError(f"normalization statistics leaked from test interaction {test_id}")
    y = np.array([int(s.label) for s in test_seqs])
    pred = est.predict(test_seqs)
    return FoldResult(test_id, seed, weighted_f1(pred, y), len(y), confusion(pred, y).tolist(),
                      per_class_f1(pred, y).tolist())


def cross_validate(config: RunConfig, seqs, seeds=None, jobs: int = 1, test_ids=None) -> EvalReport:
    """Hold out each interaction in turn (optionally only ``test_ids``), train on the rest
    for every seed, and aggregate F1 weighted by test-set size."""
    seqs = list(seqs)
    seeds = list(config.seeds if seeds is None else seeds)
    runs = plan_runs([s.source_id for s in seqs], seeds)
    if test_ids is not None:
        keep = {str(t) for t in test_ids}
        runs = [r for r in runs if r[0] in keep]
    if jobs <= 1:
        folds = [_run_fold(config, seqs, tid, seed) for tid, seed in runs]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            folds = list(ex.map(_run_fold, [config] * len(runs), [seqs] * len(runs),
                                [r[0] for r in runs], [r[1] for r in runs]))
    return EvalReport.aggregate(folds)
