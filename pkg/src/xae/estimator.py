"""scikit-learn style wrapper: ``fit`` / ``predict`` / ``predict_proba`` / ``explain``."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import FrameNormalizer, UtteranceSequence, augment, stack_sequences
from .models import IMAGE_SIZE, N_CLASSES, POSE_DIM, AddresseeLabel
from .optim import load_checkpoint, save_checkpoint
from .tensor import ShapeError, no_grad
from .training import RunConfig, train


def check_sequences(X, y=None, groups=None):
    """Accept a list of UtteranceSequence or a (faces, poses) pair; return arrays.

    -> faces (n, k, 50, 50, 3), poses (n, k, 54), labels (n,) or None, groups (n,)
    """
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], UtteranceSequence):
        faces, poses, labels = stack_sequences(X)
        if y is None:
            y = labels
        if groups is None:
            groups = np.array([s.source_id for s in X])
    elif isinstance(X, (list, tuple)) and len(X) == 0:
        faces, poses, _ = stack_sequences([])
    elif isinstance(X, dict):
        faces, poses = X["faces"], X["poses"]
    elif isinstance(X, tuple) and len(X) == 2:
        faces, poses = X
    else:
        raise TypeError("X must be a list of UtteranceSequence, a (faces, poses) tuple, or a dict "
                        "with 'faces' and 'poses'")
    faces = np.asarray(faces, dtype=np.float32)
    poses = np.asarray(poses, dtype=np.float32)
    if faces.ndim != 5 or faces.shape[2:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(f"faces must be (n, k, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {faces.shape}")
    if poses.shape != faces.shape[:2] + (POSE_DIM,):
        raise ShapeError(f"poses must be {faces.shape[:2] + (POSE_DIM,)}, got {poses.shape}")
    if not np.isfinite(poses).all():
        raise ValueError("pose vectors contain non-finite entries")
    if y is not None:
        y = np.array([int(AddresseeLabel.coerce(v)) for v in np.asarray(y).ravel()], dtype=int)
        if len(y) != len(faces):
            raise ValueError(f"{len(faces)} sequences but {len(y)} labels")
    if groups is None:
        groups = np.array(["0"] * len(faces))
    return faces, poses, y, np.asarray(groups).astype(str)


class AddresseeEstimator(ClassifierMixin, BaseEstimator):
    """Addressee classifier over face/pose frame sequences.

    Parameters
    ----------
    config : RunConfig or None
        Architecture and training hyper-parameters; defaults to the XAE preset.
    random_state : int
        Seeds parameter init, batch order, dropout and augmentation.
    dtype : str
        ``"float32"`` for training, ``"float64"`` for gradient checks.
    """

    def __init__(self, config: RunConfig | None = None, random_state: int = 0, dtype: str = "float32",
                 verbose: int = 0):
        self.config = config
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    def _config(self) -> RunConfig:
        return self.config if self.config is not None else RunConfig.xae_default()

    def _prepare(self, faces, rng, training):
        cfg = self._config()
        if training and cfg.use_augmentation and rng is not None:
            faces = augment_batch(faces, cfg, rng)
        return self.normalizer_.transform(faces).astype(self.dtype)

    def fit(self, X, y=None, groups=None):
        cfg = self._config()
        faces, poses, y, groups = check_sequences(X, y, groups)
        if y is None:
            raise ValueError("labels are required for fit")
        self.classes_ = np.arange(N_CLASSES)
        self.n_frames_ = faces.shape[1]
        self.normalizer_ = FrameNormalizer(cfg.normalization).fit(faces, set(groups))
        self.net_ = cfg.model.build(np.random.default_rng(self.random_state), np.dtype(self.dtype))
        self.history_ = train(self.net_, faces, poses, y, cfg, seed=self.random_state,
                              prepare=self._prepare, verbose=self.verbose)
        return self

    def _forward(self, X):
        check_is_fitted(self, "net_")
        faces, poses, _, _ = check_sequences(X)
        batch = self._config().eval_batch
        results = []
        with no_grad():
            for i in range(0, len(faces), batch):
                fb = self._prepare(faces[i:i + batch], None, False)
                results.append(self.net_.forward(fb, poses[i:i + batch].astype(self.dtype)))
        return results

    def decision_function(self, X) -> np.ndarray:
        res = self._forward(X)
        if not res:
            return np.zeros((0, N_CLASSES))
        return np.concatenate([r.logits.data for r in res])

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return softmax_np(logits)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def forward_details(self, X):
        """Concatenated logits plus per-sequence explanation channels."""
        from .models import ForwardResult
        res = self._forward(X)
        out = ForwardResult(logits=None)
        out.extras["logits"] = np.concatenate([r.logits.data for r in res]) if res else np.zeros((0, 3))
        for name in ("modality", "times", "component_weights"):
            parts = [getattr(r, name) for r in res]
            setattr(out, name, np.concatenate(parts) if parts and parts[0] is not None else None)
        if res and res[0].attention is not None:
            out.attention = [np.concatenate([r.attention[l] for r in res]) for l in range(len(res[0].attention))]
        return out

    def explain(self, X, theta: float | None = None, window: int | None = None, layer: int | None = None,
                head_mode: str = "MEAN"):
        """One ExplanationBundle per sequence."""
        from .explain import bundles_from_forward
        cfg = self._config()
        details = self.forward_details(X)
        return bundles_from_forward(details, theta=cfg.cue_theta if theta is None else theta,
                                    window=cfg.cue_window if window is None else window,
                                    layer=layer, head_mode=head_mode)

    # -- persistence -------------------------------------------------------------------
    def save(self, out_dir) -> None:
        check_is_fitted(self, "net_")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        groups = dict(self.net_.param_groups())
        groups["normalizer"] = [np.asarray(self.normalizer_.mean_), np.asarray(self.normalizer_.std_)]
        save_checkpoint(out / "model.xae", groups)
        self._config().dump(out / "config.yaml")

    @classmethod
    def load(cls, out_dir, random_state: int = 0) -> "AddresseeEstimator":
        out = Path(out_dir)
        ckpt = out / "model.xae" if out.is_dir() else out
        cfg_path = ckpt.parent / "config.yaml"
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        cfg = RunConfig.load(cfg_path)
        est = cls(config=cfg, random_state=random_state)
        stored = load_checkpoint(ckpt)
        est.net_ = cfg.model.build(np.random.default_rng(0), np.float32)
        for name, params in est.net_.param_groups().items():
            arrays = stored.get(name, [])
            if len(arrays) != len(params):
                raise ValueError(f"checkpoint group {name!r} has {len(arrays)} tensors, model expects {len(params)}")
            for p, a in zip(params, arrays):
                if p.shape != a.shape:
                    raise ValueError(f"checkpoint group {name!r}: shape {a.shape} != {p.shape}")
                p.data[...] = a
        mean, std = stored["normalizer"]
        est.normalizer_ = FrameNormalizer(cfg.normalization, mean.astype(np.float64), std.astype(np.float64))
        est.classes_ = np.arange(N_CLASSES)
        return est


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def augment_batch(faces: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """Same random transform for every frame of a sequence; independent across sequences."""
    out = np.empty_like(faces)
    for i, seq in enumerate(faces):
        seed = int(rng.integers(2 ** 63))
        for t, frame in enumerate(seq):
            out[i, t] = augment(frame, cfg.augment, np.random.default_rng(seed))
    return out
