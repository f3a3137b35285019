"""Addressee-estimation networks.

Two variants share the same skeleton -- face encoder, pose encoder, per-frame
modality fusion, a recurrent stage over the frames, and a 3-way classifier:

* ``IAE``: CNN face encoder, plain GRU over fused frames.
* ``XAE``: ViT face encoder, GRU-with-attention whose per-frame contribution
  scores are exposed for explanation.

Fusion is orthogonal to the variant (``CONCAT``, ``SCORED``, ``MDATT``, ``GENATT``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np

from .nn import GRU, Conv2d, LayerNorm, Linear, MLP, Module, TransformerBlock
from .tensor import ShapeError, Tensor, concat, dropout, maxpool2d, softmax

IMAGE_SIZE = 50
POSE_DIM = 54
N_CLASSES = 3


class AddresseeLabel(int, Enum):
    LEFT = 0
    RIGHT = 1
    ROBOT = 2

    @classmethod
    def coerce(cls, value) -> "AddresseeLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown addressee label {value!r}") from None
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise ValueError(f"unknown addressee label {value!r}") from None


class Variant(str, Enum):
    IAE = "IAE"
    XAE = "XAE"


class Fusion(str, Enum):
    CONCAT = "CONCAT"
    SCORED = "SCORED"
    MDATT = "MDATT"
    GENATT = "GENATT"


@dataclass
class ModelSpec:
    variant: str = "XAE"
    fusion: str = "SCORED"
    dropout: float = 0.0
    # CNN face encoder (IAE)
    conv_channels: tuple = (8, 16, 32, 64)
    kernel_size: int = 5
    hid1: int = 256
    out1: int = 32
    act1: str = "tanh"
    # pose encoder
    hid2: int = 73
    out2: int = 185
    act2: str = "tanh"
    # plain GRU head (IAE)
    hid3: int = 32
    out3: int = 20
    act3: str = "tanh"
    # ViT face encoder (XAE)
    patch_size: int = 4
    crop_size: int = 48
    embed_dim: int = 42
    depth: int = 6
    heads: int = 6
    mlp_ratio: float = 4.0
    pooling: str = "cls"
    d_face: int = 185
    # scoring fusion
    d_inner: int = 14
    # multi-dimensional / general attention fusion
    att_dq: int = 20
    att_dk: int = 20
    att_dv: int = 64
    att_act: str = "tanh"
    # GRU with attention (XAE)
    query_dim: int = 20
    key_dim: int = 20
    value_dim: int = 81
    gru_hidden: int = 20
    rnn_act: str = "tanh"

    def __post_init__(self):
        self.variant = Variant(str(self.variant).upper()).value
        self.fusion = Fusion(str(self.fusion).upper()).value
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.validate()

    @classmethod
    def iae_default(cls) -> "ModelSpec":
        return cls(variant="IAE", fusion="CONCAT", dropout=0.2, hid2=32, out2=20)

    @classmethod
    def xae_default(cls) -> "ModelSpec":
        return cls()

    @classmethod
    def tiny_xae(cls, dim: int = 24, **kw) -> "ModelSpec":
        """Desk-scale XAE: small ViT, narrow embeddings."""
        base = dict(embed_dim=24, depth=2, heads=2, mlp_ratio=2.0, d_face=dim, hid2=max(8, dim // 2),
                    out2=dim, d_inner=8, value_dim=16, key_dim=8, query_dim=8, gru_hidden=8)
        base.update(kw)
        return cls(**base)

    @property
    def face_dim(self) -> int:
        return self.out1 if self.variant == "IAE" else self.d_face

    @property
    def face_series_dim(self) -> int:
        return self.conv_channels[-1] if self.variant == "IAE" else self.embed_dim

    @property
    def pose_dim(self) -> int:
        return self.out2

    @property
    def fused_dim(self) -> int:
        if self.fusion == "CONCAT":
            return self.face_dim + self.pose_dim
        if self.fusion == "SCORED":
            return self.face_dim
        return self.att_dv

    @property
    def cnn_flat_dim(self) -> int:
        s = IMAGE_SIZE
        for _ in range(2):
            s = (s - self.kernel_size + 1 - self.kernel_size + 1) // 2
        return self.conv_channels[-1] * s * s

    @property
    def n_patches(self) -> int:
        return (self.crop_size // self.patch_size) ** 2

    def validate(self) -> None:
        if self.fusion == "SCORED" and self.face_dim != self.pose_dim:
            raise ValueError(f"SCORED fusion needs equal face/pose dims, got {self.face_dim} and {self.pose_dim}")
        if self.variant == "XAE":
            if self.crop_size > IMAGE_SIZE or self.crop_size % self.patch_size:
                raise ValueError(f"crop {self.crop_size} must be <= {IMAGE_SIZE} and divisible by patch {self.patch_size}")
            if self.embed_dim % self.heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
            if self.key_dim != self.gru_hidden:
                raise ValueError(f"key_dim {self.key_dim} must equal gru_hidden {self.gru_hidden}")
            if self.pooling not in ("cls", "mean"):
                raise ValueError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if len(self.conv_channels) != 4:
            raise ValueError("conv_channels must list four widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelSpec":
        return replace(self, **kw)

    def build(self, rng: np.random.Generator, dtype=np.float32) -> "AddresseeNet":
        return AddresseeNet(self, rng, dtype)


# -- encoders ---------------------------------------------------------------------------

_ACT = {"tanh": Tensor.tanh, "relu": Tensor.relu}


def _check_faces(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(f"face frames must be (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {x.shape}")


class FaceCNN(Module):
    """conv-act-conv-act-pool-drop-conv-act-conv-act-pool-drop-flatten-FC-act-FC."""

    def __init__(self, spec: ModelSpec, rng, dtype):
        super().__init__()
        c1, c2, c3, c4 = spec.conv_channels
        k = spec.kernel_size
        self.conv1 = Conv2d(3, c1, k, rng, dtype)
        self.conv2 = Conv2d(c1, c2, k, rng, dtype)
        self.conv3 = Conv2d(c2, c3, k, rng, dtype)
        self.conv4 = Conv2d(c3, c4, k, rng, dtype)
        self.fc1 = Linear(spec.cnn_flat_dim, spec.hid1, rng, dtype=dtype)
        self.fc2 = Linear(spec.hid1, spec.out1, rng, dtype=dtype)
        self.act = _ACT[spec.act1]
        self.p = spec.dropout

    def forward(self, x: Tensor, training=False, rng=None):
        """x: (N, 50, 50, 3) -> (embedding (N, out1), per-pixel series (N, P, C))."""
        _check_faces(x)
        h = x.transpose(0, 3, 1, 2)
        h = self.act(self.conv2(self.act(self.conv1(h))))
        h = dropout(maxpool2d(h, 2), self.p, rng, training)
        h = self.act(self.conv4(self.act(self.conv3(h))))
        h = dropout(maxpool2d(h, 2), self.p, rng, training)
        N, C, H, W = h.shape
        series = h.reshape(N, C, H * W).transpose(0, 2, 1)
        emb = self.fc2(self.act(self.fc1(h.reshape(N, C * H * W))))
        return emb, series, None


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    off = (x.shape[-3] - size) // 2
    return x[..., off:off + size, off:off + size, :]


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(N, S, S, C) -> (N, (S/patch)^2, patch*patch*C), row-major patch order."""
    N, S, _, C = x.shape
    g = S // patch
    return (x.reshape(N, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
            .reshape(N, g * g, patch * patch * C))


class FaceViT(Module):
    def __init__(self, spec: ModelSpec, rng, dtype):
        super().__init__()
        E = spec.embed_dim
        self.spec = spec
        self.patch_embed = Linear(spec.patch_size ** 2 * 3, E, rng, dtype=dtype)
        self.cls_token = Tensor((0.02 * rng.standard_normal((1, 1, E))).astype(dtype), requires_grad=True)
        self.pos_embed = Tensor((0.02 * rng.standard_normal((1, spec.n_patches + 1, E))).astype(dtype),
                                requires_grad=True)
        self.blocks = []
        for i in range(spec.depth):
            blk = TransformerBlock(E, spec.heads, spec.mlp_ratio, rng, dtype)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)
        self.norm = LayerNorm(E, dtype)
        self.head = Linear(E, spec.d_face, rng, dtype=dtype)

    def forward(self, x: Tensor, training=False, rng=None):
        """x: (N, 50, 50, 3) -> (embedding, patch-token series, per-layer attention arrays)."""
        _check_faces(x)
        patches = patchify(center_crop(x.data, self.spec.crop_size), self.spec.patch_size)
        if x.requires_grad:
            # keep the graph when the caller differentiates w.r.t. pixels
            off = (IMAGE_SIZE - self.spec.crop_size) // 2
            g = self.spec.crop_size // self.spec.patch_size
            P = self.spec.patch_size
            xc = x[:, off:off + self.spec.crop_size, off:off + self.spec.crop_size, :]
            patches = (xc.reshape(x.shape[0], g, P, g, P, 3).transpose(0, 1, 3, 2, 4, 5)
                       .reshape(x.shape[0], g * g, P * P * 3))
        else:
            patches = Tensor(patches)
        N = x.shape[0]
        tok = self.patch_embed(patches)
        cls = self.cls_token + Tensor(np.zeros((N, 1, 1), dtype=tok.dtype))
        h = concat([cls, tok], axis=1) + self.pos_embed
        attention = []
        for blk in self.blocks:
            h, att = blk(h)
            attention.append(att.data)
        h = self.norm(h)
        pooled = h[:, 0] if self.spec.pooling == "cls" else h[:, 1:].mean(axis=1)
        return self.head(pooled), h[:, 1:], attention


class PoseMLP(MLP):
    def __init__(self, spec: ModelSpec, rng, dtype):
        super().__init__(POSE_DIM, spec.hid2, spec.out2, rng, act=spec.act2, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != POSE_DIM:
            raise ShapeError(f"pose vectors must have length {POSE_DIM}, got {x.shape}")
        return super().forward(x)


# -- fusion -----------------------------------------------------------------------------

class ConcatFusion(Module):
    def forward(self, f: Tensor, p: Tensor, series=None):
        return concat([f, p], axis=-1), None


class ScoredFusion(Module):
    """Shared scorer w_D^T ReLU(W v + b); softmax over the two modality scores."""

    def __init__(self, d: int, d_inner: int, rng, dtype):
        super().__init__()
        self.d = d
        self.inner = Linear(d, d_inner, rng, dtype=dtype)
        self.w_d = Linear(d_inner, 1, rng, bias=False, dtype=dtype)

    def score(self, v: Tensor) -> Tensor:
        return self.w_d(self.inner(v).relu())

    def forward(self, f: Tensor, p: Tensor, series=None):
        """Return (r, weights) with weights[..., 0] = s_f and weights[..., 1] = s_p."""
        if f.shape != p.shape:
            raise ShapeError(f"SCORED fusion: face {f.shape} and pose {p.shape} differ")
        s = softmax(concat([self.score(f), self.score(p)], axis=-1), axis=-1)
        r = s[..., 0:1] * f + s[..., 1:2] * p
        return r, s


class MDAttFusion(Module):
    """Element-wise gate e = W_D^T act(W1 q + W2 k + b) applied to v; q from pose, k/v from face."""

    def __init__(self, spec: ModelSpec, rng, dtype):
        super().__init__()
        self.wq = Linear(spec.pose_dim, spec.att_dq, rng, bias=False, dtype=dtype)
        self.wk = Linear(spec.face_dim, spec.att_dk, rng, bias=False, dtype=dtype)
        self.wv = Linear(spec.face_dim, spec.att_dv, rng, bias=False, dtype=dtype)
        self.w1 = Linear(spec.att_dq, spec.d_inner, rng, bias=False, dtype=dtype)
        self.w2 = Linear(spec.att_dk, spec.d_inner, rng, dtype=dtype)
        self.w_d = Linear(spec.d_inner, spec.att_dv, rng, bias=False, dtype=dtype)
        self.act = _ACT[spec.att_act]

    def gate(self, f: Tensor, p: Tensor) -> Tensor:
        return self.w_d(self.act(self.w1(self.wq(p)) + self.w2(self.wk(f))))

    def forward(self, f: Tensor, p: Tensor, series=None):
        e = self.gate(f, p)
        return e * self.wv(f), None


class GenAttFusion(Module):
    """Pose-queried attention over the face component series; weights sum to 1 over components."""

    def __init__(self, spec: ModelSpec, rng, dtype):
        super().__init__()
        d_series = spec.face_series_dim
        self.wq = Linear(spec.pose_dim, spec.att_dq, rng, bias=False, dtype=dtype)
        self.wk = Linear(d_series, spec.att_dk, rng, bias=False, dtype=dtype)
        self.wv = Linear(d_series, spec.att_dv, rng, bias=False, dtype=dtype)
        self.w1 = Linear(spec.att_dq, spec.d_inner, rng, bias=False, dtype=dtype)
        self.w2 = Linear(spec.att_dk, spec.d_inner, rng, dtype=dtype)
        self.w_d = Linear(spec.d_inner, 1, rng, bias=False, dtype=dtype)
        self.act = _ACT[spec.att_act]

    def forward(self, f: Tensor, p: Tensor, series: Tensor = None):
        """series: (N, n_p, d_series); p: (N, d_pose) -> (r (N, d_v), a (N, n_p))."""
        if series is None or series.ndim != 3 or series.shape[0] != p.shape[0]:
            raise ShapeError(f"GENATT fusion needs a (N, n_p, d) face series, got "
                             f"{None if series is None else series.shape} for pose {p.shape}")
        q = self.w1(self.wq(p))                                   # N, d_inner
        hidden = self.act(self.w2(self.wk(series)) + q.reshape(q.shape[0], 1, q.shape[1]))
        e = self.w_d(hidden).reshape(series.shape[0], series.shape[1])
        a = softmax(e, axis=-1)
        v = self.wv(series)                                       # N, n_p, d_v
        r = (a.reshape(a.shape[0], a.shape[1], 1) * v).sum(axis=1)
        return r, a


# -- recurrent stages -------------------------------------------------------------------

class AttentionGRU(Module):
    """Project frames to queries/keys/values; a GRU folds the queries into one query q;
    contribution scores c = softmax(K q) weight the values into u."""

    def __init__(self, spec: ModelSpec, d_in: int, rng, dtype):
        super().__init__()
        self.wq = Linear(d_in, spec.query_dim, rng, bias=False, dtype=dtype)
        self.wk = Linear(d_in, spec.key_dim, rng, bias=False, dtype=dtype)
        self.wv = Linear(d_in, spec.value_dim, rng, bias=False, dtype=dtype)
        self.gru = GRU(spec.query_dim, spec.gru_hidden, rng, dtype)
        self.act = _ACT[spec.rnn_act]

    def forward(self, R: Tensor):
        """R: (B, n, d) -> (u (B, d_v), c (B, n))."""
        if R.ndim != 3 or R.shape[1] < 1:
            raise ShapeError(f"recurrent attention needs a non-empty (B, n, d) sequence, got {R.shape}")
        B, n, _ = R.shape
        q = self.gru(self.act(self.wq(R)))                        # B, h
        K = self.wk(R)                                            # B, n, h
        V = self.wv(R)                                            # B, n, d_v
        c = softmax((K @ q.reshape(B, q.shape[1], 1)).reshape(B, n), axis=-1)
        u = (c.reshape(B, n, 1) * V).sum(axis=1)
        return u, c


class Classifier(Module):
    """Single FC layer producing logits over (LEFT, RIGHT, ROBOT); optional input activation."""

    def __init__(self, d_in: int, rng, dtype, act: str | None = None):
        super().__init__()
        self.d_in = d_in
        self.fc = Linear(d_in, N_CLASSES, rng, dtype=dtype)
        self.act = _ACT[act] if act else None

    def forward(self, u: Tensor) -> Tensor:
        if u.shape[-1] != self.d_in:
            raise ShapeError(f"classifier expects length {self.d_in}, got {u.shape}")
        return self.fc(self.act(u) if self.act else u)


class GRUHead(Module):
    """GRU - dropout - FC - act - FC."""

    def __init__(self, spec: ModelSpec, d_in: int, rng, dtype):
        super().__init__()
        self.gru = GRU(d_in, spec.hid3, rng, dtype)
        self.fc1 = Linear(spec.hid3, spec.out3, rng, dtype=dtype)
        self.out = Classifier(spec.out3, rng, dtype, act=spec.act3)
        self.p = spec.dropout

    def forward(self, R: Tensor, training=False, rng=None) -> Tensor:
        h = dropout(self.gru(R), self.p, rng, training)
        return self.out(self.fc1(h))


# -- full network -----------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Tensor
    modality: np.ndarray | None = None      # (B, k, 2): s_f, s_p
    times: np.ndarray | None = None         # (B, k)
    attention: list | None = None           # per layer (B, k, heads, N, N)
    component_weights: np.ndarray | None = None  # GENATT (B, k, n_p)
    extras: dict = field(default_factory=dict)


class AddresseeNet(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.face = FaceCNN(spec, rng, dtype) if spec.variant == "IAE" else FaceViT(spec, rng, dtype)
        self.pose = PoseMLP(spec, rng, dtype)
        self.fusion = {
            "CONCAT": lambda: ConcatFusion(),
            "SCORED": lambda: ScoredFusion(spec.face_dim, spec.d_inner, rng, dtype),
            "MDATT": lambda: MDAttFusion(spec, rng, dtype),
            "GENATT": lambda: GenAttFusion(spec, rng, dtype),
        }[spec.fusion]()
        if spec.variant == "IAE":
            self.head = GRUHead(spec, spec.fused_dim, rng, dtype)
        else:
            self.recurrent = AttentionGRU(spec, spec.fused_dim, rng, dtype)
            self.classifier = Classifier(spec.value_dim, rng, dtype, act=spec.rnn_act)

    def param_groups(self) -> dict[str, list[Tensor]]:
        """net1 face, net2 pose, net3 fusion (+ recurrent for IAE), net4 recurrent (XAE)."""
        groups = {"net1": self.face.parameters(), "net2": self.pose.parameters()}
        if self.spec.variant == "IAE":
            groups["net3"] = self.fusion.parameters() + self.head.parameters()
        else:
            groups["net3"] = self.fusion.parameters()
            groups["net4"] = self.recurrent.parameters() + self.classifier.parameters()
        return groups

    def forward(self, faces, poses, training: bool = False, rng=None) -> ForwardResult:
        faces = faces if isinstance(faces, Tensor) else Tensor(np.asarray(faces, dtype=self.dtype))
        poses = poses if isinstance(poses, Tensor) else Tensor(np.asarray(poses, dtype=self.dtype))
        if faces.ndim != 5 or faces.shape[2:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ShapeError(f"faces must be (B, k, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {faces.shape}")
        B, k = faces.shape[:2]
        if poses.shape != (B, k, POSE_DIM):
            raise ShapeError(f"poses must be ({B}, {k}, {POSE_DIM}), got {poses.shape}")
        if k < 1:
            raise ShapeError("sequences must contain at least one frame")

        f, series, attention = self.face(faces.reshape(B * k, IMAGE_SIZE, IMAGE_SIZE, 3), training, rng)
        p = self.pose(poses.reshape(B * k, POSE_DIM))
        r, weights = self.fusion(f, p, series)
        R = r.reshape(B, k, r.shape[-1])
        res = ForwardResult(logits=None)
        if self.spec.fusion == "SCORED":
            res.modality = weights.data.reshape(B, k, 2)
        elif self.spec.fusion == "GENATT":
            res.component_weights = weights.data.reshape(B, k, -1)
        if attention is not None:
            res.attention = [a.reshape(B, k, *a.shape[1:]) for a in attention]
        if self.spec.variant == "IAE":
            res.logits = self.head(R, training, rng)
        else:
            u, c = self.recurrent(R)
            res.times = c.data
            res.logits = self.classifier(u)
        return res


def param_breakdown(spec: ModelSpec) -> dict[str, int]:
    """Trainable scalars per group for a freshly built network."""
    net = spec.build(np.random.default_rng(0))
    return {name: sum(p.size for p in ps) for name, ps in net.param_groups().items()}
