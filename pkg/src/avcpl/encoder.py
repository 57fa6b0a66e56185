"""Two-stream audio-visual CTC encoder.

Audio (10 ms frames) goes through a stride-2 convolution, video (40 ms frames)
through a stride-1 convolution whose output frames are each repeated twice, so
both streams arrive at a common 20 ms stride. The streams are summed (or one
is dropped, see :func:`fuse_modalities`), a sinusoidal position table is
added, and a pre-norm transformer followed by a linear head produces per-frame
token log-probabilities.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .ctc import TokenSet
from .tensor import Tensor

AV, A_ONLY, V_ONLY = 0, 1, 2
BRANCH_NAMES = {AV: "av", A_ONLY: "a", V_ONLY: "v"}
FUSION_MODES = ("train", "force_av", "force_a", "force_v")


class EncoderError(ValueError):
    pass


@dataclass
class FeatureSequence:
    frames: Tensor
    stride_ms: int

    def __post_init__(self):
        if not isinstance(self.frames, Tensor):
            self.frames = tn.tensor(np.asarray(self.frames, dtype=np.float32))
        if self.frames.data.ndim != 2 or self.frames.shape[0] < 1:
            raise EncoderError(f"feature sequence needs T >= 1 frames, got shape {self.frames.shape}")
        if self.stride_ms <= 0:
            raise EncoderError("stride_ms must be positive")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ModalityDropoutConfig:
    p_m: float = 0.5
    p_a: float = 0.5

    def __post_init__(self):
        for name in ("p_m", "p_a"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise EncoderError(f"{name}={v} outside [0, 1]")

    def branch_probs(self) -> tuple[float, float, float]:
        return self.p_m, (1 - self.p_m) * self.p_a, (1 - self.p_m) * (1 - self.p_a)


@dataclass
class EncoderConfig:
    audio_dim: int = 40
    video_dim: int = 32
    model_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    layerdrop: float = 0.1
    vocab_size: int = field(default_factory=lambda: len(TokenSet()))
    audio_kernel: int = 7
    video_kernel: int = 5

    def __post_init__(self):
        for name in ("audio_dim", "video_dim", "model_dim", "n_layers", "n_heads", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")
        if self.model_dim % self.n_heads:
            raise EncoderError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams(OrderedDict):
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, cfg: EncoderConfig, items=(), version: int = 0):
        super().__init__(items)
        self.cfg = cfg
        self.version = version

    def arrays(self) -> dict:
        return OrderedDict((k, v.data) for k, v in self.items())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, ((k, tn.parameter(v.data.copy(), name=k)) for k, v in self.items()),
                           self.version)

    @classmethod
    def from_arrays(cls, cfg, arrays: dict, version: int = 0) -> "ModelParams":
        return cls(cfg, ((k, tn.parameter(np.array(v), name=k)) for k, v in arrays.items()), version)


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.model_dim

    def dense(fan_in, fan_out, shape=None):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))

    p = [
        ("audio.conv.w", dense(cfg.audio_kernel * cfg.audio_dim, d, (cfg.audio_kernel, cfg.audio_dim, d))),
        ("audio.conv.b", np.zeros(d)),
        ("video.conv.w", dense(cfg.video_kernel * cfg.video_dim, d, (cfg.video_kernel, cfg.video_dim, d))),
        ("video.conv.b", np.zeros(d)),
    ]
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        p += [
            (pre + "ln1.g", np.ones(d)), (pre + "ln1.b", np.zeros(d)),
            (pre + "attn.wq", dense(d, d)), (pre + "attn.bq", np.zeros(d)),
            (pre + "attn.wk", dense(d, d)), (pre + "attn.bk", np.zeros(d)),
            (pre + "attn.wv", dense(d, d)), (pre + "attn.bv", np.zeros(d)),
            (pre + "attn.wo", dense(d, d)), (pre + "attn.bo", np.zeros(d)),
            (pre + "ln2.g", np.ones(d)), (pre + "ln2.b", np.zeros(d)),
            (pre + "ffn.w1", dense(d, cfg.ffn_dim)), (pre + "ffn.b1", np.zeros(cfg.ffn_dim)),
            (pre + "ffn.w2", dense(cfg.ffn_dim, d)), (pre + "ffn.b2", np.zeros(d)),
        ]
    p += [
        ("final_ln.g", np.ones(d)), ("final_ln.b", np.zeros(d)),
        ("head.w", dense(d, cfg.vocab_size)), ("head.b", np.zeros(cfg.vocab_size)),
    ]
    return ModelParams(cfg, ((k, tn.parameter(np.asarray(v, dtype=dtype), name=k)) for k, v in p))


# ---------------------------------------------------------------- frontends

def _frontend(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    return tn.gelu(tn.conv1d(x, w, b, stride=stride))


def audio_features(params: ModelParams, audio: Tensor) -> Tensor:
    """(..., T, D_a) at 10 ms -> (..., ceil(T/2), d) at 20 ms."""
    if audio.shape[-2] < 1:
        raise EncoderError("audio_frontend: empty input")
    return _frontend(audio, params["audio.conv.w"], params["audio.conv.b"], 2)


def video_features(params: ModelParams, video: Tensor) -> Tensor:
    """(..., T, D_v) at 40 ms -> (..., 2T, d) at 20 ms."""
    if video.shape[-2] < 1:
        raise EncoderError("video_frontend: empty input")
    return tn.repeat_time(_frontend(video, params["video.conv.w"], params["video.conv.b"], 1), 2)


def audio_frontend(seq: FeatureSequence, params: ModelParams) -> FeatureSequence:
    if seq.stride_ms != 10:
        raise EncoderError(f"audio_frontend expects 10 ms frames, got {seq.stride_ms} ms")
    return FeatureSequence(audio_features(params, seq.frames), 20)


def video_frontend(seq: FeatureSequence, params: ModelParams) -> FeatureSequence:
    if seq.stride_ms != 40:
        raise EncoderError(f"video_frontend expects 40 ms frames, got {seq.stride_ms} ms")
    return FeatureSequence(video_features(params, seq.frames), 20)


# ---------------------------------------------------------------- fusion

def sample_branches(n: int, cfg: ModalityDropoutConfig, rng: np.random.Generator) -> np.ndarray:
    """One fusion branch per utterance."""
    u = rng.random(n)
    p_av, p_a, _ = cfg.branch_probs()
    return np.where(u < p_av, AV, np.where(u < p_av + p_a, A_ONLY, V_ONLY))


def branches_for_mode(mode: str, n: int, cfg: ModalityDropoutConfig | None, rng) -> np.ndarray:
    if mode == "train":
        if cfg is None or rng is None:
            raise EncoderError("train-mode fusion needs a dropout config and an rng")
        return sample_branches(n, cfg, rng)
    fixed = {"force_av": AV, "force_a": A_ONLY, "force_v": V_ONLY}
    if mode not in fixed:
        raise EncoderError(f"unknown fusion mode {mode!r}")
    return np.full(n, fixed[mode])


def fuse_batch(f_a: Tensor | None, f_v: Tensor | None, branches: np.ndarray) -> Tensor:
    """(B, T, d) streams; per-item branch codes select a+v, a or v."""
    if (branches == V_ONLY).all():
        return f_v
    if (branches == A_ONLY).all():
        return f_a
    if f_a is None or f_v is None:
        raise EncoderError("fusion: both streams are required for mixed or AV branches")
    if f_a.shape != f_v.shape:
        raise EncoderError(f"fusion: stream shapes differ {f_a.shape} vs {f_v.shape}")
    if (branches == AV).all():
        return tn.add(f_a, f_v)
    dt = f_a.dtype
    ma = (branches != V_ONLY).astype(dt)[:, None, None]
    mv = (branches != A_ONLY).astype(dt)[:, None, None]
    return tn.add(tn.mul(f_a, tn.tensor(ma)), tn.mul(f_v, tn.tensor(mv)))


def fuse_modalities(f_a, f_v, cfg: ModalityDropoutConfig | None, rng, mode: str = "train"):
    """Fuse one utterance's 20 ms streams; returns (fused sequence, branch code)."""
    branch = int(branches_for_mode(mode, 1, cfg, rng)[0])
    fa = f_a.frames if isinstance(f_a, FeatureSequence) else f_a
    fv = f_v.frames if isinstance(f_v, FeatureSequence) else f_v
    if branch == A_ONLY:
        out = fa
    elif branch == V_ONLY:
        out = fv
    else:
        if fa is None or fv is None or fa.shape != fv.shape:
            raise EncoderError(f"fusion: length mismatch "
                               f"{None if fa is None else fa.shape} vs {None if fv is None else fv.shape}")
        out = tn.add(fa, fv)
    if out is None:
        raise EncoderError("fusion: selected stream is missing")
    return FeatureSequence(out, 20), branch


# ---------------------------------------------------------------- transformer

def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    ang = pos / np.power(10000.0, i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe


def _linear(x, w, b):
    return tn.add(tn.matmul(x, w), b)


def _dropout(x, p, train, rng):
    return tn.dropout_mask(x, p, rng) if train and p > 0 else x


def _attention(params, pre, x, key_mask, n_heads, train, p, rng):
    B, T, d = x.shape
    dh = d // n_heads

    def heads(t):
        return tn.transpose(tn.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, params[pre + "wq"], params[pre + "bq"]))
    k = heads(_linear(x, params[pre + "wk"], params[pre + "bk"]))
    v = heads(_linear(x, params[pre + "wv"], params[pre + "bv"]))
    scores = tn.mul_scalar(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = tn.softmax(scores, key_mask)
    att = _dropout(att, p, train, rng)
    ctx = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    return _linear(ctx, params[pre + "wo"], params[pre + "bo"])


def _block(params, i, x, key_mask, cfg, train, rng):
    pre = f"block{i}."
    h = tn.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    h = _attention(params, pre + "attn.", h, key_mask, cfg.n_heads, train, cfg.dropout, rng)
    x = tn.add(x, _dropout(h, cfg.dropout, train, rng))
    h = tn.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    h = tn.gelu(_linear(h, params[pre + "ffn.w1"], params[pre + "ffn.b1"]))
    h = _dropout(h, cfg.dropout, train, rng)
    h = _linear(h, params[pre + "ffn.w2"], params[pre + "ffn.b2"])
    return tn.add(x, _dropout(h, cfg.dropout, train, rng))


def embed_input(f_av: Tensor) -> Tensor:
    T, d = f_av.shape[-2], f_av.shape[-1]
    return tn.add(f_av, tn.tensor(sinusoidal_positions(T, d).astype(f_av.dtype)))


def head(params: ModelParams, x: Tensor) -> Tensor:
    x = tn.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    return tn.log_softmax(_linear(x, params["head.w"], params["head.b"]))


def encode_batch(f_av: Tensor, params: ModelParams, lengths=None, train: bool = False, rng=None) -> Tensor:
    """(B, T, d) fused features -> (B, T, |V|) log-probs. ``lengths`` masks padded keys."""
    cfg = params.cfg
    if f_av.shape[-1] != cfg.model_dim:
        raise EncoderError(f"encode: feature dim {f_av.shape[-1]} != model_dim {cfg.model_dim}")
    if train and rng is None:
        raise EncoderError("encode: training mode needs an rng")
    B, T, _ = f_av.shape
    if lengths is None:
        key_mask = None
    else:
        key_mask = (np.arange(T)[None, :] < np.asarray(lengths)[:, None])[:, None, None, :]
    x = embed_input(f_av)
    x = _dropout(x, cfg.dropout, train, rng)
    for i in range(cfg.n_layers):
        if train and cfg.layerdrop > 0 and rng.random() < cfg.layerdrop:
            continue
        x = _block(params, i, x, key_mask, cfg, train, rng)
    return head(params, x)


def encode(f_av, params: ModelParams, train: bool = False, rng=None) -> Tensor:
    """Single utterance: (T, d) -> (T, |V|) log-prob lattice."""
    frames = f_av.frames if isinstance(f_av, FeatureSequence) else f_av
    out = encode_batch(tn.reshape(frames, (1,) + frames.shape), params, None, train, rng)
    return tn.reshape(out, out.shape[1:])


# ---------------------------------------------------------------- batched forward

def pad_batch(arrays, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    out = np.zeros((len(arrays), lengths.max(), arrays[0].shape[1]), dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths


def forward(params: ModelParams, audio, video, video_lengths, branches: np.ndarray,
            train: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """Padded batch forward. ``audio`` (B, 4T, D_a) and/or ``video`` (B, T, D_v) arrays.

    Returns log-probs (B, 2T, |V|) and valid output lengths (2 * video_lengths).
    """
    dt = next(iter(params.values())).dtype
    need_a = (branches != V_ONLY).any()
    need_v = (branches != A_ONLY).any()
    f_a = audio_features(params, tn.tensor(np.asarray(audio, dtype=dt))) if need_a else None
    f_v = video_features(params, tn.tensor(np.asarray(video, dtype=dt))) if need_v else None
    if f_a is not None and f_v is not None and f_a.shape != f_v.shape:
        raise EncoderError(f"audio/video streams misaligned: {f_a.shape} vs {f_v.shape}")
    fused = fuse_batch(f_a, f_v, branches)
    out_lengths = 2 * np.asarray(video_lengths, dtype=np.int64)
    return encode_batch(fused, params, out_lengths, train, rng), out_lengths
