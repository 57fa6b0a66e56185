"""Synthetic audio-visual corpus, feature files, augmentation and batching.

Each character of a transcript is rendered as a run of audio frames (10 ms)
drawn around a per-character prototype and, in lock step, video frames
(40 ms) drawn around a per-viseme prototype. Several characters share a
viseme, so the video stream alone cannot separate them; the audio noise is
also much lower than the video noise.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ctc import TokenSet

AVF_MAGIC = b"AVF1"
AUDIO_STRIDE_MS = 10
VIDEO_STRIDE_MS = 40
AUDIO_PER_VIDEO = VIDEO_STRIDE_MS // AUDIO_STRIDE_MS

SPLITS = ("labeled_small", "labeled_large", "unlabeled_in", "unlabeled_shift", "valid", "test")

DEFAULT_VOCAB = (
    "the a an and is it's not can't big red old new cat bat mat pat hat sat rat "
    "dog fog log hog man pan van fan tan ran sun run fun bun top mop pop hop box fox "
    "six mix fix one two ten den pen bed fed let set dot pot got hot"
).split()

# many-to-one: characters sharing a lip shape
DEFAULT_VISEMES = {
    "bpm": 0, "fv": 1, "tdnlsz": 2, "kgcqxh": 3, "rw": 4, "jy": 5,
    "aei": 6, "ou": 7, "'": 8, "0123456789": 9,
}


class CorpusError(ValueError):
    pass


@dataclass
class CorpusConfig:
    vocab: list = field(default_factory=lambda: list(DEFAULT_VOCAB))
    min_words: int = 2
    max_words: int = 5
    sizes: dict = field(default_factory=lambda: {
        "labeled_small": 200, "labeled_large": 2000, "unlabeled_in": 2000,
        "unlabeled_shift": 4000, "valid": 200, "test": 200,
    })
    audio_dim: int = 40
    video_dim: int = 32
    pose_dims: int = 8          # trailing video dims carrying label-free per-utterance nuisance
    sigma_a: float = 0.5
    sigma_v: float = 0.7
    speaker_sigma_a: float = 0.1
    speaker_sigma_v: float = 0.3
    visemes: dict = field(default_factory=lambda: dict(DEFAULT_VISEMES))
    min_char_frames: int = 1    # video frames per character
    max_char_frames: int = 2
    successors: int = 4         # LM structure: likely followers per word
    shift_noise_mult: float = 1.6
    shift_length_mult: float = 1.5
    shift_video_rotation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_a < self.sigma_v:
            raise CorpusError("sigma_a must be smaller than sigma_v")


@dataclass
class Utterance:
    id: str
    audio: np.ndarray           # (4T, D_a) at 10 ms
    video: np.ndarray           # (T, D_v) at 40 ms
    text: str | None = None

    @property
    def frames_a(self) -> int:
        return int(self.audio.shape[0])

    @property
    def frames_v(self) -> int:
        return int(self.video.shape[0])

    def without_text(self) -> "Utterance":
        return replace(self, text=None)


def strip_transcripts(utts) -> list:
    """View of a split suitable for unlabeled training: transcripts removed."""
    return [u.without_text() for u in utts]


# ---------------------------------------------------------------- generation

def _viseme_of(cfg: CorpusConfig) -> dict:
    table = {}
    for chars, vid in cfg.visemes.items():
        for ch in chars:
            table[ch] = vid
    return table


def _check_vocab(cfg: CorpusConfig, tokens: TokenSet):
    vis = _viseme_of(cfg)
    for w in cfg.vocab:
        if not w:
            raise CorpusError("empty word in vocabulary")
        for ch in w:
            if ch not in vis:
                raise CorpusError(f"word {w!r}: character {ch!r} has no viseme")
            if ch not in tokens.chars and ch != tokens.apostrophe:
                raise CorpusError(f"word {w!r}: character {ch!r} is not in the token set")


class SentenceSource:
    """Word-level Markov chain giving the corpus some n-gram structure."""

    def __init__(self, vocab, successors: int, rng: np.random.Generator):
        self.vocab = list(vocab)
        n = len(self.vocab)
        self.start = rng.dirichlet(np.full(n, 0.5))
        self.trans = np.zeros((n, n))
        for i in range(n):
            nxt = rng.choice(n, size=min(successors, n), replace=False)
            self.trans[i, nxt] = rng.dirichlet(np.ones(len(nxt)))
            self.trans[i] = 0.9 * self.trans[i] + 0.1 / n

    def sample(self, n_words: int, rng: np.random.Generator) -> str:
        w = rng.choice(len(self.vocab), p=self.start)
        out = [w]
        for _ in range(n_words - 1):
            w = rng.choice(len(self.vocab), p=self.trans[w])
            out.append(w)
        return " ".join(self.vocab[i] for i in out)


class Renderer:
    def __init__(self, cfg: CorpusConfig, rng: np.random.Generator):
        self.cfg = cfg
        chars = sorted({c for w in cfg.vocab for c in w})
        self.audio_proto = {c: rng.normal(size=cfg.audio_dim) for c in chars}
        self.audio_proto[" "] = rng.normal(size=cfg.audio_dim) * 0.3
        vis = _viseme_of(cfg)
        n_vis = max(vis.values()) + 1
        lip_dims = cfg.video_dim - cfg.pose_dims
        vproto = rng.normal(size=(n_vis + 1, lip_dims))
        self.video_proto = {c: vproto[vis[c]] for c in chars}
        self.video_proto[" "] = vproto[n_vis] * 0.3
        q, _ = np.linalg.qr(rng.normal(size=(lip_dims, lip_dims)))
        self.shift_rotation = q

    def render(self, text: str, rng: np.random.Generator, shifted: bool = False):
        cfg = self.cfg
        symbols = [" "] + list(text) + [" "]
        durs = [1 if s == " " else int(rng.integers(cfg.min_char_frames, cfg.max_char_frames + 1))
                for s in symbols]
        Tv = sum(durs)
        lip_dims = cfg.video_dim - cfg.pose_dims
        noise = cfg.shift_noise_mult if shifted else 1.0
        spk_a = rng.normal(size=cfg.audio_dim) * cfg.speaker_sigma_a
        spk_v = rng.normal(size=lip_dims) * cfg.speaker_sigma_v
        audio = np.empty((Tv * AUDIO_PER_VIDEO, cfg.audio_dim))
        video = np.empty((Tv, cfg.video_dim))
        pos = 0
        for s, d in zip(symbols, durs):
            audio[pos * AUDIO_PER_VIDEO:(pos + d) * AUDIO_PER_VIDEO] = self.audio_proto[s]
            video[pos:pos + d, :lip_dims] = self.video_proto[s]
            pos += d
        audio += spk_a + rng.normal(size=audio.shape) * cfg.sigma_a * noise
        lips = video[:, :lip_dims] + spk_v
        if shifted and cfg.shift_video_rotation > 0:
            lips = (1 - cfg.shift_video_rotation) * lips + cfg.shift_video_rotation * lips @ self.shift_rotation
        video[:, :lip_dims] = lips + rng.normal(size=lips.shape) * cfg.sigma_v * noise
        pose = rng.normal(size=cfg.pose_dims)
        video[:, lip_dims:] = pose + rng.normal(size=(Tv, cfg.pose_dims)) * 0.3
        return audio.astype(np.float32), video.astype(np.float32)


def synth_corpus(cfg: CorpusConfig, tokens: TokenSet | None = None) -> dict:
    """Generate every split in memory: ``{split: [Utterance, ...]}``."""
    tokens = tokens or TokenSet()
    _check_vocab(cfg, tokens)
    root = np.random.SeedSequence(cfg.seed)
    proto_seq, lm_seq, *split_seqs = root.spawn(2 + len(SPLITS))
    renderer = Renderer(cfg, np.random.default_rng(proto_seq))
    source = SentenceSource(cfg.vocab, cfg.successors, np.random.default_rng(lm_seq))
    corpus = {}
    for split, seq in zip(SPLITS, split_seqs):
        rng = np.random.default_rng(seq)
        shifted = split == "unlabeled_shift"
        lo, hi = cfg.min_words, cfg.max_words
        if shifted:
            lo = max(1, round(lo * cfg.shift_length_mult))
            hi = max(lo, round(hi * cfg.shift_length_mult))
        utts = []
        for i in range(cfg.sizes.get(split, 0)):
            text = source.sample(int(rng.integers(lo, hi + 1)), rng)
            a, v = renderer.render(text, rng, shifted=shifted)
            utts.append(Utterance(f"{split}-{i:05d}", a, v, text))
        corpus[split] = utts
    return corpus


def lm_text(cfg: CorpusConfig, n_sentences: int, seed: int = 1) -> list[str]:
    """Extra text from the same word chain, for language-model training."""
    root = np.random.SeedSequence(cfg.seed)
    _, lm_seq, *_ = root.spawn(2 + len(SPLITS))
    source = SentenceSource(cfg.vocab, cfg.successors, np.random.default_rng(lm_seq))
    rng = np.random.default_rng([cfg.seed, seed, 7])
    return [source.sample(int(rng.integers(cfg.min_words, cfg.max_words + 1)), rng)
            for _ in range(n_sentences)]


# ---------------------------------------------------------------- files

def write_features(path, frames: np.ndarray, stride_ms: int):
    frames = np.ascontiguousarray(frames, dtype="<f4")
    T, D = frames.shape
    with open(path, "wb") as fh:
        fh.write(AVF_MAGIC)
        fh.write(struct.pack("<III", T, D, stride_ms))
        fh.write(frames.tobytes())


def read_features(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != AVF_MAGIC:
            raise CorpusError(f"{path}: not an AVF1 feature file")
        T, D, stride = struct.unpack("<III", head[4:])
        buf = fh.read()
    if len(buf) != 4 * T * D:
        raise CorpusError(f"{path}: expected {T}x{D} floats, found {len(buf) // 4} values")
    return np.frombuffer(buf, dtype="<f4").reshape(T, D).astype(np.float32), stride


def write_corpus(corpus: dict, outdir) -> dict:
    """Write feature files and one JSON-lines manifest per split; returns manifest paths."""
    outdir = Path(outdir)
    paths = {}
    for split, utts in corpus.items():
        fdir = outdir / split
        fdir.mkdir(parents=True, exist_ok=True)
        mpath = outdir / f"{split}.jsonl"
        with open(mpath, "w", encoding="utf-8") as fh:
            for u in utts:
                a_rel = f"{split}/{u.id}.a.avf"
                v_rel = f"{split}/{u.id}.v.avf"
                write_features(outdir / a_rel, u.audio, AUDIO_STRIDE_MS)
                write_features(outdir / v_rel, u.video, VIDEO_STRIDE_MS)
                rec = {"id": u.id, "audio": a_rel, "video": v_rel,
                       "frames_a": u.frames_a, "frames_v": u.frames_v}
                if u.text is not None:
                    rec["text"] = u.text
                fh.write(json.dumps(rec) + "\n")
        paths[split] = mpath
    return paths


def read_manifest(path, with_text: bool = True) -> list:
    path = Path(path)
    base = path.parent
    utts = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                a, sa = read_features(base / rec["audio"])
                v, sv = read_features(base / rec["video"])
            except KeyError as exc:
                raise CorpusError(f"{path}:{ln}: missing field {exc}") from None
            if sa != AUDIO_STRIDE_MS or sv != VIDEO_STRIDE_MS:
                raise CorpusError(f"{path}:{ln}: unexpected strides {sa}/{sv} ms")
            utts.append(Utterance(rec["id"], a, v, rec.get("text") if with_text else None))
    return utts


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    n_freq_masks: int = 2
    freq_param: int = 30        # out of 80 mel bins; rescaled to the feature dim
    freq_reference_dim: int = 80
    n_time_masks: int = 2
    time_param: int = 50
    max_time_ratio: float = 0.1
    video_erase_p: float = 0.5
    video_erase_max: int = 8
    video_flip_p: float = 0.5
    pose_dims: int = 8

    def freq_width(self, dim: int) -> int:
        return max(0, min(dim, round(self.freq_param * dim / self.freq_reference_dim)))


def spec_augment(features: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random frequency bands and time spans; total masked time <= ratio * T."""
    x = np.array(features, copy=True)
    T, D = x.shape
    F = cfg.freq_width(D)
    for _ in range(cfg.n_freq_masks):
        if F <= 0:
            break
        w = int(rng.integers(0, F + 1))
        f0 = int(rng.integers(0, D - w + 1))
        x[:, f0:f0 + w] = 0.0
    budget = int(np.floor(cfg.max_time_ratio * T))
    if budget <= 0 or cfg.n_time_masks <= 0:
        return x
    masked = np.zeros(T, dtype=bool)
    cap = min(cfg.time_param, budget)
    for _ in range(cfg.n_time_masks):
        remaining = budget - int(masked.sum())
        if remaining <= 0:
            break
        w = min(int(rng.integers(0, cap + 1)), remaining)
        if w == 0:
            continue
        t0 = int(rng.integers(0, T - w + 1))
        new = masked.copy()
        new[t0:t0 + w] = True
        if new.sum() > budget:
            continue
        masked = new
    x[masked] = 0.0
    return x


def video_augment(video: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Block erasure of lip features plus a sign flip of the pose group."""
    x = np.array(video, copy=True)
    T, D = x.shape
    lip = D - cfg.pose_dims
    if rng.random() < cfg.video_erase_p and lip > 0:
        w = int(rng.integers(1, min(cfg.video_erase_max, lip) + 1))
        f0 = int(rng.integers(0, lip - w + 1))
        x[:, f0:f0 + w] = 0.0
    if cfg.pose_dims and rng.random() < cfg.video_flip_p:
        x[:, lip:] = -x[:, lip:]
    return x


# ---------------------------------------------------------------- batching

class BatchError(ValueError):
    pass


def batch_by_length(utts, max_frames: int, key=lambda u: u.frames_v) -> list:
    """Sort by length and pack greedily; padded size (n * longest) never exceeds max_frames."""
    order = sorted(utts, key=lambda u: (key(u), u.id))
    too_long = [u.id for u in order if key(u) > max_frames]
    if too_long:
        raise BatchError(f"utterances longer than max_frames={max_frames}: {', '.join(too_long)}")
    batches, cur, longest = [], [], 0
    for u in order:
        n = key(u)
        if cur and (len(cur) + 1) * max(longest, n) > max_frames:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(u)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    return batches
