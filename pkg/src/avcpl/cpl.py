"""Seed training and continuous pseudo-labeling (cache-based and EMA-teacher).

Both CPL loops alternate ``n_labeled`` supervised updates with ``n_unlabeled``
updates on pseudo-labeled audio-visual batches, so over a window the summed
loss is ``N_L * (L_L + lam * L_U)`` with ``lam = N_U / N_L``. Pseudo-labels are
always produced from un-augmented inputs, with dropout disabled and a fixed
fusion mode (``pl_mode``), by greedy CTC decoding.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as tn
from .ctc import TokenSet, ctc_greedy_decode, ctc_loss_op
from .data import AugmentConfig, Utterance, batch_by_length, spec_augment, video_augment
from .encoder import (A_ONLY, V_ONLY, EncoderConfig, ModalityDropoutConfig, ModelParams,
                      branches_for_mode, forward, init_params, pad_batch, sample_branches)
from .metrics import wer
from .optim import AdaGrad, LrSchedule

log = logging.getLogger(__name__)

PL_FUSION = {"AV": "force_av", "A": "force_a", "V": "force_v"}


class CplError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.03
    warmup_steps: int = 100
    hold_until: int = 1000
    decay_every: int = 500
    clip: float = 1.0
    max_frames: int = 320           # padded 40 ms video frames per batch
    steps: int = 1500
    pretrain_steps: int = 500
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0

    def schedule(self) -> LrSchedule:
        return LrSchedule(peak=self.lr, warmup_steps=self.warmup_steps,
                          hold_until=self.hold_until, decay_every=self.decay_every)


@dataclass
class CplConfig:
    algorithm: str = "ema"          # "ema" | "slimipl"
    n_labeled: int = 1              # N_L supervised updates per cycle
    n_unlabeled: int = 1            # N_U unlabeled updates per cycle
    warmup: int = 200               # M
    p_m: float = 0.1                # p_m' = p_a' during CPL
    p_a: float | None = None
    pl_mode: str = "AV"
    cache_size: int = 20            # C, in batches
    cache_p: float = 0.1
    alpha: float = 0.999
    steps: int = 2000               # main-loop updates after warm-up (and cache fill)

    def __post_init__(self):
        problems = []
        if self.algorithm not in ("ema", "slimipl"):
            problems.append(f"algorithm must be 'ema' or 'slimipl', got {self.algorithm!r}")
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            problems.append("n_labeled and n_unlabeled must be >= 1")
        if self.warmup < 0:
            problems.append("warmup must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            problems.append(f"alpha={self.alpha} outside (0, 1]")
        if self.cache_size < 1:
            problems.append("cache_size must be >= 1")
        if not 0.0 <= self.cache_p <= 1.0:
            problems.append(f"cache_p={self.cache_p} outside [0, 1]")
        if self.pl_mode not in PL_FUSION:
            problems.append(f"pl_mode must be one of {sorted(PL_FUSION)}")
        if problems:
            raise CplError("; ".join(problems))
        if self.p_a is None:
            self.p_a = self.p_m

    @property
    def lam(self) -> float:
        return self.n_unlabeled / self.n_labeled

    @property
    def dropout(self) -> ModalityDropoutConfig:
        return ModalityDropoutConfig(self.p_m, self.p_a)

    def horizon(self) -> float:
        """Expected model-history horizon in updates (cache lifetime or EMA time constant)."""
        if self.algorithm == "slimipl":
            return math.inf if self.cache_p == 0 else self.cache_size / self.cache_p
        return math.inf if self.alpha == 1 else 1.0 / (1.0 - self.alpha)


def matched_cache(alpha: float, cache_p: float) -> int:
    """Cache size giving the same horizon as an EMA with decay ``alpha``: C = p / (1 - alpha)."""
    return max(1, round(cache_p / (1.0 - alpha)))


# ---------------------------------------------------------------- train state

class TrainState:
    """Parameters, optimizer and schedule state, RNG and step counter."""

    def __init__(self, params: ModelParams, tcfg: TrainConfig, rng=None, teacher=None):
        self.params = params
        self.tcfg = tcfg
        self.opt = AdaGrad(clip=tcfg.clip)
        self.schedule = tcfg.schedule()
        self.rng = rng if rng is not None else np.random.default_rng(tcfg.seed)
        self.step = 0
        self.teacher = teacher

    def restart_optimizer(self):
        self.opt.reset()
        self.schedule = self.tcfg.schedule()
        self.step = 0

    def save(self, path, meta: dict | None = None):
        header = {
            "encoder": self.params.cfg.to_dict(),
            "version": self.params.version,
            "step": self.step,
            "schedule": self.schedule.state(),
            "rng": _jsonable_rng(self.rng),
            "train": _train_cfg_dict(self.tcfg),
            "meta": meta or {},
        }
        tensors = {f"param/{k}": v for k, v in self.params.arrays().items()}
        if self.teacher is not None:
            tensors.update({f"teacher/{k}": v for k, v in self.teacher.arrays().items()})
        tensors.update({f"adagrad/{k}": v for k, v in self.opt.accum.items()})
        ckpt.save(path, header, tensors)

    @classmethod
    def load(cls, path, tcfg: TrainConfig | None = None) -> "TrainState":
        header, tensors = ckpt.load(path)
        ecfg = EncoderConfig(**header["encoder"])
        tcfg = tcfg or _train_cfg_from_dict(header["train"])
        params = ModelParams.from_arrays(ecfg, _section(tensors, "param/"), header["version"])
        teacher_arrays = _section(tensors, "teacher/")
        teacher = ModelParams.from_arrays(ecfg, teacher_arrays) if teacher_arrays else None
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
        st = cls(params, tcfg, rng=rng, teacher=teacher)
        st.step = header["step"]
        st.schedule = LrSchedule(**header["schedule"])
        st.opt.accum = dict(_section(tensors, "adagrad/"))
        return st


def load_params(path) -> ModelParams:
    return TrainState.load(path).params


def _section(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _jsonable_rng(rng) -> dict:
    return rng.bit_generator.state


def _train_cfg_dict(t: TrainConfig) -> dict:
    d = asdict(t)
    return d


def _train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    aug = d.pop("augment", None)
    return TrainConfig(augment=AugmentConfig(**aug) if aug else None, **d)


# ---------------------------------------------------------------- updates

def adagrad_step(state: TrainState, grads: dict, clip: float | None = None) -> TrainState:
    """One clipped AdaGrad update of ``state.params``; ``grads`` keyed by parameter name."""
    if clip is not None:
        state.opt.clip = clip
    state.opt.step(state.params, grads, state.schedule.lr(state.step))
    state.step += 1
    state.params.version += 1
    return state


def _prepare(utts, aug: AugmentConfig | None, rng, train: bool):
    audio = [u.audio for u in utts]
    video = [u.video for u in utts]
    if train and aug is not None:
        audio = [spec_augment(a, aug, rng) for a in audio]
        video = [video_augment(v, aug, rng) for v in video]
    a, _ = pad_batch(audio)
    v, lv = pad_batch(video)
    return a, v, lv


def loss_and_grads(params: ModelParams, utts, targets, branches, rng, aug=None):
    """Mean per-utterance CTC loss and gradients (by parameter name)."""
    a, v, lv = _prepare(utts, aug, rng, True)
    with tn.Tape() as tape:
        lp, ol = forward(params, a, v, lv, branches, train=True, rng=rng)
        nll = ctc_loss_op(lp, ol, targets)
        loss = tn.mul_scalar(tn.sum_all(nll), 1.0 / len(utts))
    grads = tn.backprop(loss, tape)
    by_name = {k: grads[p] for k, p in params.items() if p in grads}
    return float(loss.data), by_name


def train_update(state: TrainState, utts, targets, drop: ModalityDropoutConfig, tokens=None) -> float:
    """One supervised-style update on (utterances, label sequences); empty targets are skipped."""
    keep = [i for i, t in enumerate(targets) if len(t) > 0]
    if not keep:
        state.step += 1
        return float("nan")
    utts = [utts[i] for i in keep]
    targets = [targets[i] for i in keep]
    branches = sample_branches(len(utts), drop, state.rng)
    loss, grads = loss_and_grads(state.params, utts, targets, branches, state.rng, state.tcfg.augment)
    adagrad_step(state, grads)
    return loss


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> None:
    """phi <- alpha * phi + (1 - alpha) * theta, elementwise, in place."""
    for k, t in teacher.items():
        s = student[k].data
        t.data *= t.data.dtype.type(alpha)
        t.data += t.data.dtype.type(1.0 - alpha) * s


# ---------------------------------------------------------------- pseudo-labels

def generate_pls(params: ModelParams, utts, pl_mode: str = "AV", max_frames: int = 2000,
                 trace: list | None = None) -> list[list[int]]:
    """Greedy-decoded pseudo-labels; inputs un-augmented, dropout off, fusion fixed by ``pl_mode``."""
    fusion = PL_FUSION[pl_mode]
    out = {}
    for batch in batch_by_length(utts, max(max_frames, max(u.frames_v for u in utts))):
        a, v, lv = _prepare(batch, None, None, False)
        branches = branches_for_mode(fusion, len(batch), None, None)
        lp, ol = forward(params, a, v, lv, branches, train=False)
        if trace is not None:
            trace.append({"train": False, "augment": False, "fusion": fusion,
                          "branches": branches.tolist(), "n": len(batch)})
        for i, u in enumerate(batch):
            out[u.id] = ctc_greedy_decode(lp.data[i, : ol[i]])
    return [out[u.id] for u in utts]


def generate_pl(params: ModelParams, utt: Utterance, pl_mode: str = "AV") -> list[int]:
    return generate_pls(params, [utt], pl_mode)[0]


# ---------------------------------------------------------------- bookkeeping

@dataclass
class StepRecord:
    step: int
    kind: str           # "L" supervised, "U" unlabeled, "P" pre-training, "W" warm-up
    loss: float
    pl_age: float | None = None
    n_skipped: int = 0


@dataclass
class RunResult:
    params: ModelParams
    state: TrainState
    history: list = field(default_factory=list)
    cycles: list = field(default_factory=list)      # per-window (L_L, L_U, total)
    pl_trace: list = field(default_factory=list)
    empty_pls: int = 0

    @property
    def teacher(self):
        return self.state.teacher


class Monitor:
    """Optional side channel: validation WER for LR plateau decay, metrics rows, PL quality.

    ``gold`` maps unlabeled utterance ids to transcripts; it is only read here, never by
    the training loops.
    """

    def __init__(self, valid=None, eval_every: int = 0, gold: dict | None = None,
                 tokens: TokenSet | None = None, split_name: str = "valid", modes=("AVSR",)):
        self.valid = valid
        self.eval_every = eval_every
        self.gold = gold or {}
        self.tokens = tokens or TokenSet()
        self.split_name = split_name
        self.modes = modes
        self.rows: list[dict] = []
        self._ages: list[float] = []
        self._pl_errs = None

    def on_pls(self, step: int, utts, pls, gen_steps):
        self._ages.extend(step - g for g in gen_steps)
        if self.gold:
            rep = self._pl_errs or _blank_report()
            for u, pl in zip(utts, pls):
                ref = self.gold.get(u.id)
                if ref is not None:
                    rep += wer(ref.split(), self.tokens.decode_ids(pl).split())
            self._pl_errs = rep

    def after_step(self, state: TrainState, phase: str):
        if not self.eval_every or self.valid is None or state.step % self.eval_every:
            return
        self.evaluate_now(state, phase)

    def evaluate_now(self, state: TrainState, phase: str = ""):
        from .evaluate import evaluate
        age = float(np.mean(self._ages)) if self._ages else float("nan")
        plw = self._pl_errs.wer if self._pl_errs is not None and self._pl_errs.n_ref else float("nan")
        for mode in self.modes:
            rep = evaluate(state.params, self.valid, mode, "greedy", tokens=self.tokens)
            row = {"step": state.step, "split": self.split_name, "mode": mode, "decode": "greedy",
                   **rep.as_row(), "pl_age_mean": age, "pl_wer_vs_gold": plw, "phase": phase}
            self.rows.append(row)
            if mode == self.modes[0] and state.schedule.due(state.step):
                if state.schedule.report(state.step, rep.wer):
                    log.info("step %d: validation WER %.3f did not improve, lr scale now %.3g",
                             state.step, rep.wer, state.schedule.scale)
        self._ages = []
        self._pl_errs = None

    def pl_age_mean(self) -> float:
        return float(np.mean(self._ages)) if self._ages else float("nan")


def _blank_report():
    from .metrics import WerReport
    return WerReport()


class _Sampler:
    """Cycles through batches in a fresh random order each epoch."""

    def __init__(self, batches, rng, exclude=None):
        self.batches = batches
        self.rng = rng
        self.order: list[int] = []
        self.exclude = exclude

    def next_index(self) -> int:
        for _ in range(2 * len(self.batches) + 2):
            if not self.order:
                self.order = list(self.rng.permutation(len(self.batches)))
            i = int(self.order.pop())
            if self.exclude is None or i not in self.exclude():
                return i
        raise CplError("no batch available outside the cache")

    def next(self):
        return self.batches[self.next_index()]


def _labeled_batches(L, tokens, max_frames):
    if not L:
        raise CplError("labeled set is empty")
    missing = [u.id for u in L if u.text is None]
    if missing:
        raise CplError(f"labeled utterances without transcripts: {', '.join(missing[:5])}")
    return [(b, [tokens.encode_text(u.text) for u in b]) for b in batch_by_length(L, max_frames)]


def _supervised(state, sampler, drop, history, kind, monitor, result_phase):
    b, tg = sampler.next()
    loss = train_update(state, b, tg, drop)
    history.append(StepRecord(state.step, kind, loss))
    if monitor is not None:
        monitor.after_step(state, result_phase)
    return loss


# ---------------------------------------------------------------- seed training

def train_supervised(state: TrainState, L, steps: int, drop: ModalityDropoutConfig,
                     tokens=None, monitor: Monitor | None = None, kind: str = "L", history=None):
    tokens = tokens or TokenSet()
    sampler = _Sampler(_labeled_batches(L, tokens, state.tcfg.max_frames), state.rng)
    history = history if history is not None else []
    for _ in range(steps):
        _supervised(state, sampler, drop, history, kind, monitor, kind)
    return history


def train_seed(L, enc_cfg: EncoderConfig, drop: ModalityDropoutConfig | None = None,
               pretrain: str = "none", tcfg: TrainConfig | None = None, tokens=None,
               monitor: Monitor | None = None, init: ModelParams | None = None) -> RunResult:
    """Supervised seed model. ``pretrain`` = audio_only / video_only trains on one stream
    first, then restarts the optimizer before joint training with modality dropout."""
    tcfg = tcfg or TrainConfig()
    drop = drop or ModalityDropoutConfig(0.5, 0.5)
    if not L:
        raise CplError("train_seed: labeled set is empty")
    params = init.copy() if init is not None else init_params(enc_cfg, seed=tcfg.seed)
    state = TrainState(params, tcfg)
    history = []
    if pretrain not in ("none", "audio_only", "video_only"):
        raise CplError(f"unknown pretrain mode {pretrain!r}")
    if pretrain != "none":
        single = ModalityDropoutConfig(0.0, 1.0 if pretrain == "audio_only" else 0.0)
        train_supervised(state, L, tcfg.pretrain_steps, single, tokens, monitor, "P", history)
        state.restart_optimizer()
    train_supervised(state, L, tcfg.steps, drop, tokens, monitor, "L", history)
    return RunResult(state.params, state, history)


# ---------------------------------------------------------------- PL cache

@dataclass
class CacheEntry:
    batch_index: int
    utts: list
    pls: list
    step: int


class PlCache:
    """Fixed-capacity cache of pseudo-labeled unlabeled batches."""

    def __init__(self, capacity: int, p: float, rng):
        if capacity < 1:
            raise CplError("cache capacity must be >= 1")
        self.capacity = capacity
        self.p = p
        self.rng = rng
        self.entries: list[CacheEntry] = []
        self.lifetimes: list[int] = []

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def batch_indices(self) -> set:
        return {e.batch_index for e in self.entries}

    def add(self, entry: CacheEntry):
        if self.full:
            raise CplError("cache is full")
        self.entries.append(entry)

    def draw(self, step: int, regenerate):
        """Pick a random entry; with probability p replace it by ``regenerate()``.

        Returns (entry to train on, replaced?). The replacement is what gets trained on.
        """
        i = int(self.rng.integers(len(self.entries)))
        if self.p > 0 and self.rng.random() < self.p:
            old = self.entries[i]
            self.lifetimes.append(step - old.step)
            self.entries[i] = regenerate()
            return self.entries[i], True
        return self.entries[i], False


def _unlabeled_batches(U, max_frames):
    if not U:
        raise CplError("unlabeled set is empty")
    leaked = [u.id for u in U if u.text is not None]
    if leaked:
        raise CplError(f"unlabeled utterances carry transcripts: {', '.join(leaked[:5])}")
    return batch_by_length(U, max_frames)


def _cpl_state(seed: ModelParams, tcfg: TrainConfig, rng=None) -> TrainState:
    # a fresh TrainState is an optimizer restart
    return TrainState(seed.copy(), tcfg, rng=rng)


def _unlabeled_update(state, entry_utts, pls, gen_step, drop, result, monitor):
    age = state.step - gen_step
    n_empty = sum(1 for p in pls if not p)
    loss = train_update(state, entry_utts, pls, drop)
    result.empty_pls += n_empty
    result.history.append(StepRecord(state.step, "U", loss, pl_age=age, n_skipped=n_empty))
    if monitor is not None:
        monitor.on_pls(state.step - 1, entry_utts, pls, [gen_step] * len(pls))
        monitor.after_step(state, "cpl")
    return loss


def _close_cycle(result, start, lam):
    window = result.history[start:]
    ll = [r.loss for r in window if r.kind == "L" and not math.isnan(r.loss)]
    lu = [r.loss for r in window if r.kind == "U" and not math.isnan(r.loss)]
    mean_l = float(np.mean(ll)) if ll else 0.0
    mean_u = float(np.mean(lu)) if lu else 0.0
    result.cycles.append((mean_l, mean_u, mean_l + lam * mean_u))


def av_slimipl(L, U, seed: ModelParams, cfg: CplConfig, tcfg: TrainConfig | None = None,
               tokens=None, monitor: Monitor | None = None) -> RunResult:
    """Cache-based continuous pseudo-labeling."""
    tcfg = tcfg or TrainConfig()
    tokens = tokens or TokenSet()
    ubatches = _unlabeled_batches(U, tcfg.max_frames)
    if cfg.cache_size > len(ubatches):
        raise CplError(f"cache size {cfg.cache_size} exceeds the {len(ubatches)} unlabeled batches")
    state = _cpl_state(seed, tcfg)
    result = RunResult(state.params, state)
    drop = cfg.dropout
    lsampler = _Sampler(_labeled_batches(L, tokens, tcfg.max_frames), state.rng)
    cache = PlCache(cfg.cache_size, cfg.cache_p, state.rng)
    usampler = _Sampler(ubatches, state.rng, exclude=cache.batch_indices)

    def fresh_entry():
        i = usampler.next_index()
        utts = ubatches[i]
        pls = generate_pls(state.params, utts, cfg.pl_mode, trace=result.pl_trace)
        return CacheEntry(i, utts, pls, state.step)

    for _ in range(cfg.warmup):
        _supervised(state, lsampler, drop, result.history, "W", monitor, "warmup")
    while not cache.full:
        cache.add(fresh_entry())
        _supervised(state, lsampler, drop, result.history, "L", monitor, "fill")
    per = cfg.n_labeled + cfg.n_unlabeled
    for _ in range(cfg.steps // per):
        start = len(result.history)
        for _ in range(cfg.n_labeled):
            _supervised(state, lsampler, drop, result.history, "L", monitor, "cpl")
        for _ in range(cfg.n_unlabeled):
            entry, _ = cache.draw(state.step, fresh_entry)
            _unlabeled_update(state, entry.utts, entry.pls, entry.step, drop, result, monitor)
        _close_cycle(result, start, cfg.lam)
    result.cache = cache
    return result


def av_ema_pl(L, U, seed: ModelParams, cfg: CplConfig, tcfg: TrainConfig | None = None,
              tokens=None, monitor: Monitor | None = None) -> RunResult:
    """EMA-teacher continuous pseudo-labeling."""
    tcfg = tcfg or TrainConfig()
    tokens = tokens or TokenSet()
    ubatches = _unlabeled_batches(U, tcfg.max_frames)
    state = _cpl_state(seed, tcfg)
    state.teacher = seed.copy()
    result = RunResult(state.params, state)
    drop = cfg.dropout
    lsampler = _Sampler(_labeled_batches(L, tokens, tcfg.max_frames), state.rng)
    usampler = _Sampler(ubatches, state.rng)

    def sup(kind, phase):
        _supervised(state, lsampler, drop, result.history, kind, monitor, phase)
        ema_update(state.teacher, state.params, cfg.alpha)

    for _ in range(cfg.warmup):
        sup("W", "warmup")
    per = cfg.n_labeled + cfg.n_unlabeled
    for _ in range(cfg.steps // per):
        start = len(result.history)
        for _ in range(cfg.n_labeled):
            sup("L", "cpl")
        for _ in range(cfg.n_unlabeled):
            utts = usampler.next()
            pls = generate_pls(state.teacher, utts, cfg.pl_mode, trace=result.pl_trace)
            _unlabeled_update(state, utts, pls, state.step, drop, result, monitor)
            ema_update(state.teacher, state.params, cfg.alpha)
        _close_cycle(result, start, cfg.lam)
    return result


def run_cpl(L, U, seed: ModelParams, cfg: CplConfig, tcfg=None, tokens=None, monitor=None) -> RunResult:
    fn = av_ema_pl if cfg.algorithm == "ema" else av_slimipl
    return fn(L, U, seed, cfg, tcfg, tokens, monitor)


# ---------------------------------------------------------------- staged pipelines

@dataclass
class Stage:
    mode: str                       # "seed" | "cpl" | "finetune"
    labeled: list
    unlabeled: list | None = None
    cpl: CplConfig | None = None
    train: TrainConfig | None = None
    drop: ModalityDropoutConfig | None = None
    name: str = ""


def staged_pipeline(stages, enc_cfg: EncoderConfig | None = None, workdir=None,
                    init: ModelParams | None = None, tokens=None, monitor_factory=None) -> tuple:
    """Run stages in order, each from the previous stage's checkpoint with a fresh optimizer.

    Returns (final params, list of RunResult). Checkpoints go to ``workdir/stageNN.avcp``.
    """
    if not stages:
        raise CplError("stage list is empty")
    tokens = tokens or TokenSet()
    params = init
    results = []
    prev_path = None
    for i, st in enumerate(stages):
        if prev_path is not None:
            params = TrainState.load(prev_path).params
        tcfg = st.train or TrainConfig()
        mon = monitor_factory(i, st) if monitor_factory else None
        if st.mode == "seed":
            if enc_cfg is None and params is None:
                raise CplError("seed stage needs an encoder config")
            res = train_seed(st.labeled, enc_cfg or params.cfg, st.drop, "none", tcfg, tokens, mon,
                             init=params)
        elif st.mode == "cpl":
            if params is None:
                raise CplError(f"stage {i}: cpl needs a previous checkpoint or init params")
            res = run_cpl(st.labeled, st.unlabeled, params, st.cpl or CplConfig(), tcfg, tokens, mon)
        elif st.mode == "finetune":
            if params is None:
                raise CplError(f"stage {i}: finetune needs a previous checkpoint or init params")
            res = train_seed(st.labeled, params.cfg, st.drop, "none", tcfg, tokens, mon, init=params)
        else:
            raise CplError(f"stage {i}: unknown mode {st.mode!r}")
        results.append(res)
        params = res.params
        if workdir is not None:
            prev_path = Path(workdir) / f"stage{i:02d}.avcp"
            res.state.save(prev_path, meta={"stage": i, "mode": st.mode, "name": st.name})
    return params, results
