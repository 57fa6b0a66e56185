"""Finite-difference gradient cases for every differentiable op (shared by unit and acceptance tests)."""
import numpy as np

from avcpl import tensor as tn
from avcpl.ctc import ctc_loss_op
from avcpl.encoder import EncoderConfig, ModalityDropoutConfig, forward, init_params, sample_branches


def _r(rng, *shape):
    return rng.normal(size=shape)


def _cases():
    c = {}
    c["add"] = lambda rng: ([_r(rng, 2, 3, 4), _r(rng, 4)], lambda a, b: tn.add(a, b))
    c["mul"] = lambda rng: ([_r(rng, 2, 3, 4), _r(rng, 3, 1)], lambda a, b: tn.mul(a, b))
    c["mul_scalar"] = lambda rng: ([_r(rng, 3, 4)], lambda a: tn.mul_scalar(a, -1.7))
    c["gelu"] = lambda rng: ([_r(rng, 2, 5) * 2], lambda a: tn.gelu(a))

    def dropout(rng):
        s = int(rng.integers(1 << 30))
        return [_r(rng, 3, 6)], lambda a: tn.dropout_mask(a, 0.3, np.random.default_rng(s))
    c["dropout_mask"] = dropout
    c["matmul"] = lambda rng: ([_r(rng, 2, 3, 4), _r(rng, 4, 5)], lambda a, b: tn.matmul(a, b))
    c["matmul_batched"] = lambda rng: ([_r(rng, 2, 3, 4), _r(rng, 2, 4, 2)], lambda a, b: tn.matmul(a, b))
    c["conv1d"] = lambda rng: ([_r(rng, 2, 7, 3), _r(rng, 3, 3, 2), _r(rng, 2)],
                               lambda x, w, b: tn.conv1d(x, w, b, stride=1))
    c["conv1d_stride2"] = lambda rng: ([_r(rng, 1, 9, 2), _r(rng, 5, 2, 3), _r(rng, 3)],
                                       lambda x, w, b: tn.conv1d(x, w, b, stride=2))
    c["layer_norm"] = lambda rng: ([_r(rng, 2, 3, 5), 1 + 0.1 * _r(rng, 5), _r(rng, 5)],
                                   lambda x, g, b: tn.layer_norm(x, g, b))
    c["log_softmax"] = lambda rng: ([_r(rng, 2, 3, 6)], lambda a: tn.log_softmax(a))

    def softmax(rng):
        mask = np.ones((2, 1, 4, 5), dtype=bool)
        mask[1, :, :, 3:] = False
        return [_r(rng, 2, 1, 4, 5)], lambda a: tn.softmax(a, mask)
    c["softmax_masked"] = softmax

    def embed(rng):
        ids = rng.integers(0, 6, size=(2, 4))
        return [_r(rng, 6, 3)], lambda t: tn.embed_lookup(t, ids)
    c["embed_lookup"] = embed
    c["concat_time"] = lambda rng: ([_r(rng, 2, 3, 4), _r(rng, 2, 2, 4)], lambda a, b: tn.concat_time([a, b]))
    c["slice_time"] = lambda rng: ([_r(rng, 2, 6, 3)], lambda a: tn.slice_time(a, 1, 4))
    c["repeat_time"] = lambda rng: ([_r(rng, 2, 3, 4)], lambda a: tn.repeat_time(a, 2))
    c["reshape"] = lambda rng: ([_r(rng, 2, 3, 4)], lambda a: tn.reshape(a, (6, 4)))
    c["transpose"] = lambda rng: ([_r(rng, 2, 3, 4)], lambda a: tn.transpose(a, (2, 0, 1)))
    c["sum_all"] = lambda rng: ([_r(rng, 3, 4)], lambda a: tn.sum_all(a))

    def ctc(rng):
        targets = [[1, 2, 2], [3]]
        return [_r(rng, 2, 6, 4)], lambda x: ctc_loss_op(tn.log_softmax(x), np.array([6, 4]), targets)
    c["ctc_loss_op"] = ctc
    return c


CASES = _cases()


def check_case(name: str, seed: int) -> float:
    """Relative error between tape gradients and central differences (float64)."""
    rng = np.random.default_rng(seed)
    arrays, fn = CASES[name](rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = None

    def value(arrs):
        nonlocal probe
        out = fn(*[tn.tensor(a) for a in arrs])
        if probe is None:
            probe = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float((out.data * probe).sum())

    params = [tn.parameter(a.copy()) for a in arrays]
    value(arrays)
    with tn.Tape() as tape:
        out = fn(*params)
        loss = tn.sum_all(tn.mul(out, tn.tensor(probe)))
    grads = tn.backprop(loss, tape)
    worst = 0.0
    for i, p in enumerate(params):
        def f(x, i=i):
            arrs = list(arrays)
            arrs[i] = x
            return value(arrs)
        fd = tn.finite_diff_grad(f, arrays[i], eps=1e-6)
        g = grads.get(p, np.zeros_like(p.data))
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8)
        worst = max(worst, float(np.linalg.norm(g - fd) / denom))
    return worst


def encoder_grad_error(seed: int, n_probe: int = 6) -> float:
    """Directional finite-difference check of the full batched encoder + CTC loss."""
    cfg = EncoderConfig(audio_dim=4, video_dim=3, model_dim=8, n_layers=1, n_heads=2, ffn_dim=8,
                        dropout=0.0, layerdrop=0.0)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lv = np.array([3, 2])
    audio = rng.normal(size=(2, 12, 4))
    video = rng.normal(size=(2, 3, 3))
    branches = sample_branches(2, ModalityDropoutConfig(0.4, 0.5), rng)
    targets = [[3, 4], [5]]

    def loss_of(ps):
        lp, ol = forward(ps, audio, video, lv, branches, train=False)
        return tn.sum_all(ctc_loss_op(lp, ol, targets))

    with tn.Tape() as tape:
        loss = loss_of(params)
    grads = tn.backprop(loss, tape)
    plist = list(params.values())
    worst = 0.0
    for _ in range(n_probe):
        # joint direction over every parameter, so unused weights never isolate a zero derivative
        ds = [rng.normal(size=p.shape) for p in plist]
        analytic = float(sum((grads.get(p, np.zeros_like(p.data)) * d).sum() for p, d in zip(plist, ds)))
        eps = 1e-6
        base = [p.data.copy() for p in plist]
        for p, b, d in zip(plist, base, ds):
            p.data = b + eps * d
        up = float(loss_of(params).data)
        for p, b, d in zip(plist, base, ds):
            p.data = b - eps * d
        dn = float(loss_of(params).data)
        for p, b in zip(plist, base):
            p.data = b
        numeric = (up - dn) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return worst
