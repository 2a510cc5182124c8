"""Randomized gradient-check cases shared by the unit and acceptance suites."""
import numpy as np

from dfscad import autograd as ag
from dfscad.autograd import Tensor
from dfscad.losses import LossWeights, dfsc_loss, masked_ts_loss, msd, total_loss


def project(y, seed=1):
    """Scalar projection of a tensor with fixed random weights."""
    r = np.random.default_rng(seed).normal(size=y.shape)
    return (y * Tensor(r)).sum()


def _shape(rng, max_c=4, max_hw=8, min_hw=2):
    return (int(rng.integers(1, max_c + 1)), int(rng.integers(min_hw, max_hw + 1)), int(rng.integers(min_hw, max_hw + 1)))


def operator_cases(seed):
    """One randomized instance per registered operator: (name, build, arrays)."""
    rng = np.random.default_rng(seed)
    s = _shape(rng)
    x = rng.normal(size=s)
    y = rng.normal(size=s)
    c_out = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    if s[1] + 2 * pad < k or s[2] + 2 * pad < k:
        pad = k
    kern = rng.normal(size=(c_out, s[0], k, k))
    bias = rng.normal(size=c_out)
    pool_k = int(rng.integers(1, min(s[1], s[2]) + 1))
    hw2 = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    gamma, beta = rng.normal(size=s[0]), rng.normal(size=s[0])
    xn = x + np.sign(x) * 0.05  # keep relu away from its kink
    return [
        ("add", lambda a, b: project(a + b), [x, y]),
        ("add_broadcast", lambda a, b: project(a + b), [x, y[:, :1, :1]]),
        ("sub", lambda a, b: project(a - b), [x, y]),
        ("mul", lambda a, b: project(a * b), [x, y]),
        ("div", lambda a, b: project(a / b), [x, np.abs(y) + 0.5]),
        ("neg", lambda a: project(-a), [x]),
        ("square", lambda a: project(a.square()), [x]),
        ("sum", lambda a: project(a.sum(axis=0)), [x]),
        ("mean", lambda a: project(a.mean(axis=(1, 2), keepdims=True)), [x]),
        ("reshape", lambda a: project(a.reshape(-1)), [x]),
        ("getitem", lambda a: project(a[: max(1, s[0] // 2)]), [x]),
        ("relu", lambda a: project(ag.relu(a)), [xn]),
        ("sigmoid", lambda a: project(ag.sigmoid(a)), [x]),
        ("concat", lambda a, b: project(ag.concat([a, b], axis=0)), [x, y]),
        ("l2_normalize", lambda a: project(ag.l2_normalize(a, axis=0)), [x]),
        ("channel_norm", lambda a: project(ag.channel_norm(a, axis=0)), [x]),
        ("conv2d", lambda a, w, b: project(ag.conv2d(a, w, b, stride=stride, padding=pad)), [x, kern, bias]),
        ("avg_pool2d", lambda a: project(ag.avg_pool2d(a, pool_k, max(1, stride))), [x]),
        ("instance_norm", lambda a, g, b: project(ag.instance_norm(a, g, b)), [x, gamma, beta]),
        ("bilinear_resize", lambda a: project(ag.bilinear_resize(a, *hw2)), [x]),
    ]


def loss_cases(seed):
    rng = np.random.default_rng(seed)
    c, h, w = (int(v) for v in rng.integers(2, 9, size=3))
    t, s_t, s_a, a = (rng.normal(size=(c, h, w)) for _ in range(4))
    q = float(rng.choice([0.0, 0.5, 0.9, 0.999]))
    m = float(rng.choice([0.4, 1.0, 1.7]))
    tt = Tensor(t)
    weights = LossWeights(margin=m, q_ts=q, q_ta=q)
    return [
        (lambda x, y: msd(x, y), [s_a, a]),
        (lambda x: masked_ts_loss(tt, x, q), [s_t]),
        (lambda x: dfsc_loss(tt, x, q, m), [a]),
        (lambda x: dfsc_loss(tt, x, q, m, order="normalize_first"), [a]),
        (lambda x, y, z: total_loss(tt, x, y, z, weights)[0], [s_t, s_a, a]),
    ]
