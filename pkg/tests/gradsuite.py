"""Randomized small instances for the finite-difference gradient suite.

Each builder takes a generator and returns ``(loss_fn, tensors)`` for
:func:`dasnet.gradcheck.check_gradients`. Inputs are float32 like every
activation in the package; reductions happen in float64.
"""

import numpy as np

from dasnet.attention import attend
from dasnet.decoder import semantic_loss
from dasnet.detector import FeaturePyramid
from dasnet.geometry import Box
from dasnet.instance import InstanceSample, ps_head, roi_rect
from dasnet.tensor import ParamStore, Tensor, conv2d, mul, sum_all, transposed_conv2d


def rand_box(rng, label=1, min_side=0.15):
    w, h = rng.uniform(min_side, 0.9, 2)
    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return Box(x, y, x + w, y + h, label)


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def conv_case(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k, 8, 2)
    x = _leaf(rng, (n, cin, h, w))
    kern = _leaf(rng, (cout, cin, k, k), 0.5)
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    r = Tensor(rng.standard_normal((n, cout, ho, wo)))
    return (lambda: sum_all(mul(conv2d(x, kern, stride, pad), r))), [x, kern]


def transposed_case(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([2, 3, 4]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(2, 6, 2)
    x = _leaf(rng, (n, cin, h, w))
    kern = _leaf(rng, (cin, cout, k, k), 0.5)
    ho, wo = (h - 1) * stride - 2 * pad + k, (w - 1) * stride - 2 * pad + k
    r = Tensor(rng.standard_normal((n, cout, ho, wo)))
    return (lambda: sum_all(mul(transposed_conv2d(x, kern, stride, pad), r))), [x, kern]


def attention_case(rng):
    sizes = [int(rng.integers(4, 9))]
    sizes.append(max(1, sizes[0] // 2))
    maps = [_leaf(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 4)), s, s)) for s in sizes]
    n = maps[0].shape[0]
    maps[1] = _leaf(rng, (n,) + maps[1].shape[1:])
    boxes = [rand_box(rng) for _ in range(rng.integers(0, 4))]
    rs = [Tensor(rng.standard_normal(m.shape)) for m in maps]

    def loss():
        out = attend(FeaturePyramid(maps), boxes).maps
        # the square makes the backward depend on the forward values too
        return sum_all(mul(out[0], rs[0])) + sum_all(mul(mul(out[1], out[1]), rs[1]))

    return loss, maps


def semantic_case(rng):
    n = int(rng.integers(1, 3))
    h, w = rng.integers(4, 12, 2)
    logits = _leaf(rng, (n, 2, h, w), 2.0)
    gt = rng.integers(0, 2, (n, h, w))
    boxes = [[rand_box(rng) for _ in range(rng.integers(1, 3))] for _ in range(n)]
    return (lambda: semantic_loss(logits, gt, boxes)), [logits]


def instance_case(rng):
    from dasnet.instance import instance_loss

    k = int(rng.integers(1, 4))
    n, t = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    h = w = int(rng.integers(8, 14))
    store = ParamStore()
    store.add("ps_head.w", rng.standard_normal((2 * k * k, t, 1, 1)) * 0.7)
    store.add("ps_head.b", rng.standard_normal(2 * k * k) * 0.1)
    feats = _leaf(rng, (n, t, h, w))
    samples, masks = [], []
    for _ in range(n):
        gt = rand_box(rng)
        y0, y1, x0, x1 = roi_rect(gt, h, w)
        m = np.zeros((h, w), dtype=bool)
        m[y0:y1, x0:x1] = rng.random((y1 - y0, x1 - x0)) > 0.3
        item = [InstanceSample(rand_box(rng), int(rng.integers(0, 2)), 0) for _ in range(rng.integers(1, 4))]
        samples.append([s if s.label else InstanceSample(s.box, 0, None) for s in item])
        masks.append([m])
    params = [store["ps_head.w"], store["ps_head.b"]]
    return (lambda: instance_loss(ps_head(store, feats), samples, masks, k)), [feats] + params


CASES = {
    "conv2d": conv_case,
    "transposed_conv2d": transposed_case,
    "attention": attention_case,
    "semantic_loss": semantic_case,
    "instance_loss": instance_case,
}
