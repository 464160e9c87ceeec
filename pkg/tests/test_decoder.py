import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dasnet.attention import attend, attend_batch
from dasnet.data import DatasetConfig, generate_dataset
from dasnet.decoder import (DecoderConfig, combine_class_probs, foreground_prob, init_decoder, init_seg_head,
                            merge_topdown, semantic_infer, semantic_loss, seg_logits)
from dasnet.detector import DetectorConfig, FeaturePyramid, backbone_forward, init_detector
from dasnet.geometry import Box, union_mask
from dasnet.gradcheck import check_gradients
from dasnet.tensor import ParamStore, ShapeError, Tensor, backward, precision, sgd_momentum_step

TOY_DET = DetectorConfig(num_classes=2, image_size=16, channels=(4, 6, 8), convs_per_scale=1)
TOY_DEC = DecoderConfig.for_detector(TOY_DET, (4, 4))


def build(det=TOY_DET, dec=TOY_DEC, seed=0, detector=True):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    if detector:
        init_detector(store, det, rng)
    init_decoder(store, dec, rng)
    init_seg_head(store, dec, rng)
    return store


def zero_pyramid(cfg=DecoderConfig(), size=64, n=1):
    return [Tensor(np.zeros((n, c, size >> (k + 2), size >> (k + 2)))) for k, c in enumerate(cfg.in_channels)]


def test_logit_shape_chain():
    cfg = DecoderConfig()
    store = build(DetectorConfig(), cfg, detector=False)
    out = seg_logits(store, cfg, zero_pyramid(cfg, n=2))
    assert out.shape == (2, 2, 64, 64)
    assert merge_topdown(store, cfg, zero_pyramid(cfg)).shape == (1, cfg.feature_channels, 64, 64)


def test_shape_mismatch_rejected():
    cfg = DecoderConfig()
    store = build(DetectorConfig(), cfg, detector=False)
    maps = zero_pyramid(cfg)
    with pytest.raises(ShapeError):
        seg_logits(store, cfg, maps[:2])
    maps[1] = Tensor(np.zeros((1, 48, 5, 5)))
    with pytest.raises(ShapeError):
        seg_logits(store, cfg, maps)
    maps[1] = Tensor(np.zeros((1, 7, 8, 8)))
    with pytest.raises(ShapeError):
        seg_logits(store, cfg, maps)


def test_empty_attention_gives_spatially_constant_logits_at_init():
    cfg = DecoderConfig()
    store = build(DetectorConfig(), cfg, detector=False)
    out = seg_logits(store, cfg, zero_pyramid(cfg)).data
    assert np.ptp(out, axis=(2, 3)).max() == 0.0


def test_empty_attention_response_ignores_the_image():
    # with trained (non-zero) biases the response is no longer constant, but it
    # still cannot depend on the image once every cell is masked
    det, cfg = DetectorConfig(), DecoderConfig()
    store = build(det, cfg)
    rng = np.random.default_rng(1)
    for name, t in store.items():
        if name.endswith(".b"):
            t.data[:] = rng.uniform(-0.5, 0.5, t.shape)
    outs = []
    for seed in (2, 3):
        pyr = backbone_forward(store, det, Tensor(np.random.default_rng(seed).random((1, 3, 64, 64))))
        outs.append(seg_logits(store, cfg, attend(pyr, [])).data)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_decoder_has_no_per_class_parameters():
    store = build(DetectorConfig(num_classes=5), DecoderConfig())
    names = [n for n in store.names() if not n.startswith("detector.")]
    assert all(n.startswith("decoder.") or n.startswith("seg_head.") for n in names)
    assert not any(ch.isdigit() and f"class{ch}" in n for n in names for ch in "012345")
    # same parameter count whatever the number of classes
    other = build(DetectorConfig(num_classes=1), DecoderConfig())
    assert [n for n in other.names() if not n.startswith("detector.")] == names


def logits_from(values):
    """N×2×H×W tensor with channel 1 minus channel 0 equal to ``values``."""
    v = np.asarray(values, dtype=np.float64)
    return Tensor(np.stack([np.zeros_like(v), v], axis=1), requires_grad=True)


def test_semantic_loss_uniform_logits_is_ln2():
    logits = Tensor(np.zeros((1, 2, 8, 8)), requires_grad=True)
    gt = np.random.default_rng(0).integers(0, 2, (1, 8, 8))
    loss = semantic_loss(logits, gt, [[Box(0.1, 0.1, 0.6, 0.9)]])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_semantic_loss_saturated_correct():
    gt = np.zeros((1, 8, 8), dtype=np.int64)
    gt[0, 2:6, 2:6] = 1
    logits = logits_from(np.where(gt == 1, 20.0, -20.0))
    assert semantic_loss(logits, gt, [[Box(0, 0, 1, 1)]]).item() < 0.01


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_outside_pixels_are_ignored(seed):
    rng = np.random.default_rng(seed)
    n, h, w = 2, 16, 16
    boxes = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 0.6, 2)
        boxes.append([Box(x0, y0, x0 + rng.uniform(0.1, 0.4), y0 + rng.uniform(0.1, 0.4))])
    inside = np.stack([union_mask(b, h, w) for b in boxes])
    gt = rng.integers(0, 2, (n, h, w))
    base = rng.standard_normal((n, 2, h, w))
    logits = Tensor(base, requires_grad=True)
    loss = semantic_loss(logits, gt, boxes)
    backward(loss)
    assert not logits.grad.transpose(1, 0, 2, 3)[:, ~inside].any()
    assert np.abs(logits.grad.transpose(1, 0, 2, 3)[:, inside]).max() > 0
    noisy = base + np.where(inside[:, None], 0.0, rng.standard_normal(base.shape) * 5)
    assert semantic_loss(Tensor(noisy), gt, boxes).item() == loss.item()


def test_semantic_loss_errors():
    logits = Tensor(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ValueError):
        semantic_loss(logits, np.zeros((1, 8, 8)), [[]])
    with pytest.raises(ShapeError):
        semantic_loss(logits, np.zeros((1, 4, 8)), [[Box(0, 0, 1, 1)]])


def generic_biases(store, seed=5):
    """Small positive biases keep pre-activations off the relu kink, where differences are one-sided."""
    rng = np.random.default_rng(seed)
    for name, t in store.items():
        if name.endswith(".b"):
            t.data[:] = rng.uniform(0.05, 0.3, t.shape)


def test_gradient_through_decoder_and_attention():
    # deep stacks in f32 carry ~1e-3 roundoff at eps=1e-3, so the composite check runs in float64
    with precision(np.float64):
        store = build()
        generic_biases(store)
        img = Tensor(np.random.default_rng(1).random((1, 3, 16, 16)))
        pyr = backbone_forward(store, TOY_DET, img)
        src = FeaturePyramid([Tensor(m.data, requires_grad=True) for m in pyr.maps])
        boxes = [Box(0.1, 0.2, 0.7, 0.8, 1)]
        gt = np.zeros((1, 16, 16), dtype=np.int64)
        gt[0, 5:11, 3:9] = 1
        params = [store[n] for n in store.names() if not n.startswith("detector.")]

        def loss():
            return semantic_loss(seg_logits(store, TOY_DEC, attend(src, boxes)), gt, [boxes])

        errs = check_gradients(loss, params + src.maps, max_probes=40, rng=np.random.default_rng(0))
    assert max(errs.values()) < 1e-6, errs


def test_memorizes_one_sample():
    det, dec = DetectorConfig(), DecoderConfig()
    sample = generate_dataset(0, 1, DatasetConfig())[0]
    store = build(det, dec)
    store.freeze("detector.")
    frozen = {n: store[n].data.copy() for n in store.names() if n.startswith("detector.")}
    pyr = backbone_forward(store, det, Tensor(sample.image[None]))
    label = sample.classes()[0]
    boxes = sample.boxes(label)
    gt = (sample.label_map() == label)[None]
    for _ in range(500):
        loss = semantic_loss(seg_logits(store, dec, attend_batch(pyr, [boxes])), gt, [boxes])
        assert np.isfinite(loss.item()) and loss.item() >= 0
        backward(loss)
        sgd_momentum_step(store, 0.05, 0.9)
    assert loss.item() < 0.05
    assert all(store[n].data.tobytes() == v.tobytes() for n, v in frozen.items())


def test_combine_max_rule():
    a = np.array([[0.9, 0.2], [0.4, 0.55]])
    b = np.array([[0.6, 0.7], [0.45, 0.55]])
    out = combine_class_probs({1: a, 2: b}, (2, 2))
    # ties go to the lower class id
    assert out.tolist() == [[1, 2], [0, 1]]
    assert not combine_class_probs({}, (3, 3)).any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_combine_properties(seed, classes):
    rng = np.random.default_rng(seed)
    probs = {l: rng.random((6, 6)) for l in range(1, classes + 1)}
    out = combine_class_probs(probs, (6, 6))
    assert out.min() >= 0 and out.max() <= classes
    best = np.max(np.stack(list(probs.values())), axis=0)
    assert np.all(best[out > 0] >= 0.5)
    assert np.all(out[best < 0.5] == 0)
    if classes == 1:
        assert np.array_equal(out, (probs[1] >= 0.5).astype(int))


def test_foreground_prob():
    logits = np.array([[[[0.0, 3.0]], [[0.0, -1.0]]]])
    p = foreground_prob(logits)
    assert p[0, 0, 0] == 0.5
    assert p[0, 0, 1] == pytest.approx(1 / (1 + math.exp(4)))


def test_infer_without_detections_is_background():
    det, dec = DetectorConfig(), DecoderConfig()
    store = build(det, dec)
    out = semantic_infer(store, det, dec, np.random.default_rng(0).random((3, 64, 64)), [])
    assert out.shape == (64, 64) and not out.any()


def test_infer_labels_stay_inside_detections():
    det, dec = DetectorConfig(), DecoderConfig()
    store = build(det, dec)
    store["seg_head.b"].data[:] = [-5.0, 5.0]  # foreground everywhere
    dets = [Box(0.1, 0.1, 0.4, 0.4, 2, 0.9), Box(0.5, 0.5, 0.9, 0.8, 3, 0.8)]
    out = semantic_infer(store, det, dec, np.random.default_rng(0).random((3, 64, 64)), dets)
    assert np.array_equal(out > 0, union_mask(dets, 64, 64))
    assert set(np.unique(out)) == {0, 2, 3}
