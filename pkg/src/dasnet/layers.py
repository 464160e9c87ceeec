"""Parameter-owning conv building blocks over a shared :class:`ParamStore`."""

from __future__ import annotations

import numpy as np

from .tensor import ParamStore, Tensor, add_bias, conv2d, glorot_uniform, he_uniform, relu, transposed_conv2d


def init_conv(store: ParamStore, name: str, cin: int, cout: int, k: int,
              rng: np.random.Generator, he: bool = False) -> None:
    shape = (cout, cin, k, k)
    w = he_uniform(rng, shape, cin * k * k) if he else glorot_uniform(rng, shape)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(cout))


def init_deconv(store: ParamStore, name: str, cin: int, cout: int, k: int,
                rng: np.random.Generator, he: bool = False, stride: int = 2) -> None:
    shape = (cin, cout, k, k)
    # each output pixel of a stride-s transposed conv sees (k/s)² taps per input channel
    w = he_uniform(rng, shape, cin * (k / stride) ** 2) if he else glorot_uniform(rng, shape, transposed=True)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(cout))


def conv(store: ParamStore, name: str, x: Tensor, stride: int = 1, pad: int = 0,
         act: bool = True) -> Tensor:
    y = add_bias(conv2d(x, store[f"{name}.w"], stride, pad), store[f"{name}.b"])
    return relu(y) if act else y


def deconv(store: ParamStore, name: str, x: Tensor, stride: int = 2, pad: int = 1,
           act: bool = True) -> Tensor:
    y = add_bias(transposed_conv2d(x, store[f"{name}.w"], stride, pad), store[f"{name}.b"])
    return relu(y) if act else y
