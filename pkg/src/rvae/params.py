"""Named parameter sets shared by the encoder and decoder networks."""

import copy

import numpy as np

from .autodiff import Tensor

VARIANTS = ("ffnn", "rnn", "brnn")
VAR_FLOOR = 1e-10


class ConfigError(ValueError):
    """Architecture or variant mismatch."""


def check_variant(variant):
    v = str(variant).lower()
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


class ParamSet:
    """An ordered mapping of tensor names to trainable Tensors.

    Subclasses fill ``self.tensors`` in a fixed order; that order is the
    checkpoint layout.
    """

    kind = "params"

    def __init__(self, variant, L, F, H):
        self.variant = check_variant(variant)
        self.L, self.F, self.H = int(L), int(F), int(H)
        self.tensors = {}

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def parameters(self):
        return list(self.tensors.values())

    def dims(self):
        return {"L": self.L, "F": self.F, "H": self.H}

    def copy(self):
        new = copy.copy(self)
        new.tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                       for k, v in self.tensors.items()}
        return new

    def requires_grad_(self, flag=True):
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def load_arrays(self, arrays):
        for name, t in self.tensors.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ConfigError(f"{self.kind}.{name}: shape {a.shape}, expected {t.data.shape}")
            t.data = a.copy()

    def _dense(self, rng, name, n_in, n_out):
        s = np.sqrt(6.0 / (n_in + n_out))
        self.tensors[name + ".W"] = Tensor(rng.uniform(-s, s, (n_in, n_out)), True)
        self.tensors[name + ".b"] = Tensor(np.zeros(n_out), True)

    def _lstm(self, rng, name, n_in, H):
        s = 1.0 / np.sqrt(H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate open at init
        self.tensors[name + ".Wx"] = Tensor(rng.uniform(-s, s, (n_in, 4 * H)), True)
        self.tensors[name + ".Wh"] = Tensor(rng.uniform(-s, s, (H, 4 * H)), True)
        self.tensors[name + ".b"] = Tensor(b, True)

    def lstm_weights(self, name):
        t = self.tensors
        return t[name + ".Wx"], t[name + ".Wh"], t[name + ".b"]
