"""Smooth test functions with closed-form derivatives, used as perturbation
directions and as probes of zero-mean identities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class TestFunction:
    name: str
    f: Callable
    df: Callable
    d2f: Callable

    __test__ = False  # keep pytest from collecting it

    @property
    def is_complex(self):
        return np.iscomplexobj(self.f(np.zeros(1)))


def _const(c):
    return lambda x: np.full(np.shape(x), c, dtype=type(c))


BANK = {
    "x": TestFunction("x", lambda x: np.asarray(x, dtype=float), _const(1.0), _const(0.0)),
    "x2": TestFunction("x2", lambda x: np.asarray(x) ** 2, lambda x: 2 * np.asarray(x),
                       _const(2.0)),
    "sin": TestFunction("sin", np.sin, np.cos, lambda x: -np.sin(x)),
    "expi": TestFunction("expi", lambda x: np.exp(1j * x), lambda x: 1j * np.exp(1j * x),
                         lambda x: -np.exp(1j * x)),
    "const": TestFunction("const", _const(1.0), _const(0.0), _const(0.0)),
}

REAL_BANK = ("x", "x2", "sin")
FULL_BANK = ("x", "x2", "sin", "expi")


def get(name):
    try:
        return BANK[name]
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; known: {sorted(BANK)}") from None
