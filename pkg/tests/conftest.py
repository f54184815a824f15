"""Shared helpers: deterministic random feasible curves and small defaults."""

from __future__ import annotations

import numpy as np
import pytest

from beamfsi.geometry import BeamCurve, curve_from_jets


def random_feasible_curve(rng: np.random.Generator, elements: int = 8,
                          ell: float = 1.0, amplitude: float = 0.1,
                          modes: int = 3) -> BeamCurve:
    """Smooth random curve with min slope >= 0.3 and |eta_2| <= amplitude.

    Both components are perturbed by sums of squared sines, which vanish to
    first order at the ends so the clamped jets stay exact.
    """
    a = rng.uniform(-1.0, 1.0, modes)
    b = rng.uniform(-1.0, 1.0, modes)
    k = np.arange(1, modes + 1)
    # keep dx eta_1 >= 0.3: the perturbation slope is bounded by sum |a_k| pi k / ell
    budget = np.sum(np.abs(a) * np.pi * k / ell)
    if budget > 0:
        a *= 0.7 / max(budget, 1e-30)
    bsum = np.sum(np.abs(b))
    if bsum > 0:
        b *= amplitude / bsum

    def comp(x, coeffs, d):
        x = np.asarray(x, float)
        out = np.zeros_like(x)
        for ck, kk in zip(coeffs, k):
            w = np.pi * kk / ell
            if d == 0:
                out += ck * np.sin(w * x) ** 2
            elif d == 1:
                out += ck * w * np.sin(2 * w * x)
            else:
                out += ck * 2 * w * w * np.cos(2 * w * x)
        return out

    def f(x, d=0):
        x = np.asarray(x, float)
        base = {0: x, 1: np.ones_like(x), 2: np.zeros_like(x)}[d]
        return np.stack([base + comp(x, a, d), comp(x, b, d)], axis=-1)

    return curve_from_jets(elements, ell, f, lambda x: f(x, 1), lambda x: f(x, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)
