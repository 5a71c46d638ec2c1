import numpy as np

from agsp.model import Arch, SegModel

TINY = Arch(in_channels=4, widths=(4, 4, 4), feature_dim=4, num_classes=3)


def tiny_model(seed=0, arch=TINY, jitter=0.3):
    """A small model with every parameter perturbed so no gradient is trivially zero."""
    m = SegModel(arch, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in m.params:
        m.params[k] = m.params[k] + rng.normal(0.0, jitter, m.params[k].shape)
    return m


def numeric_grads(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            a = f()
            p[idx] = orig - h
            b = f()
            p[idx] = orig
            g[idx] = (a - b) / (2 * h)
        out[k] = g
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max()))
    return worst


ACCEPTANCE = {}


class criterion:
    """Record a PASS/FAIL line for an acceptance criterion; failures still propagate."""

    def __init__(self, key, title):
        self.key, self.title, self.detail = key, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        line = f"[{verdict}] criterion {self.key}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        ACCEPTANCE[self.key] = line
        print(line)
        return False
