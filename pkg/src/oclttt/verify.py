"""Self-check suites: gradients, temperature limit, BN mixing, restoration, mIoU."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import check_gradients
from .loss import PairSampling, PredictionMap, FLIPPED, ocl_total, verify_temperature_limit
from .metrics import confusion_matrix, iou_per_class, miou
from .model import MIXED_STATS, SegNetToy, default_descriptor, estimate_test_bn_stats, hwc_to_nchw

GRAD_TOL = 1e-4
# The network objective is piecewise smooth (ReLU); a smaller step keeps
# probes from straddling a kink.
OBJECTIVE_EPS = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def as_dict(self):
        return {"suite": self.name, "passed": self.passed, "seconds": round(self.seconds, 3), **self.detail}


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def op_cases():
    """Scalar test functions, one per differentiable op family: name -> builder(rng) -> (fn, leaves)."""

    def binary(name):
        def build(rng):
            a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4, low=0.5, high=1.5)
            w = rng.normal(size=(3, 4))
            return (lambda: ad.sum_(getattr(ad, name)(a, b) * w)), [a, b]
        return build

    def unary(name, low=-1.0, high=1.0):
        def build(rng):
            a = _leaf(rng, 5, 3, low=low, high=high)
            w = rng.normal(size=(5, 3))
            return (lambda: ad.sum_(getattr(ad, name)(a) * w)), [a]
        return build

    def matmul(rng):
        a, b = _leaf(rng, 4, 3), _leaf(rng, 3, 2)
        return (lambda: ad.sum_(ad.matmul(a, b) * ad.matmul(a, b))), [a, b]

    def conv(stride, pad, k):
        def build(rng):
            x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, k, k), _leaf(rng, 4)
            ho = (7 + 2 * pad - k) // stride + 1
            wo = (6 + 2 * pad - k) // stride + 1
            out_w = rng.normal(size=(2, 4, ho, wo))

            def f():
                y = ad.conv2d(x, w, b, stride=stride, pad=pad)
                return ad.sum_(y * y * out_w)
            return f, [x, w, b]
        return build

    def upsample(rng):
        x = _leaf(rng, 1, 2, 3, 3)
        w = rng.normal(size=(1, 2, 6, 6))
        return (lambda: ad.sum_(ad.upsample2x(x) * w)), [x]

    def softmax(rng):
        x = _leaf(rng, 2, 4, 3)
        w = rng.normal(size=(2, 4, 3))
        return (lambda: ad.sum_(ad.softmax(x, axis=1) * w)), [x]

    def log_softmax(rng):
        x = _leaf(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        return (lambda: ad.sum_(ad.log_softmax(x, axis=1) * w)), [x]

    def reductions(rng):
        x = _leaf(rng, 3, 4, 2)
        return (lambda: ad.sum_(ad.mean(x, axis=(0, 2)) * ad.sum_(x, axis=1).mean()
                                + ad.l2norm(x, axis=1).sum())), [x]

    def lse(rng):
        x = _leaf(rng, 4, 5)
        w = rng.normal(size=4)
        return (lambda: ad.sum_(ad.logsumexp(x, axis=1) * w)), [x]

    def shapes(rng):
        x = _leaf(rng, 2, 3, 4)
        w = rng.normal(size=(4, 6))
        return (lambda: ad.sum_(ad.reshape(ad.transpose(ad.flip(x, 2), (2, 0, 1)), (4, 6)) * w
                                + ad.concat([x[0, 1:], x[1, :2]], axis=0).sum())), [x]

    return {
        "add": binary("add"), "sub": binary("sub"), "mul": binary("mul"), "div": binary("div"),
        "matmul": matmul,
        "relu": unary("relu"), "exp": unary("exp"), "log": unary("log", 0.2, 2.0),
        "sqrt": unary("sqrt", 0.2, 2.0), "xlogx": unary("xlogx", 0.05, 1.0),
        "conv_s1_p1": conv(1, 1, 3), "conv_s2_p1": conv(2, 1, 3), "conv_s1_p0_k1": conv(1, 0, 1),
        "upsample2x": upsample, "softmax": softmax, "log_softmax": log_softmax,
        "reductions": reductions, "logsumexp": lse, "shape_ops": shapes,
    }


def objective_case(seed, size=8, probes=6):
    """Full weighted OCL objective of a BN-mixed network as a function of every parameter.

    Returns ``(fn, leaves, coords)``; ``coords`` picks ``probes`` random
    entries per parameter tensor for the finite-difference probe.
    """
    rng = np.random.default_rng(seed)
    model = SegNetToy(default_descriptor(num_classes=5, width=4), seed=seed)
    for s in model.bn.values():
        s.mu_train = rng.normal(0, 0.2, s.mu_train.shape)
        s.var_train = rng.uniform(0.5, 1.5, s.var_train.shape)
    for k, p in model.params.items():
        if not k.endswith(".weight"):
            p.data = p.data + rng.normal(0, 0.1, p.shape)
    img = rng.random((size, size, 3))
    model.set_alpha(0.85)
    estimate_test_bn_stats(model, img)
    x = hwc_to_nchw(np.stack([img, img[:, ::-1]]))

    def fn():
        probs = ad.transpose(ad.softmax(model.forward(x, bn_mode=MIXED_STATS), axis=1), (0, 2, 3, 1))
        return ocl_total(PredictionMap(probs[0]), PredictionMap(probs[1], FLIPPED), 3.0, 1.0, PairSampling(2))

    leaves = list(model.params.values())
    coords = [rng.choice(p.size, size=min(probes, p.size), replace=False) for p in leaves]
    return fn, leaves, coords


def gradient_suite(seeds=10, tol=GRAD_TOL):
    t0 = time.perf_counter()
    worst = {}
    for name, build in op_cases().items():
        errs = []
        for seed in range(seeds):
            fn, leaves = build(np.random.default_rng(seed))
            errs.append(check_gradients(fn, leaves))
        worst[name] = max(errs)
    errs = []
    for seed in range(seeds):
        fn, leaves, coords = objective_case(seed)
        errs.append(check_gradients(fn, leaves, eps=OBJECTIVE_EPS, coords=coords))
    worst["ocl_objective"] = max(errs)
    failing = sorted(k for k, v in worst.items() if not v < tol)
    return SuiteResult("gradient", not failing, time.perf_counter() - t0,
                       {"max_rel_error": max(worst.values()), "failing": failing, "families": len(worst)})


def temperature_suite(sizes=(16, 24, 32, 48, 64), classes=6):
    t0 = time.perf_counter()
    rows = []
    for seed, n in enumerate(sizes):
        rng = np.random.default_rng(seed)
        pts = rng.dirichlet(np.full(classes, 0.5), size=n)
        rep = verify_temperature_limit(pts, {i: [i ^ 1] for i in range(n)})
        ratio = rep.residuals[-1] / abs(rep.ocl_value)
        rows.append({"n": n, "decreasing": rep.decreasing, "final_ratio": ratio})
    ok = all(r["decreasing"] and r["final_ratio"] < 1e-3 for r in rows)
    return SuiteResult("temperature_limit", ok, time.perf_counter() - t0,
                       {"worst_ratio": max(r["final_ratio"] for r in rows), "instances": len(rows)})


def bn_mix_suite(steps=3, alphas=(0.0, 0.85, 1.0)):
    from .engine import AdaptationConfig, Adapter

    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = SegNetToy(default_descriptor(num_classes=5, width=4), seed=0)
    ckpt = model.checkpoint()
    for k in ckpt.bn_stats:
        ckpt.bn_stats[k] = (rng.normal(0, 0.3, ckpt.bn_stats[k][0].shape),
                            rng.uniform(0.5, 2.0, ckpt.bn_stats[k][1].shape))
    worst = 0.0
    endpoint_ok = True
    for alpha in alphas:
        adapter = Adapter(ckpt, AdaptationConfig(lr=1e-3, bn_alpha=alpha, seed=1))
        for _ in range(steps):
            adapter.step(rng.random((12, 12, 3)))
            for s in adapter.model.bn.values():
                worst = max(worst, s.mixing_residual())
                if alpha == 1.0:
                    endpoint_ok &= np.array_equal(s.mu_mixed, s.mu_train) and np.array_equal(s.var_mixed, s.var_train)
                if alpha == 0.0:
                    endpoint_ok &= np.array_equal(s.mu_mixed, s.mu_test) and np.array_equal(s.var_mixed, s.var_test)
    return SuiteResult("bn_mix", worst == 0.0 and endpoint_ok, time.perf_counter() - t0,
                       {"max_residual": worst, "endpoints_exact": bool(endpoint_ok)})


def binomial_bounds(n, p, z=2.5758293035489):
    """Two-sided 99% normal-approximation bounds for a Binomial(n, p) fraction."""
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


def restoration_suite(n=1_000_000, p=0.01, seed=0):
    from .engine import stochastic_restore

    t0 = time.perf_counter()
    src = {"w": np.zeros(n)}
    endpoints = []
    for q in (0.0, 1.0):
        cur = {"w": np.ones(n)}
        stochastic_restore(cur, src, q, np.random.default_rng(seed))
        endpoints.append(bool(np.all(cur["w"] == (0.0 if q == 1.0 else 1.0))))
    cur = {"w": np.ones(n)}
    restored, total = stochastic_restore(cur, src, p, np.random.default_rng(seed))
    lo, hi = binomial_bounds(n, p)
    frac = restored / total
    ok = all(endpoints) and lo <= frac <= hi
    return SuiteResult("restoration", ok, time.perf_counter() - t0,
                       {"fraction": frac, "bounds": [lo, hi], "endpoints_exact": all(endpoints)})


def _set_iou(gt, pred, c):
    out = []
    for k in range(c):
        g = set(np.flatnonzero(gt.ravel() == k).tolist())
        q = set(np.flatnonzero(pred.ravel() == k).tolist())
        u = g | q
        out.append(None if not u else len(g & q) / len(u))
    return out


def miou_suite(cases=100, size=8):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 8))
        gt = rng.integers(0, c, (size, size))
        pred = np.where(rng.random((size, size)) < 0.5, gt, rng.integers(0, c, (size, size)))
        cm = confusion_matrix(gt, pred, c)
        oracle = _set_iou(gt, pred, c)
        got = iou_per_class(cm)
        same = all((o is None and math.isnan(v)) or (o is not None and v == o) for o, v in zip(oracle, got))
        defined = [o for o in oracle if o is not None]
        same &= math.isclose(miou(cm), math.fsum(defined) / len(defined), rel_tol=0, abs_tol=1e-15)
        mismatches += not same
    return SuiteResult("miou_oracle", mismatches == 0, time.perf_counter() - t0,
                       {"cases": cases, "mismatches": mismatches})


SUITES = {
    "gradient": gradient_suite,
    "temperature_limit": temperature_suite,
    "bn_mix": bn_mix_suite,
    "restoration": restoration_suite,
    "miou_oracle": miou_suite,
}


def run_all(names=None):
    return [SUITES[n]() for n in (names or SUITES)]
