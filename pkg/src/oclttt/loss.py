"""Output-space contrastive objectives.

Prediction maps are ``(H, W, C)`` tensors of per-pixel class probabilities.
Positive pairs are the same pixel under the original and the (re-aligned)
flipped view; negative pairs are distinct pixels inside one view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

ORIGINAL = "original"
FLIPPED = "flipped"


@dataclass
class PredictionMap:
    probs: Tensor
    view_tag: str = ORIGINAL

    def __post_init__(self):
        self.probs = ad.as_tensor(self.probs)
        if self.probs.ndim != 3:
            raise ShapeError("PredictionMap", self.probs.shape, detail="expected (H, W, C)")

    def check_simplex(self, tol=1e-9):
        p = self.probs.data
        return bool(np.all(p >= 0) and np.all(np.abs(p.sum(-1) - 1.0) <= tol))

    def realigned(self):
        """Map in original-image coordinates (un-flips a flipped view)."""
        if self.view_tag == FLIPPED:
            return PredictionMap(ad.flip(self.probs, 1), ORIGINAL)
        return self


@dataclass
class PairSampling:
    """Spatial subsampling of the negative-pair grid.

    ``positives_stride`` defaults to 1: positive pairs use every pixel.
    """

    stride: int = 8
    positives_stride: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.positives_stride < 1:
            raise ContractError("sampling strides must be >= 1")

    def count(self, h, w, stride=None):
        s = self.stride if stride is None else stride
        return math.ceil(h / s) * math.ceil(w / s)

    def take(self, probs: Tensor, stride=None) -> Tensor:
        """(N, C) matrix of the pixels on the strided grid."""
        s = self.stride if stride is None else stride
        grid = ad.getitem(probs, (slice(None, None, s), slice(None, None, s)))
        return ad.reshape(grid, (-1, probs.shape[-1]))


def _unit_rows(m: Tensor) -> Tensor:
    norms = ad.l2norm(m, axis=-1, keepdims=True)
    if np.any(norms.data <= 0):
        raise ContractError("cosine similarity of a zero vector")
    return m / norms


def cosine_sim(p, q):
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("cosine_sim", p.shape, q.shape)
    np_, nq = ad.l2norm(p, axis=-1), ad.l2norm(q, axis=-1)
    if np.any(np_.data <= 0) or np.any(nq.data <= 0):
        raise ContractError("cosine_sim: zero vector")
    return ad.sum_(p * q, axis=-1) / (np_ * nq)


def _views(view1, view2):
    a, b = view1.realigned().probs, view2.realigned().probs
    if a.shape != b.shape:
        raise ShapeError("ocl", a.shape, b.shape, detail="views after realignment")
    return a, b


def positive_loss(view1: PredictionMap, view2: PredictionMap, sampling: PairSampling | None = None):
    """Negated mean cosine similarity between the two views at each pixel."""
    sampling = sampling or PairSampling()
    a, b = _views(view1, view2)
    pa = sampling.take(a, sampling.positives_stride)
    pb = sampling.take(b, sampling.positives_stride)
    return -ad.mean(cosine_sim(pa, pb))


def mean_offdiag_similarity(points: Tensor) -> Tensor:
    """Mean cosine similarity over ordered pairs ``i != j`` of the rows."""
    n = points.shape[0]
    if n < 2:
        raise ContractError(f"need at least 2 sampled pixels, got {n}")
    z = _unit_rows(points)
    gram = ad.matmul(z, ad.transpose(z))
    mask = 1.0 - np.eye(n)
    return ad.sum_(gram * mask) / (n * (n - 1))


def negative_loss(view1: PredictionMap, view2: PredictionMap, sampling: PairSampling | None = None):
    """Average within-view pairwise similarity of the subsampled pixels."""
    sampling = sampling or PairSampling()
    a, b = _views(view1, view2)
    return 0.5 * (mean_offdiag_similarity(sampling.take(a)) + mean_offdiag_similarity(sampling.take(b)))


def ocl_total(view1, view2, lambda_pos=3.0, lambda_neg=1.0, sampling=None, parts=False):
    """Weighted sum ``lambda_pos * L_pos + lambda_neg * L_neg``.

    With ``parts=True`` returns ``(total, l_pos, l_neg)``.
    """
    if lambda_pos < 0 or lambda_neg < 0:
        raise ContractError("loss weights must be non-negative")
    lp = positive_loss(view1, view2, sampling)
    ln = negative_loss(view1, view2, sampling)
    total = lambda_pos * lp + lambda_neg * ln
    return (total, lp, ln) if parts else total


# -- reference contrastive loss ----------------------------------------------

def _pairing(positives, n):
    """Normalise ``positives`` into an (n, n) 0/1 matrix with zero diagonal."""
    if isinstance(positives, np.ndarray) and positives.shape == (n, n):
        mat = positives.astype(np.float64)
    else:
        mat = np.zeros((n, n))
        items = positives.items() if isinstance(positives, dict) else enumerate(positives)
        for i, js in items:
            for j in np.atleast_1d(js):
                mat[i, int(j)] = 1.0
    if np.any(np.diag(mat) != 0):
        raise ContractError("a point cannot be its own positive")
    if np.any(mat.sum(1) == 0):
        raise ContractError("every anchor needs at least one positive")
    return mat


def similarity_matrix(points) -> Tensor:
    z = _unit_rows(ad.as_tensor(points))
    return ad.matmul(z, ad.transpose(z))


def reference_cl(points, positives, tau):
    """Softmax contrastive loss over ``points`` (N x C) at temperature ``tau``.

    ``-mean_{i, j in P_i} log( exp(s_ij/tau) / sum_{k != i} exp(s_ik/tau) )``,
    the outer mean running over all (anchor, positive) pairs. The denominator
    is evaluated with a stabilised log-sum-exp.
    """
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    points = ad.as_tensor(points)
    n = points.shape[0]
    if n < 2:
        raise ContractError("reference_cl needs at least two points")
    pos = _pairing(positives, n)
    sim = similarity_matrix(points)
    logits = sim / tau
    # exclude k == i from the denominator with a large negative offset
    offset = np.where(np.eye(n) > 0, -1e300, 0.0)
    masked = logits + offset
    lse = ad.logsumexp(masked, axis=1, keepdims=True)  # (n, 1)
    logprob = logits - lse
    return -ad.sum_(logprob * pos) / pos.sum()


def ocl_unweighted(points, positives):
    """``-mean_pos sim + mean_{i != k} sim`` over one point collection."""
    points = ad.as_tensor(points)
    n = points.shape[0]
    pos = _pairing(positives, n)
    sim = similarity_matrix(points)
    pos_term = ad.sum_(sim * pos) / pos.sum()
    neg_term = ad.sum_(sim * (1.0 - np.eye(n))) / (n * (n - 1))
    return neg_term - pos_term


def two_view_points(view1: PredictionMap, view2: PredictionMap, stride=1):
    """Stack the sampled pixels of both views; pixel ``i`` pairs with ``i + N``."""
    a, b = _views(view1, view2)
    pa = PairSampling(stride).take(a)
    pb = PairSampling(stride).take(b)
    n = pa.shape[0]
    pairs = {i: [i + n] for i in range(n)}
    pairs.update({i + n: [i] for i in range(n)})
    return ad.concat([pa, pb], axis=0), pairs


@dataclass
class TemperatureLimitReport:
    taus: list
    residuals: list
    ocl_value: float
    cl_values: list = field(default_factory=list)
    noise_floor: float = 0.0

    @property
    def decreasing(self):
        return all(b < a for a, b in zip(self.residuals, self.residuals[1:]))

    def as_dict(self):
        return {"taus": self.taus, "residuals": self.residuals, "ocl_value": self.ocl_value,
                "cl_values": self.cl_values, "noise_floor": self.noise_floor,
                "decreasing": self.decreasing}


def verify_temperature_limit(points, positives, taus=(10.0, 1e2, 1e3, 1e4)):
    """Residual ``|tau*(CL - log(N-1)) - OCL|`` for each temperature.

    The residual should shrink like ``1/tau``. ``noise_floor`` estimates the
    rounding error of the scaled difference at the largest temperature.
    """
    taus = [float(t) for t in taus]
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ContractError("temperature schedule must be increasing")
    with ad.no_grad():
        pts = ad.as_tensor(np.asarray(points.data if isinstance(points, Tensor) else points))
        n = pts.shape[0]
        ocl = ocl_unweighted(pts, positives).item()
        residuals, cls = [], []
        for tau in taus:
            cl = reference_cl(pts, positives, tau).item()
            cls.append(cl)
            residuals.append(abs(tau * (cl - math.log(n - 1)) - ocl))
    floor = taus[-1] * np.finfo(float).eps * max(1.0, abs(math.log(n - 1)))
    return TemperatureLimitReport(taus, residuals, ocl, cls, float(floor))


# -- entropy baseline ---------------------------------------------------------

def entropy_loss(pred: PredictionMap | Tensor):
    """Mean per-pixel Shannon entropy of a probability map (last axis classes)."""
    probs = pred.probs if isinstance(pred, PredictionMap) else ad.as_tensor(pred)
    c = probs.shape[-1]
    flat = ad.reshape(probs, (-1, c))
    return -ad.mean(ad.sum_(ad.xlogx(flat), axis=1))
