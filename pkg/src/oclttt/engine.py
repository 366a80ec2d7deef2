"""Online test-time training loop.

Each incoming image goes through four stages, in order:

1. estimate BN test statistics from the image and its mirror and mix them
   with the source statistics (optional);
2. emit the scored prediction;
3. one SGD step on the adaptation loss over both views;
4. stochastic restoration of weights towards the source checkpoint (optional).

The prediction is produced before the update, so it depends only on images
already seen.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import hflip
from .errors import ConfigError, ContractError, NumericFault
from .loss import FLIPPED, ORIGINAL, PairSampling, PredictionMap, entropy_loss, ocl_total, reference_cl, two_view_points
from .metrics import (accumulated_miou, class_ratio, confusion_matrix, histogram_entropy, iou_per_class,
                      miou, write_summary_csv)
from .model import MIXED_STATS, TRAIN_STATS, ModelCheckpoint, SegNetToy, estimate_test_bn_stats, hwc_to_nchw, predict
from .optim import SGD, sgd_update

log = logging.getLogger(__name__)

LOSSES = ("ocl", "entropy", "cl")


@dataclass
class AdaptationConfig:
    lambda_pos: float = 3.0
    lambda_neg: float = 1.0
    bn_alpha: float = 0.85
    restore_p: float = 0.01
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    stride: int = 8
    enable_bn_mod: bool = True
    enable_restore: bool = True
    enable_ocl: bool = True  # False skips the gradient stage entirely
    seed: int = 0
    loss: str = "ocl"
    tau: float = 1.0  # only for loss="cl"
    cl_tau_scaled: bool = False  # True optimises tau * CL (temperature-independent step size)
    positives_stride: int = 1
    bn_joint_flip: bool = True  # estimate test stats over (image, mirror)
    update_scope: str = "all"  # or "bn_affine"

    def __post_init__(self):
        for name in ("bn_alpha", "restore_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.enable_ocl and not self.lr > 0:
            raise ConfigError("lr must be > 0 when adaptation is enabled")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.update_scope not in ("all", "bn_affine"):
            raise ConfigError(f"unknown update_scope {self.update_scope!r}")
        if self.stride < 1 or self.positives_stride < 1:
            raise ConfigError("strides must be >= 1")
        if self.loss == "cl" and not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.lambda_pos < 0 or self.lambda_neg < 0:
            raise ConfigError("loss weights must be >= 0")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return AdaptationConfig(**d)

    @property
    def adapts(self):
        return self.enable_ocl or self.enable_restore

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown adaptation keys: {sorted(unknown)}")
        return cls(**d)


METHODS = ("frozen", "ocl", "entropy", "ocl_no_bn", "ocl_no_restore", "cl_output_space")


def method_config(method, base: AdaptationConfig | None = None, tau=None):
    """Configuration for one named method, derived from ``base``."""
    base = base or AdaptationConfig()
    if method == "frozen":
        return base.replace(enable_ocl=False, enable_bn_mod=False, enable_restore=False)
    if method == "ocl":
        return base.replace(loss="ocl", enable_ocl=True, enable_bn_mod=True, enable_restore=True)
    if method == "ocl_no_bn":
        return base.replace(loss="ocl", enable_ocl=True, enable_bn_mod=False, enable_restore=True)
    if method == "ocl_no_restore":
        return base.replace(loss="ocl", enable_ocl=True, enable_bn_mod=True, enable_restore=False)
    if method == "entropy":
        return base.replace(loss="entropy", enable_ocl=True, enable_restore=False)
    if method == "cl_output_space":
        return base.replace(loss="cl", enable_ocl=True, tau=base.tau if tau is None else tau)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


# rows of the component ablation: (label, ocl, bn, restore)
ABLATION_ROWS = (
    ("source", False, False, False),
    ("ocl", True, False, False),
    ("ocl+bn", True, True, False),
    ("ocl+sr", True, False, True),
    ("ocl+bn+sr", True, True, True),
)


def ablation_configs(base: AdaptationConfig | None = None):
    base = base or AdaptationConfig()
    return [(label, base.replace(loss="ocl", enable_ocl=o, enable_bn_mod=b, enable_restore=r))
            for label, o, b, r in ABLATION_ROWS]


# -- primitive updates ---------------------------------------------------------

def bn_modulate(state, alpha):
    """Mix source and test statistics of one BN layer in place."""
    state.modulate(alpha)


def sgd_step(params, grads, cfg: AdaptationConfig, velocity=None):
    """One momentum-SGD update of ``params`` (name -> array or Tensor) in place.

    Names missing from ``grads`` are skipped. Returns the velocity buffers,
    which the caller passes back in on the next step.
    """
    velocity = {} if velocity is None else velocity
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w = p.data if isinstance(p, ad.Tensor) else p
        velocity[name] = sgd_update(w, np.asarray(g, dtype=np.float64), velocity.get(name),
                                    cfg.lr, cfg.momentum, cfg.weight_decay)
    return velocity


def _arrays(obj):
    if isinstance(obj, SegNetToy):
        return {k: p.data for k, p in obj.params.items()}
    if isinstance(obj, ModelCheckpoint):
        return obj.params
    return {k: v.data if isinstance(v, ad.Tensor) else v for k, v in obj.items()}


def stochastic_restore(current, source, p, rng):
    """Reset each weight element to its source value with probability ``p``.

    ``current`` may be a model, a checkpoint or a name->array mapping; it is
    modified in place. BN running statistics are left alone. Returns the
    number of restored elements and the total element count.
    """
    cur, src = _arrays(current), _arrays(source)
    if cur.keys() != src.keys():
        raise ContractError("restore: parameter layouts differ")
    restored = total = 0
    for name in src:
        a, s = cur[name], src[name]
        if a.shape != s.shape:
            raise ContractError(f"restore: {name} shape {a.shape} vs {s.shape}")
        mask = rng.random(a.shape) < p
        a[mask] = s[mask]
        restored += int(mask.sum())
        total += a.size
    return restored, total


# -- one step ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    condition: str = ""
    round: int = 0
    loss_pos: float | None = None
    loss_neg: float | None = None
    loss_total: float | None = None
    miou_image: float | None = None
    miou_accumulated: float | None = None
    class_ratio: list = field(default_factory=list)
    class_entropy: float = 0.0
    iou: list = field(default_factory=list)
    restored: int = 0
    fault: str | None = None
    pred_digest: str = ""

    def to_json(self):
        d = asdict(self)
        d["iou"] = [None if math.isnan(v) else v for v in self.iou]
        return json.dumps(d, sort_keys=True)


def _adaptation_loss(model, image, cfg, bn_mode):
    x = hwc_to_nchw(np.stack([image, hflip(image)]))
    probs = ad.transpose(ad.softmax(model.forward(x, bn_mode=bn_mode), axis=1), (0, 2, 3, 1))
    v1 = PredictionMap(probs[0], ORIGINAL)
    v2 = PredictionMap(probs[1], FLIPPED)
    if cfg.loss == "ocl":
        sampling = PairSampling(cfg.stride, cfg.positives_stride)
        return ocl_total(v1, v2, cfg.lambda_pos, cfg.lambda_neg, sampling, parts=True)
    if cfg.loss == "entropy":
        return entropy_loss(v1), None, None
    pts, pairs = two_view_points(v1, v2, cfg.stride)
    cl = reference_cl(pts, pairs, cfg.tau)
    return (cl * cfg.tau if cfg.cl_tau_scaled else cl), None, None


class Adapter:
    """Mutable adaptation state for one stream: model, optimiser, source weights."""

    def __init__(self, source: ModelCheckpoint, cfg: AdaptationConfig):
        self.cfg = cfg
        self.source = source
        self.model = SegNetToy.from_checkpoint(source)
        if cfg.enable_bn_mod:
            self.model.set_alpha(cfg.bn_alpha)
        names = list(self.model.params)
        if cfg.update_scope == "bn_affine":
            names = self.model.bn_param_names()
        self.update_names = names
        self.optimizer = SGD({k: self.model.params[k] for k in names}, lr=cfg.lr,
                             momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.steps = 0

    def bn_mode(self):
        return MIXED_STATS if self.cfg.enable_bn_mod else TRAIN_STATS

    def step(self, image, adapt=True):
        """Predict ``image`` then adapt on it. Returns ``(PredictionMap, StepRecord)``."""
        cfg, model = self.cfg, self.model
        rec = StepRecord(step=self.steps)
        if cfg.enable_bn_mod:
            estimate_test_bn_stats(model, image, with_flip=cfg.bn_joint_flip)
        mode = self.bn_mode()
        pred = PredictionMap(predict(model, image, mode), ORIGINAL)
        rec.pred_digest = hashlib.sha256(pred.probs.data.tobytes()).hexdigest()
        if adapt and cfg.enable_ocl:
            try:
                model.zero_grad()
                total, lp, ln = _adaptation_loss(model, image, cfg, mode)
                ad.backward(total)
                grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad))
                               for p in self.optimizer.params.values())
                if not grads_ok:
                    raise NumericFault("backward", "non-finite gradient")
                self.optimizer.step()
                rec.loss_total = total.item()
                rec.loss_pos = None if lp is None else lp.item()
                rec.loss_neg = None if ln is None else ln.item()
            except NumericFault as exc:
                log.warning("step %d: update skipped (%s)", self.steps, exc)
                rec.fault = str(exc)
            finally:
                model.zero_grad()
        if adapt and cfg.enable_restore and cfg.restore_p > 0:
            rng = np.random.default_rng([cfg.seed, 0x5EED, self.steps])
            rec.restored, _ = stochastic_restore(model, self.source, cfg.restore_p, rng)
        self.steps += 1
        return pred, rec

    def loss_value(self, image):
        """Adaptation objective on ``image`` at the current weights, no update."""
        mode = self.bn_mode()
        if self.cfg.enable_bn_mod:
            estimate_test_bn_stats(self.model, image, with_flip=self.cfg.bn_joint_flip)
        with ad.no_grad():
            return _adaptation_loss(self.model, image, self.cfg, mode)[0].item()

    def weight_distance(self):
        """Euclidean distance between current and source weights."""
        return float(np.sqrt(sum(np.sum((p.data - self.source.params[k]) ** 2)
                                  for k, p in self.model.params.items())))


def ttt_step(adapter: Adapter, image):
    return adapter.step(image)


# -- episodes ------------------------------------------------------------------

@dataclass
class EpisodeLog:
    num_classes: int
    records: list = field(default_factory=list)
    confusions: list = field(default_factory=list)
    predictions: list | None = None
    final_weight_distance: float | None = None

    def __len__(self):
        return len(self.records)

    def pooled_confusion(self, select=None):
        cms = [cm for r, cm in zip(self.records, self.confusions) if select is None or select(r)]
        if not cms:
            raise ContractError("no records selected")
        return np.sum(cms, axis=0)

    def pooled_miou(self, select=None):
        return miou(self.pooled_confusion(select))

    def pooled_class_ratio(self):
        counts = np.sum([np.asarray(r.class_ratio) for r in self.records], axis=0)
        return counts / counts.sum()

    def segment_table(self):
        """Rows ``(round, condition, pooled mIoU)`` in stream order."""
        keys = []
        for r in self.records:
            k = (r.round, r.condition)
            if k not in keys:
                keys.append(k)
        return [(rd, cond, self.pooled_miou(lambda r, k=(rd, cond): (r.round, r.condition) == k))
                for rd, cond in keys]

    def to_ndjson(self):
        return "".join(r.to_json() + "\n" for r in self.records)

    def write(self, directory, stem="episode"):
        import os

        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{stem}.ndjson"), "w") as fh:
            fh.write(self.to_ndjson())
        write_summary_csv(os.path.join(directory, f"{stem}_summary.csv"), self.records, self.num_classes)


def _score(log_: EpisodeLog, rec, probs, label):
    c = log_.num_classes
    pred_lab = probs.argmax(-1)
    cm = confusion_matrix(label, pred_lab, c)
    log_.confusions.append(cm)
    rec.iou = iou_per_class(cm).tolist()
    rec.miou_image = miou(cm)
    ratio = class_ratio(pred_lab, c)
    rec.class_ratio = ratio.tolist()
    rec.class_entropy = histogram_entropy(ratio)


def run_episode(source: ModelCheckpoint, stream, cfg: AdaptationConfig, condition="", round_=1,
                adapter: Adapter | None = None, log_: EpisodeLog | None = None,
                freeze_from=None, keep_predictions=False):
    """Sequential predict-then-adapt over ``stream`` of ``(image, label)`` pairs.

    Labels are used for scoring only. ``freeze_from`` disables adaptation
    from that step index onwards.
    """
    if adapter is None:
        adapter = Adapter(source, cfg)
    if log_ is None:
        log_ = EpisodeLog(source.descriptor["num_classes"], predictions=[] if keep_predictions else None)
    for image, label in stream:
        adapt = freeze_from is None or adapter.steps < freeze_from
        pred, rec = adapter.step(image, adapt=adapt)
        rec.condition, rec.round = condition, round_
        _score(log_, rec, pred.probs.data, label)
        log_.records.append(rec)
        rec.miou_accumulated = miou(np.sum(log_.confusions, axis=0))
        if log_.predictions is not None:
            log_.predictions.append(pred.probs.data)
    return log_


def run_continual(source: ModelCheckpoint, condition_streams, rounds, cfg: AdaptationConfig,
                  keep_predictions=False):
    """Adapt one model across ``rounds`` repetitions of the condition sequence.

    ``condition_streams`` is an ordered list of ``(name, stream)`` pairs (or a
    dict). The model is never reset between segments.
    """
    items = list(condition_streams.items()) if isinstance(condition_streams, dict) else list(condition_streams)
    if not items:
        raise ContractError("need at least one condition stream")
    if rounds < 1:
        raise ContractError("rounds must be >= 1")
    adapter = Adapter(source, cfg)
    log_ = EpisodeLog(source.descriptor["num_classes"], predictions=[] if keep_predictions else None)
    for rd in range(1, rounds + 1):
        for name, stream in items:
            run_episode(source, stream, cfg, condition=name, round_=rd, adapter=adapter, log_=log_)
    log_.final_weight_distance = adapter.weight_distance()
    return log_


def round_means(log_: EpisodeLog):
    """Mean over conditions of the per-(round, condition) pooled mIoU, per round."""
    by_round = {}
    for rd, _cond, value in log_.segment_table():
        by_round.setdefault(rd, []).append(value)
    return {rd: float(np.mean(v)) for rd, v in by_round.items()}


def accumulated_curve(log_: EpisodeLog):
    return accumulated_miou(log_.confusions)
