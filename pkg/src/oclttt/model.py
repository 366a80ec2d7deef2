"""Toy encoder-decoder segmentation network with batch normalisation."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ContractError, NumericFault, ShapeError

BN_EPS = 1e-5

TRAIN_STATS = "train_stats"
MIXED_STATS = "mixed_stats"
BATCH_STATS = "batch_stats"
BN_MODES = (TRAIN_STATS, MIXED_STATS, BATCH_STATS)


def default_descriptor(num_classes=6, width=16):
    """Eight conv layers: two stride-2 downsamples, two 2x upsamples, 1x1 head."""
    w, w2 = width, 2 * width
    rows = [
        ("enc1", 3, w, 3, 1, False),
        ("enc2", w, w, 3, 2, False),
        ("enc3", w, w2, 3, 1, False),
        ("enc4", w2, w2, 3, 2, False),
        ("mid", w2, w2, 3, 1, False),
        ("dec1", w2, w, 3, 1, True),
        ("dec2", w, w, 3, 1, True),
    ]
    layers = [dict(name=n, cin=ci, cout=co, k=k, stride=s, upsample=up, bn=True, relu=True)
              for n, ci, co, k, s, up in rows]
    layers.append(dict(name="head", cin=w, cout=num_classes, k=1, stride=1, upsample=False,
                       bn=False, relu=False))
    return {"in_channels": 3, "num_classes": num_classes, "layers": layers}


def pointwise_descriptor(num_classes=4, width=8, depth=2):
    """1x1-conv-only network; commutes exactly with horizontal flips."""
    layers, cin = [], 3
    for i in range(depth):
        layers.append(dict(name=f"pw{i}", cin=cin, cout=width, k=1, stride=1, upsample=False,
                           bn=True, relu=True))
        cin = width
    layers.append(dict(name="head", cin=cin, cout=num_classes, k=1, stride=1, upsample=False,
                       bn=False, relu=False))
    return {"in_channels": 3, "num_classes": num_classes, "layers": layers}


def descriptor_param_count(desc):
    n = 0
    for layer in desc["layers"]:
        n += layer["cout"] * layer["cin"] * layer["k"] ** 2 + layer["cout"]
        if layer["bn"]:
            n += 2 * layer["cout"]
    return n


def validate_descriptor(desc):
    cin = desc["in_channels"]
    for layer in desc["layers"]:
        if layer["cin"] != cin:
            raise ShapeError("descriptor", (cin,), (layer["cin"],), detail=f"layer {layer['name']}")
        cin = layer["cout"]
    if cin != desc["num_classes"]:
        raise ContractError("descriptor: last layer must emit num_classes channels")


@dataclass
class BNLayerState:
    """Per-channel normalisation statistics of one BN layer."""

    mu_train: np.ndarray
    var_train: np.ndarray
    alpha: float = 1.0
    mu_test: np.ndarray | None = None
    var_test: np.ndarray | None = None
    mu_mixed: np.ndarray | None = None
    var_mixed: np.ndarray | None = None

    @property
    def has_test(self):
        return self.mu_test is not None and self.var_test is not None

    def set_test(self, mu, var):
        if np.any(var < 0):
            raise ContractError("BN test variance must be non-negative")
        self.mu_test = np.asarray(mu, dtype=np.float64).copy()
        self.var_test = np.asarray(var, dtype=np.float64).copy()

    def clear_test(self):
        self.mu_test = self.var_test = self.mu_mixed = self.var_mixed = None

    def modulate(self, alpha=None):
        """Convex mix of source and test statistics, weight ``alpha`` on source."""
        if alpha is not None:
            self.alpha = float(alpha)
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.has_test:
            raise ContractError("BN modulation needs test statistics; estimate them first")
        a = self.alpha
        self.mu_mixed = a * self.mu_train + (1.0 - a) * self.mu_test
        self.var_mixed = a * self.var_train + (1.0 - a) * self.var_test

    def mixing_residual(self):
        """Largest deviation of the stored mixed stats from the mixing identity."""
        a = self.alpha
        dm = self.mu_mixed - (a * self.mu_train + (1.0 - a) * self.mu_test)
        dv = self.var_mixed - (a * self.var_train + (1.0 - a) * self.var_test)
        return float(max(np.abs(dm).max(), np.abs(dv).max()))


@dataclass
class ModelCheckpoint:
    descriptor: dict
    params: dict  # name -> ndarray
    bn_stats: dict  # layer name -> (mu_train, var_train)
    meta: dict = field(default_factory=dict)

    def copy(self):
        return ModelCheckpoint(
            copy.deepcopy(self.descriptor),
            {k: v.copy() for k, v in self.params.items()},
            {k: (m.copy(), v.copy()) for k, (m, v) in self.bn_stats.items()},
            copy.deepcopy(self.meta),
        )

    def param_count(self):
        return int(sum(v.size for v in self.params.values()))

    def equals(self, other):
        if self.descriptor != other.descriptor or self.params.keys() != other.params.keys():
            return False
        if any(not np.array_equal(self.params[k], other.params[k]) for k in self.params):
            return False
        return all(np.array_equal(a, b) for k in self.bn_stats
                   for a, b in zip(self.bn_stats[k], other.bn_stats[k]))


# -- checkpoint file format -------------------------------------------------
#
#   bytes 0..7   magic b"OCLCKPT1"
#   bytes 8..11  uint32 little-endian header length L
#   next L bytes UTF-8 JSON header (sorted keys): version, descriptor, meta,
#                arrays = [{name, shape, offset}] with offsets in float64 units
#   remainder    concatenated little-endian float64 array payloads
#
# Array names are "param/<name>", "bn/<layer>/mu", "bn/<layer>/var".

MAGIC = b"OCLCKPT1"
FORMAT_VERSION = 1


def _flat_arrays(ckpt):
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for k, (mu, var) in ckpt.bn_stats.items():
        arrays.append((f"bn/{k}/mu", mu))
        arrays.append((f"bn/{k}/var", var))
    return arrays


def checkpoint_to_bytes(ckpt: ModelCheckpoint) -> bytes:
    arrays = _flat_arrays(ckpt)
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps({"version": FORMAT_VERSION, "descriptor": ckpt.descriptor,
                         "meta": ckpt.meta, "arrays": entries}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def checkpoint_from_bytes(buf: bytes) -> ModelCheckpoint:
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", buf[8:12])
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {header.get('version')}")
    payload = len(buf) - 12 - hlen
    if payload < 0 or payload % 8:
        raise ContractError("truncated checkpoint payload")
    data = np.frombuffer(buf, dtype="<f8", offset=12 + hlen)
    params, bn = {}, {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > data.size:
            raise ContractError(f"truncated checkpoint payload at {e['name']}")
        arr = data[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
        kind, rest = e["name"].split("/", 1)
        if kind == "param":
            params[rest] = arr
        else:
            layer, stat = rest.rsplit("/", 1)
            bn.setdefault(layer, {})[stat] = arr
    bn_stats = {k: (v["mu"], v["var"]) for k, v in bn.items()}
    return ModelCheckpoint(header["descriptor"], params, bn_stats, header.get("meta", {}))


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# -- the network ------------------------------------------------------------

def hwc_to_nchw(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    return np.ascontiguousarray(image.transpose(0, 3, 1, 2))


class SegNetToy:
    """Per-pixel classifier: ordered conv -> BN -> ReLU blocks and a 1x1 head."""

    def __init__(self, descriptor=None, seed=0):
        self.descriptor = copy.deepcopy(descriptor or default_descriptor())
        validate_descriptor(self.descriptor)
        rng = np.random.default_rng(seed)
        self.params = {}
        self.bn = {}
        for layer in self.descriptor["layers"]:
            name, ci, co, k = layer["name"], layer["cin"], layer["cout"], layer["k"]
            std = np.sqrt(2.0 / (ci * k * k))
            self.params[f"{name}.weight"] = Tensor(rng.normal(0, std, (co, ci, k, k)), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(co), requires_grad=True)
            if layer["bn"]:
                self.params[f"{name}.gamma"] = Tensor(np.ones(co), requires_grad=True)
                self.params[f"{name}.beta"] = Tensor(np.zeros(co), requires_grad=True)
                self.bn[name] = BNLayerState(np.zeros(co), np.ones(co))

    @property
    def num_classes(self):
        return self.descriptor["num_classes"]

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def bn_param_names(self):
        return [k for k in self.params if k.endswith((".gamma", ".beta"))]

    # checkpoint plumbing
    def checkpoint(self, meta=None) -> ModelCheckpoint:
        return ModelCheckpoint(
            copy.deepcopy(self.descriptor),
            {k: p.data.copy() for k, p in self.params.items()},
            {k: (s.mu_train.copy(), s.var_train.copy()) for k, s in self.bn.items()},
            dict(meta or {}),
        )

    def load(self, ckpt: ModelCheckpoint):
        if ckpt.descriptor != self.descriptor:
            raise ContractError("checkpoint descriptor does not match the model architecture")
        for k, p in self.params.items():
            if ckpt.params[k].shape != p.shape:
                raise ShapeError("load", p.shape, ckpt.params[k].shape, detail=k)
            p.data = ckpt.params[k].copy()
            p.grad = None
        for k, s in self.bn.items():
            mu, var = ckpt.bn_stats[k]
            s.mu_train, s.var_train = mu.copy(), var.copy()
            s.clear_test()

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "SegNetToy":
        model = cls(ckpt.descriptor)
        model.load(ckpt)
        return model

    def set_alpha(self, alpha):
        for s in self.bn.values():
            s.alpha = float(alpha)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # forward
    def forward(self, x, bn_mode=TRAIN_STATS, collect=False):
        """Logits (N, C, H, W) for an NCHW batch.

        ``bn_mode`` selects the statistics each BN layer normalises with.
        ``collect=True`` first measures each BN input's per-channel batch
        statistics, stores them as test statistics and re-mixes the layer with
        its ``alpha`` before normalising, so downstream layers see upstream
        layers already normalised with mixed statistics.
        """
        if bn_mode not in BN_MODES:
            raise ContractError(f"unknown bn_mode {bn_mode!r}")
        h = ad.as_tensor(x)
        if h.ndim != 4 or h.shape[1] != self.descriptor["in_channels"]:
            raise ShapeError("forward", h.shape, detail="expected (N, 3, H, W)")
        for layer in self.descriptor["layers"]:
            name = layer["name"]
            if layer["upsample"]:
                h = ad.upsample2x(h)
            k = layer["k"]
            h = ad.conv2d(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                          stride=layer["stride"], pad=k // 2)
            if layer["bn"]:
                h = self._batchnorm(name, h, bn_mode, collect)
            if layer["relu"]:
                h = ad.relu(h)
        return h

    def _batchnorm(self, name, h, bn_mode, collect):
        state = self.bn[name]
        gamma = ad.reshape(self.params[f"{name}.gamma"], (1, -1, 1, 1))
        beta = ad.reshape(self.params[f"{name}.beta"], (1, -1, 1, 1))
        if collect:
            if h.shape[0] * h.shape[2] * h.shape[3] == 0:
                raise ContractError(f"{name}: zero-size activation")
            state.set_test(h.data.mean(axis=(0, 2, 3)), h.data.var(axis=(0, 2, 3)))
            state.modulate()
        if bn_mode == BATCH_STATS:
            mu = ad.mean(h, axis=(0, 2, 3), keepdims=True)
            centred = h - mu
            var = ad.mean(centred * centred, axis=(0, 2, 3), keepdims=True)
            return centred / ad.sqrt(var + BN_EPS) * gamma + beta
        if bn_mode == MIXED_STATS:
            if state.mu_mixed is None:
                raise ContractError(f"{name}: mixed statistics requested before test statistics were estimated")
            mu, var = state.mu_mixed, state.var_mixed
        else:
            mu, var = state.mu_train, state.var_train
        scale = 1.0 / np.sqrt(var + BN_EPS)
        return (h - mu.reshape(1, -1, 1, 1)) * (gamma * scale.reshape(1, -1, 1, 1)) + beta


def predict(model: SegNetToy, image, bn_mode=TRAIN_STATS):
    """H x W x C softmax map for one H x W x 3 image (or N x H x W x C for a batch)."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    with no_grad():
        logits = model.forward(hwc_to_nchw(image), bn_mode=bn_mode)
        probs = ad.softmax(logits, axis=1).data.transpose(0, 2, 3, 1)
    return np.ascontiguousarray(probs[0] if single else probs)


def estimate_test_bn_stats(model: SegNetToy, image, with_flip=True):
    """Fill every BN layer's test statistics from one image (plus its mirror).

    Stats are gathered progressively in one forward pass; each layer is mixed
    with its own ``alpha`` as soon as its statistics are known.
    """
    x = hwc_to_nchw(image)
    if with_flip:
        x = np.concatenate([x, x[..., ::-1]], axis=0)
    with no_grad():
        model.forward(x, bn_mode=MIXED_STATS, collect=True)


def pixel_cross_entropy(logits, labels):
    """Mean per-pixel cross-entropy; ``labels`` is an (N, H, W) int array."""
    n, c, h, w = logits.shape
    logp = ad.log_softmax(logits, axis=1)
    onehot = np.zeros((n, c, h, w))
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    return -ad.sum_(logp * onehot) / (n * h * w)


def precise_bn_stats(model: SegNetToy, images, batch_size=8):
    """Population statistics of every BN input under batch-stat normalisation."""
    sums = {k: [0.0, 0.0, 0] for k in model.bn}
    orig = model._batchnorm

    def recording(name, h, bn_mode, collect):
        acc = sums[name]
        d = h.data
        acc[0] = acc[0] + d.sum(axis=(0, 2, 3))
        acc[1] = acc[1] + (d * d).sum(axis=(0, 2, 3))
        acc[2] += d.shape[0] * d.shape[2] * d.shape[3]
        return orig(name, h, bn_mode, collect)

    model._batchnorm = recording
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                model.forward(hwc_to_nchw(np.stack(images[i:i + batch_size])), bn_mode=BATCH_STATS)
    finally:
        del model._batchnorm
    out = {}
    for k, (s, s2, n) in sums.items():
        mu = s / n
        out[k] = (mu, np.maximum(s2 / n - mu * mu, 0.0))
    return out


def pretrain(model: SegNetToy, dataset, epochs, lr, batch_size=8, momentum=0.9,
             weight_decay=5e-4, seed=0, log=None):
    """Cross-entropy training on labelled source data.

    BN uses batch statistics while training; afterwards every layer's train
    statistics are replaced by exact population statistics over ``dataset``.
    Returns a checkpoint whose ``meta`` holds the per-epoch mean loss and the
    source mIoU measured with train statistics.
    """
    from .metrics import confusion_matrix, miou
    from .optim import SGD

    if epochs == 0:
        return model.checkpoint(meta={"epoch_loss": []})
    images = [np.asarray(im) for im, _ in dataset]
    labels = [np.asarray(lb) for _, lb in dataset]
    rng = np.random.default_rng(seed)
    opt = SGD(model.params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    epoch_loss = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = hwc_to_nchw(np.stack([images[j] for j in idx]))
            y = np.stack([labels[j] for j in idx])
            opt.zero_grad()
            loss = pixel_cross_entropy(model.forward(x, bn_mode=BATCH_STATS), y)
            if not np.isfinite(loss.item()):
                raise NumericFault("pretrain", f"loss diverged at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_loss.append(total / count)
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {epoch_loss[-1]:.4f}")
    for k, (mu, var) in precise_bn_stats(model, images, batch_size).items():
        model.bn[k].mu_train, model.bn[k].var_train = mu, var
    cm = sum(confusion_matrix(lb, predict(model, im).argmax(-1), model.num_classes)
             for im, lb in zip(images, labels))
    return model.checkpoint(meta={"epoch_loss": epoch_loss, "source_miou": miou(cm)})
