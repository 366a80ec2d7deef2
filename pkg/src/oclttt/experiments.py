"""Experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import CONDITIONS, SceneSpec, generate
from .engine import (AdaptationConfig, EpisodeLog, ablation_configs, method_config, round_means, run_continual,
                     run_episode)
from .metrics import collapse_detector, histogram_entropy
from .model import SegNetToy, default_descriptor, load_checkpoint, pretrain, save_checkpoint


@dataclass
class SourceSetup:
    """Everything that determines a pretrained source checkpoint."""
    height: int = 64
    width: int = 64
    num_classes: int = 6
    width_mult: int = 16
    n_images: int = 200
    data_seed: int = 1000
    epochs: int = 15
    lr: float = 0.05
    batch_size: int = 8
    model_seed: int = 0

    def scene(self):
        return SceneSpec(height=self.height, width=self.width, num_classes=self.num_classes)

    def descriptor(self):
        return default_descriptor(self.num_classes, self.width_mult)

    def key(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def train_source(setup: SourceSetup, log=None):
    data = generate(setup.scene(), None, setup.n_images, setup.data_seed)
    model = SegNetToy(setup.descriptor(), seed=setup.model_seed)
    return pretrain(model, data, setup.epochs, setup.lr, batch_size=setup.batch_size,
                    seed=setup.model_seed, log=log)


def source_checkpoint(setup: SourceSetup | None = None, cache_dir=None, log=None):
    """Pretrained checkpoint for ``setup``, reused from ``cache_dir`` when present."""
    setup = setup or SourceSetup()
    if cache_dir is None:
        return train_source(setup, log)
    path = os.path.join(cache_dir, f"source-{setup.key()}.ckpt")
    if os.path.exists(path):
        return load_checkpoint(path)
    ckpt = train_source(setup, log)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = f"{path}.{os.getpid()}.tmp"
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)
    return ckpt


def shifted_stream(spec: SceneSpec, seed, n_per_condition, conditions=tuple(CONDITIONS)):
    """Concatenated segments, one per condition, each drawn with its own seed."""
    stream = []
    for k, name in enumerate(conditions):
        stream += generate(spec, CONDITIONS[name], n_per_condition, [seed, k])
    return stream


def condition_streams(spec: SceneSpec, seed, n_per_condition, conditions=tuple(CONDITIONS)):
    return [(name, generate(spec, CONDITIONS[name], n_per_condition, [seed, k]))
            for k, name in enumerate(conditions)]


def _entropy(log_: EpisodeLog):
    return histogram_entropy(log_.pooled_class_ratio())


def class_ratio_vs_temperature(source, stream, taus, cfg: AdaptationConfig | None = None):
    """Predicted class histogram after output-space CL adaptation, per temperature.

    The first row (``tau=None``) is the baseline: the same pipeline with the
    gradient stage switched off.
    """
    cfg = cfg or AdaptationConfig()
    rows = []
    runs = [(None, cfg.replace(enable_ocl=False))]
    runs += [(float(t), method_config("cl_output_space", cfg, tau=float(t))) for t in taus]
    for tau, c in runs:
        lg = run_episode(source, stream, c)
        ratio = lg.pooled_class_ratio()
        rows.append({"tau": tau, "ratio": ratio.tolist(), "entropy": histogram_entropy(ratio),
                     "miou": lg.pooled_miou()})
    return rows


def ablation_table(source, stream, base: AdaptationConfig | None = None):
    """One row per component combination: ``(label, pooled mIoU, class entropy)``."""
    rows = []
    for label, cfg in ablation_configs(base):
        lg = run_episode(source, stream, cfg)
        rows.append((label, lg.pooled_miou(), _entropy(lg)))
    return rows


def compare_methods(source, stream, methods, base: AdaptationConfig | None = None):
    """Pooled mIoU, entropy and collapse flag per method; entropy reference is ``frozen``."""
    base = base or AdaptationConfig()
    frozen = run_episode(source, stream, method_config("frozen", base))
    ref = _entropy(frozen)
    out = {}
    for m in methods:
        lg = frozen if m == "frozen" else run_episode(source, stream, method_config(m, base))
        flag, at = collapse_detector(lg, ref)
        out[m] = {"miou": lg.pooled_miou(), "entropy": _entropy(lg), "collapsed": flag, "collapse_step": at}
    return out


def continual_round_means(source, streams, rounds, method, base: AdaptationConfig | None = None):
    lg = run_continual(source, streams, rounds, method_config(method, base))
    return round_means(lg), lg


def seeds_summary(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}
