"""Adam with step decay, the epoch loop, evaluation, and checkpoint plumbing."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dmfnet import dataio
from dmfnet import diffarray as da
from dmfnet.config import TrainConfig
from dmfnet.errors import NonFiniteError, ShapeError
from dmfnet.metrics import DEFAULT_TAU, cd_l1, cd_l2, f_score
from dmfnet.model import CompletionNet

LOG_FIELDS = ("epoch", "lr", "cd_coarse", "cd_intermediate", "cd_final", "total")
LOSS_TERMS = ("cd_coarse", "cd_intermediate", "cd_final", "total")
F32_MAX = float(np.finfo(np.float32).max)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls({p.name: np.zeros(p.shape) for p in params},
                   {p.name: np.zeros(p.shape) for p in params}, 0)


def adam_step(params, state: OptimizerState, lr, cfg: TrainConfig, grads=None):
    """One bias-corrected Adam update; ``grads`` defaults to each parameter's ``.grad``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {p.name} has shape {g.shape}, expected {p.shape}")
        m = state.m[p.name] = b1 * state.m[p.name] + (1.0 - b1) * g
        v = state.v[p.name] = b2 * state.v[p.name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def lr_at(epoch, cfg: TrainConfig):
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def _clip(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / total)


class Trainer:
    """Owns a network, its optimizer state and cached loss targets for a dataset."""

    def __init__(self, net: CompletionNet, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg.validate()
        self.state = OptimizerState.fresh(net.params)
        self.epoch = 0
        self._pyramids = {}

    def _pyramid(self, sample):
        key = id(sample)
        if key not in self._pyramids:
            self._pyramids[key] = (sample, self.net.pyramid(sample.gt))
        return self._pyramids[key][1]

    def sample_loss(self, sample):
        out = self.net.forward(sample.partial, sample.image)
        return self.net.loss(out, sample.gt, self._pyramid(sample))

    def train_epoch(self, samples, epoch=None):
        """Seeded shuffle, per-batch mean loss, backward, Adam; returns mean per-term losses."""
        if not samples:
            raise ValueError("empty dataset")
        epoch = self.epoch if epoch is None else epoch
        lr = lr_at(epoch, self.cfg)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(samples))
        seen = {k: [] for k in LOSS_TERMS}
        params = self.net.params
        bs = self.cfg.batch_size
        for b, start in enumerate(range(0, len(order), bs)):
            batch = sorted(order[start:start + bs])
            params.zero_grad()
            for i in batch:
                with da.GradientRecord() as tape:
                    rep = self.sample_loss(samples[i])
                    scaled = da.scale(rep.total, 1.0 / len(batch))
                vals = rep.values()
                if not all(math.isfinite(x) for x in vals.values()):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {b} (sample {i})")
                da.backward(tape, scaled)
                for k in LOSS_TERMS:
                    seen[k].append(vals[k])
            for p in params:
                if not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"non-finite gradient for {p.name} at epoch {epoch} batch {b}")
            if self.cfg.clip_grad:
                _clip(params, self.cfg.clip_grad)
            adam_step(params, self.state, lr, self.cfg)
            for p in params:
                # f32 range: checkpoints must be able to store the result
                if not np.all(np.abs(p.data) <= F32_MAX):
                    raise NonFiniteError(f"parameter {p.name} left the float32 range at epoch {epoch} batch {b}")
        self.epoch = epoch + 1
        # fsum makes the epoch mean independent of the shuffle order
        return {k: math.fsum(v) / len(samples) for k, v in seen.items()}

    def snap(self):
        """Round parameters and moments to float32, exactly as a checkpoint stores them."""
        for p in self.net.params:
            p.data = dataio.quantize(p.data)
            self.state.m[p.name] = dataio.quantize(self.state.m[p.name])
            self.state.v[p.name] = dataio.quantize(self.state.v[p.name])

    def to_checkpoint(self):
        return dataio.Checkpoint(self.net.params.state(), dict(self.state.m), dict(self.state.v),
                                 self.state.t, self.epoch,
                                 {"net": self.net.cfg.to_dict(), "train": self.cfg.to_dict()})

    def save(self, path):
        self.snap()
        dataio.save_checkpoint(path, self.to_checkpoint())

    def restore(self, ckpt: dataio.Checkpoint):
        dataio.check_compatible(ckpt, self.net.params)
        for group, name in ((ckpt.adam_m, "adam_m"), (ckpt.adam_v, "adam_v")):
            if set(group) != set(self.net.params.names()):
                raise dataio.CheckpointError(f"checkpoint {name} entries do not match the model")
        self.net.params.load_state(ckpt.params)
        self.state = OptimizerState(dict(ckpt.adam_m), dict(ckpt.adam_v), ckpt.step)
        self.epoch = ckpt.epoch

    def fit(self, samples, epochs=None, log=None, checkpoint_path=None, on_epoch=None):
        """Train until ``epochs`` total epochs are done; snapshot every ``checkpoint_every``."""
        epochs = self.cfg.epochs if epochs is None else epochs
        history = []
        while self.epoch < epochs:
            epoch = self.epoch
            lr = lr_at(epoch, self.cfg)
            stats = self.train_epoch(samples, epoch)
            row = {"epoch": epoch + 1, "lr": lr, **stats}
            history.append(row)
            if log is not None:
                log.write(",".join(repr(row[k]) if k != "epoch" else str(row[k]) for k in LOG_FIELDS) + "\n")
                log.flush()
            if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == epochs:
                self.snap()
                if checkpoint_path is not None:
                    dataio.save_checkpoint(checkpoint_path, self.to_checkpoint())
            if on_epoch is not None:
                on_epoch(self, row)
        return history


def log_header():
    return ",".join(LOG_FIELDS) + "\n"


@dataclass
class EvalReport:
    per_sample: list
    mean: dict
    per_category: dict


def evaluate(net, samples, tau=DEFAULT_TAU, gt_as_prediction=False):
    """L2-CD, L1-CD and F-Score of the completed cloud against the ground truth.

    No gradients are recorded. ``gt_as_prediction`` scores the ground truth
    against itself (a diagnostic for the metric path).
    """
    rows = []
    for s in samples:
        if gt_as_prediction:
            pred = s.gt
        else:
            if s.partial.shape[0] != net.cfg.n_points:
                raise ShapeError(f"sample has {s.partial.shape[0]} points, model expects {net.cfg.n_points}")
            pred = net.forward(s.partial, s.image).pc.data
        rows.append({
            "category": s.category,
            "cd_l2": float(cd_l2(pred, s.gt).data),
            "cd_l1": float(cd_l1(pred, s.gt).data),
            "f_score": f_score(pred, s.gt, tau),
        })
    keys = ("cd_l2", "cd_l1", "f_score")

    def agg(rs):
        return {k: math.fsum(r[k] for r in rs) / len(rs) for k in keys}

    cats = {}
    for r in rows:
        cats.setdefault(r["category"], []).append(r)
    return EvalReport(rows, agg(rows) if rows else {}, {c: agg(rs) for c, rs in sorted(cats.items())})


def metrics_table(report: EvalReport, tau=DEFAULT_TAU):
    """Text table and CSV laid out like the benchmark table: Avg first, then categories."""
    cols = ["Avg"] + [c.capitalize() for c in report.per_category]
    stats = [report.mean] + list(report.per_category.values())
    l2 = [f"{s['cd_l2'] * 1e3:.3f}" for s in stats]
    fs = [f"{s['f_score']:.3f}" for s in stats]
    width = max(8, *(len(c) for c in cols))
    head = f"{'Metric':<16}|" + "|".join(f"{c:>{width}}" for c in cols)
    lines = [head, "-" * len(head),
             f"{'L2-CD x1e3':<16}|" + "|".join(f"{v:>{width}}" for v in l2),
             f"{'F-Score@' + format(tau, 'g'):<16}|" + "|".join(f"{v:>{width}}" for v in fs)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + cols)
    writer.writerow(["l2_cd_x1e3"] + l2)
    writer.writerow([f"f_score@{tau:g}"] + fs)
    return "\n".join(lines) + "\n", buf.getvalue()


def write_log_header(path: Path):
    path.write_text(log_header(), encoding="utf-8")
