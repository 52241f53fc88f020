"""Training, evaluation, checkpoints and ablation runs."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as C
from . import gmm, synth
from .detection import total_loss
from .gmm import GmmPrior2D
from .metrics import EvalReport, evaluate
from .model import Detector
from .optim import AdamW

logger = logging.getLogger(__name__)

ABLATION_BASELINE = "no-prior"


class NumericError(RuntimeError):
    """Raised when the loss or gradient stops being finite."""

    def __init__(self, msg: str, dump_path: Optional[str] = None):
        super().__init__(msg)
        self.dump_path = dump_path


# ---------------------------------------------------------------------------
# data and prior
# ---------------------------------------------------------------------------

def synth_config(data: C.DataConfig) -> synth.SynthConfig:
    return synth.SynthConfig(speckle=data.speckle, blur=data.blur,
                             shadow_prob=data.shadow_prob, seed=data.seed)


def load_data(data: C.DataConfig) -> Tuple[List[synth.Sample], List[synth.Sample]]:
    """Annotation files when given, else a generated split (test follows train)."""
    scfg = synth_config(data)
    train = synth.read_annotations(data.train) if data.train else synth.generate(scfg, data.n_train)
    if data.test:
        test = synth.read_annotations(data.test)
    else:
        test = synth.generate(scfg, data.n_test, start=data.n_train)
    return train, test


def fit_prior(samples: Sequence[synth.Sample], M: int = 3, seed: int = 0) -> GmmPrior2D:
    """EM on training-box geometry; w_ref is the median box width in pixels."""
    X = synth.box_geometry(list(samples))
    w_ref = float(np.median(np.exp(X[:, 1])))
    return gmm.fit_em(X, M, seed=seed, w_ref=w_ref)


def resolve_prior(cfg: C.RunConfig, train: Sequence[synth.Sample]) -> Optional[GmmPrior2D]:
    if not (cfg.model.use_sdfpr and cfg.model.use_prior):
        return None
    if cfg.prior:
        return gmm.load_prior(cfg.prior)
    return fit_prior(train, cfg.prior_components, cfg.seed)


def build_model(cfg: C.RunConfig, prior: Optional[GmmPrior2D]) -> Detector:
    return Detector(cfg.model, prior, seed=cfg.seed)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def make_batch(samples: Sequence[synth.Sample], flips: Optional[np.ndarray] = None):
    imgs, targets = [], []
    for i, s in enumerate(samples):
        img, boxes = s.image, s.boxes.copy()
        if flips is not None and flips[i]:
            img = img[:, ::-1]
            boxes[:, 0] = 1.0 - boxes[:, 0]
        imgs.append(img)
        targets.append({"boxes": boxes, "labels": s.labels})
    return np.stack(imgs), targets


def batch_loss(model: Detector, images, targets, cfg: C.RunConfig):
    logits, boxes = model(images)
    layers = range(len(logits)) if cfg.aux_loss else [len(logits) - 1]
    total, comps = None, {}
    for j in layers:
        t, c, _ = total_loss(logits[j], boxes[j], targets, cfg.loss)
        total = t if total is None else total + t
        if j == len(logits) - 1:
            comps = c
    proposals = model.transformer.last_proposals
    if model.cfg.two_stage and proposals is not None:
        t, c, _ = total_loss(proposals[0], proposals[1], targets, cfg.loss)
        total = total + t
        comps = dict(comps, enc_loss=float(t.data))
    comps = dict(comps, loss=float(total.data))
    return total, comps


def _dump_batch(out_dir: str, epoch: int, step: int, images, targets, comps, cfg) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"nonfinite_e{epoch}_s{step}.npz")
    np.savez(path, images=images,
             boxes=np.array([t["boxes"] for t in targets], dtype=object),
             labels=np.array([t["labels"] for t in targets], dtype=object),
             info=json.dumps({"epoch": epoch, "step": step, "components": comps,
                              "config": cfg.to_dict()}, default=str))
    return path


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(model: Detector, samples: Sequence[synth.Sample], batch_size: int = 8) -> List[dict]:
    dets = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        dets.extend(model.predict(np.stack([s.image for s in chunk])))
    return dets


def evaluate_model(model: Detector, samples: Sequence[synth.Sample],
                   batch_size: int = 8) -> EvalReport:
    dets = predict(model, samples, batch_size)
    return evaluate(dets, [s.target() for s in samples], num_classes=model.cfg.num_classes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Detector, cfg: C.RunConfig, prior: Optional[GmmPrior2D]) -> None:
    state = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"config": cfg.to_dict(), "prior": prior.to_dict() if prior is not None else None}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **state)


def load_checkpoint(path) -> Tuple[Detector, C.RunConfig, Optional[GmmPrior2D]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    cfg = C.from_dict(meta["config"])
    prior = GmmPrior2D.from_dict(meta["prior"]) if meta["prior"] else None
    model = build_model(cfg, prior)
    model.load_state_dict(state)
    return model.eval(), cfg, prior


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Detector
    prior: Optional[GmmPrior2D]
    history: List[dict] = field(default_factory=list)
    report: Optional[EvalReport] = None


def train(cfg: C.RunConfig, data=None, log_path: Optional[str] = None,
          checkpoint_path: Optional[str] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train per ``cfg``; raises NumericError on a non-finite loss."""
    cfg.validate()
    train_set, test_set = data if data is not None else load_data(cfg.data)
    prior = resolve_prior(cfg, train_set)
    model = build_model(cfg, prior)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 1])
    log = open(log_path, "w") if log_path else None
    if log:
        log.write(json.dumps({"type": "config", "config": cfg.to_dict(),
                              "prior": prior.to_dict() if prior else None}) + "\n")
    history: List[dict] = []
    report = None
    try:
        for epoch in range(cfg.epochs):
            if cfg.lr_drop is not None and epoch == cfg.lr_drop:
                opt.lr = cfg.lr * 0.1
            model.train()
            t0 = time.time()
            order = rng.permutation(len(train_set))
            sums: Dict[str, float] = {}
            steps = 0
            for step, i in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[i:i + cfg.batch_size]
                flips = rng.random(len(idx)) < 0.5 if cfg.hflip else None
                images, targets = make_batch([train_set[k] for k in idx], flips)
                loss, comps = batch_loss(model, images, targets, cfg)
                if not math.isfinite(comps["loss"]):
                    dump = _dump_batch(cfg.out_dir, epoch, step, images, targets, comps, cfg)
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}; "
                                       f"batch dumped to {dump}", dump)
                opt.zero_grad()
                loss.backward()
                gnorm = opt.step()
                if not math.isfinite(gnorm):
                    dump = _dump_batch(cfg.out_dir, epoch, step, images, targets, comps, cfg)
                    raise NumericError(f"non-finite gradient at epoch {epoch} step {step}; "
                                       f"batch dumped to {dump}", dump)
                comps["grad_norm"] = gnorm
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
            rec = {"type": "epoch", "epoch": epoch, "lr": opt.lr, "time": round(time.time() - t0, 3)}
            rec.update({k: v / steps for k, v in sums.items()})
            last = epoch == cfg.epochs - 1
            if test_set and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
                report = evaluate_model(model, test_set)
                rec["eval"] = report.to_dict()
            history.append(rec)
            if log:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if on_epoch:
                on_epoch(rec)
            logger.info("epoch %d loss %.4f AP50 %s", epoch, rec["loss"],
                        rec.get("eval", {}).get("AP50"))
    finally:
        if log:
            log.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, cfg, prior)
    return TrainResult(model.eval(), prior, history, report)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def variant_config(cfg: C.RunConfig, name: str, seed: int) -> C.RunConfig:
    """A strategy name swaps the decoder mapping; ``no-prior`` turns off
    SDFPR, MSFFM and DFI (plain last-layer keys and values)."""
    if name == ABLATION_BASELINE:
        model = replace(cfg.model, use_sdfpr=False, use_msffm=False, strategy="original")
    else:
        model = replace(cfg.model, strategy=name)
    return replace(cfg, model=model, seed=seed).validate()


@dataclass
class AblationRow:
    name: str
    per_seed: List[float]
    per_seed_ap: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def sd(self) -> float:
        return float(np.std(self.per_seed, ddof=1)) if len(self.per_seed) > 1 else 0.0


def ablate(cfg: C.RunConfig, variants: Sequence[str], seeds: Sequence[int],
           data=None, on_run: Optional[Callable[[str, int, EvalReport], None]] = None
           ) -> List[AblationRow]:
    data = data if data is not None else load_data(cfg.data)
    rows = []
    for name in variants:
        ap50, ap = [], []
        for seed in seeds:
            res = train(variant_config(cfg, name, seed), data=data)
            ap50.append(res.report.AP50)
            ap.append(res.report.AP)
            if on_run:
                on_run(name, seed, res.report)
        rows.append(AblationRow(name, ap50, ap))
    return rows


def format_ablation(rows: Sequence[AblationRow], seeds: Sequence[int]) -> str:
    head = f"{'variant':<12} {'AP@0.5 mean':>11} {'sd':>7} {'AP mean':>8}  per-seed AP@0.5"
    lines = [head, "-" * len(head)]
    for r in rows:
        seeds_txt = ", ".join(f"s{s}={v:.3f}" for s, v in zip(seeds, r.per_seed))
        lines.append(f"{r.name:<12} {r.mean:>11.3f} {r.sd:>7.3f} {np.mean(r.per_seed_ap):>8.3f}  "
                     f"{seeds_txt}")
    return "\n".join(lines)
