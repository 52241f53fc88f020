"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad input, config, or a failed
gradient check), 2 numeric failure (non-finite loss or spectrum).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as C
from . import gmm, synth
from .transformer import STRATEGIES

log = logging.getLogger("priordetr")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _csv(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _run_config(args) -> C.RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "interaction", None):
        overrides.append(f"model.strategy={args.interaction}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out_dir", None):
        overrides.append(f"out_dir={args.out_dir}")
    return C.load(args.config, overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit_gmm(args) -> int:
    recs = synth.read_records(args.annotations)
    ws, hs = [], []
    for r in recs:
        ws.extend(r["boxes"][:, 2] * r["width"])
        hs.extend(r["boxes"][:, 3] * r["height"])
    X = gmm.boxes_to_samples(np.array(ws), np.array(hs))
    w_ref = float(np.median(ws)) if ws else 1.0
    prior = gmm.fit_em(X, args.M, seed=args.seed, w_ref=w_ref)
    order = np.argsort(-prior.weights, kind="stable")
    print(f"fitted M={prior.M} on {len(X)} boxes, w_ref={w_ref:.3f}, "
          f"{len(prior.ll_trace) - 1} EM iterations, mean LL {prior.ll_trace[-1]:.4f}")
    print(f"{'comp':>4} {'weight':>8} {'mean r':>8} {'mean log w':>11} {'width px':>9}")
    for i, m in enumerate(order):
        r, lw = prior.means[m]
        print(f"{i:>4} {prior.weights[m]:>8.4f} {r:>8.4f} {lw:>11.4f} {np.exp(lw):>9.2f}")
    if args.out:
        gmm.save_prior(args.out, prior)
        print(f"prior written to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = synth.SynthConfig(seed=args.seed, speckle=args.speckle, blur=args.blur,
                            shadow_prob=args.shadow_prob, height=args.size, width=args.size)
    samples = synth.generate(cfg, args.count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synth.write_annotations(samples, out)
    n_boxes = sum(len(s.boxes) for s in samples)
    print(f"wrote {len(samples)} images ({n_boxes} boxes) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import train as T
    cfg = _run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())

    def progress(rec):
        ev = rec.get("eval")
        extra = f" AP@0.5={ev['AP50']:.3f} AP={ev['AP']:.3f}" if ev else ""
        print(f"epoch {rec['epoch']:>3} loss={rec['loss']:.4f} ({rec['time']:.1f}s){extra}",
              flush=True)

    res = T.train(cfg, log_path=str(out / "log.jsonl"),
                  checkpoint_path=str(out / "checkpoint.npz"), on_epoch=progress)
    if res.prior is not None:
        gmm.save_prior(out / "prior.json", res.prior)
    if res.report is not None:
        (out / "report.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "report": res.report.to_dict()}, indent=2))
        print(res.report.table("model"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import train as T
    model, cfg, _ = T.load_checkpoint(args.checkpoint)
    samples = synth.read_annotations(args.annotations)
    report = T.evaluate_model(model, samples)
    if args.json:
        print(json.dumps({"config": cfg.to_dict(), "report": report.to_dict()}, indent=2))
    else:
        print(report.table(Path(args.checkpoint).stem))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import train as T
    cfg = _run_config(args)
    variants = _csv(args.strategies)
    for v in variants:
        if v not in STRATEGIES and v != T.ABLATION_BASELINE:
            raise C.ConfigError(f"unknown variant {v!r}; choose from "
                                f"{', '.join(STRATEGIES + (T.ABLATION_BASELINE,))}")
    seeds = [int(s) for s in _csv(args.seeds)]
    if not seeds:
        raise C.ConfigError("need at least one seed")

    def progress(name, seed, report):
        print(f"{name} seed={seed}: AP@0.5={report.AP50:.3f} AP={report.AP:.3f}", flush=True)

    rows = T.ablate(cfg, variants, seeds, on_run=progress)
    print(T.format_ablation(rows, seeds))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({
            "config": cfg.to_dict(), "seeds": seeds,
            "rows": [{"variant": r.name, "AP50": r.per_seed, "AP": r.per_seed_ap,
                      "AP50_mean": r.mean, "AP50_sd": r.sd} for r in rows]}, indent=2))
    return EXIT_OK


def _band_energy(amp: np.ndarray, bands: int = 4) -> np.ndarray:
    """Fraction of spectral energy per radial frequency band (low to high)."""
    H, W = amp.shape[-2:]
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    rad = np.hypot(fy, fx) / np.hypot(0.5, 0.5)
    idx = np.minimum((rad * bands).astype(int), bands - 1)
    e = (amp ** 2).reshape(-1, H, W).sum(0)
    tot = np.array([e[idx == b].sum() for b in range(bands)])
    return tot / tot.sum()


def cmd_inspect_spectrum(args) -> int:
    from .autodiff import Tensor
    from .autodiff import spectral as S
    if args.annotations:
        samples = synth.read_annotations(args.annotations)
        if not samples:
            raise ValueError(f"{args.annotations}: no images")
        img = samples[min(args.index, len(samples) - 1)].image
    else:
        img = synth.generate(synth.SynthConfig(seed=args.seed, speckle=args.speckle), 1)[0].image
    x = Tensor(img[None, None])
    spec = S.fft2(x)
    amp = S.complex_abs(spec).data[0, 0]
    back = S.ifft2(spec).data[0, 0]
    print(f"image {img.shape[0]}x{img.shape[1]}, roundtrip error {np.abs(back - img).max():.2e}, "
          f"imag residue {float(S.imag_residue(spec.data)):.2e}")
    print("energy by radial band (low -> high): " +
          " ".join(f"{v:.4f}" for v in _band_energy(amp)))
    if args.checkpoint:
        from . import train as T
        model, _, _ = T.load_checkpoint(args.checkpoint)
        if model.msffm is None:
            print("checkpoint has no frequency branch")
        else:
            t = Tensor((img[None, None] - 0.5) / 0.25)
            feats = [p(f) for p, f in zip(model.proj, _stage_feats(model, t))]
            for lvl, (blk, f) in enumerate(zip(model.msffm.blocks, feats)):
                _, a0, a1 = blk.frequency(f, return_spectra=True)
                print(f"level {lvl} alpha={float(blk.alpha.data):.3f} band energy in  " +
                      " ".join(f"{v:.3f}" for v in _band_energy(a0[0])) + "  out " +
                      " ".join(f"{v:.3f}" for v in _band_energy(a1[0])))
    if args.out:
        from .autodiff import save_tensor
        save_tensor(args.out, amp)
        print(f"amplitude spectrum written to {args.out}")
    if not np.isfinite(amp).all():
        raise FloatingPointError("non-finite spectrum")
    return EXIT_OK


def _stage_feats(model, x):
    from .autodiff import functional as F
    x = F.relu(model.stem1_bn(model.stem1(x)))
    x = F.relu(model.stem2_bn(model.stem2(x)))
    out = []
    for st in model.stages:
        x = st(x)
        out.append(x)
    return out


def cmd_check_grads(args) -> int:
    from . import gradsuite
    import time
    t0 = time.time()
    width = max(len(n) for n, _ in gradsuite.CASES)

    def show(r):
        mark = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.error:.3e}  {r.seconds:6.2f}s  {mark}", flush=True)

    results = gradsuite.run(args.tol, only=_csv(args.only) if args.only else None, report=show)
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} passed (tol {args.tol:g}) "
          f"in {time.time() - t0:.1f}s")
    if bad:
        print("failed: " + ", ".join(bad))
        return EXIT_INVALID
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_run_args(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted for nested), repeatable")
    p.add_argument("--interaction", choices=STRATEGIES, help="decoder key/value strategy")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="priordetr", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-gmm", help="fit the box-geometry mixture prior")
    p.add_argument("annotations")
    p.add_argument("--M", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True, help="annotations .jsonl path")
    p.add_argument("--speckle", type=float, default=0.3)
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--shadow-prob", dest="shadow_prob", type=float, default=0.3)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("annotations")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train per (variant, seed) and compare")
    _add_run_args(p)
    p.add_argument("--strategies", default="dfi,sequential,no-prior",
                   help="comma list of strategies and/or no-prior")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", help="JSON results path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-spectrum", help="amplitude spectrum summary of an image")
    p.add_argument("--annotations")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speckle", type=float, default=0.3)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_spectrum)

    p = sub.add_parser("check-grads", help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", help="comma list of case names")
    p.set_defaults(func=cmd_check_grads)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .train import NumericError
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
