"""Command-line surface: dataset generation, training, decoding, evaluation,
ablations, gradient checks, threshold tuning, and attention-map export.
Commands communicate only through files and exit codes, and every command is
deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, bce_loss
from .data import DatasetManifest, GeneratorConfig, generate_dataset, load_dataset, save_dataset
from .decode import BeamConfig, beam_search, greedy_decode, greedy_trace
from .metrics import evaluate_sets, format_report_line
from .model import FeatureMaps, ModelDims, init_params, load_checkpoint, save_checkpoint, unroll
from .train import TrainConfig, max_label_count, train_two_phase, tune_threshold

__all__ = [
    "main",
    "run",
    "split_validation",
    "predict_lines",
    "evaluate_model",
    "run_ablation",
    "gradcheck_error",
    "export_attention",
    "localization_ratios",
    "ABLATION_ORDER",
    "DEFAULT_GRID",
]

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
ABLATION_ORDER = ("full", "no-attention", "frequency-first", "rare-first")


def split_validation(ds: DatasetManifest, fraction: float = 0.1) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic tail split; the validation part holds at least one instance."""
    if ds.N < 2:
        raise ContractError("split_validation: need at least two instances")
    n_val = max(1, int(round(ds.N * fraction)))
    n_val = min(n_val, ds.N - 1)
    fit = DatasetManifest(c=ds.c, m=ds.m, k=ds.k, instances=ds.instances[: ds.N - n_val])
    val = DatasetManifest(c=ds.c, m=ds.m, k=ds.k, instances=ds.instances[ds.N - n_val :])
    return fit, val


def predict_lines(
    params,
    ds: DatasetManifest,
    cfg: BeamConfig,
    greedy: bool = False,
    attention_on: bool = True,
) -> list[str]:
    """One line per instance: id, tab, the predicted label sequence."""
    lines = []
    for inst in ds.instances:
        if greedy:
            labels = greedy_decode(
                params, inst.features, cfg.threshold, cfg.max_len, cfg.threshold_mode, attention_on
            )
        else:
            _s, best, _c = beam_search(params, inst.features, cfg, attention_on=attention_on)
            labels = list(best.labels)
        lines.append(inst.id + "\t" + " ".join(str(l) for l in labels))
    return lines


def evaluate_model(params, ds: DatasetManifest, cfg: BeamConfig, attention_on: bool = True):
    """(C-P, C-R, C-F1, O-P, O-R, O-F1) of beam-search predictions on a dataset."""
    preds = [
        beam_search(params, inst.features, cfg, attention_on=attention_on)[0]
        for inst in ds.instances
    ]
    truths = [inst.positives for inst in ds.instances]
    return evaluate_sets(preds, truths, ds.c)


def run_ablation(
    train_ds: DatasetManifest,
    val_ds: DatasetManifest,
    test_ds: DatasetManifest,
    base_cfg: TrainConfig,
    dims: Optional[ModelDims] = None,
    beam_width: int = 3,
    grid: Sequence[float] = DEFAULT_GRID,
    log_fn=None,
) -> list[tuple[str, tuple]]:
    """Train the four controlled configurations on one shared split and score
    each on the test set; the decoding threshold is tuned per configuration."""
    max_len = max_label_count(train_ds)
    results = []
    for name in ABLATION_ORDER:
        attention_on = name != "no-attention"
        order_mode = {
            "full": "confidence",
            "no-attention": "confidence",
            "frequency-first": "frequency_first",
            "rare-first": "rare_first",
        }[name]
        cfg = replace(base_cfg, order_mode=order_mode)
        result = train_two_phase(train_ds, val_ds, cfg, dims=dims, attention_on=attention_on)
        base_beam = BeamConfig(beam_width=beam_width, threshold=0.5, max_len=max_len)
        thr = tune_threshold(result.params, val_ds, grid, base_beam, attention_on=attention_on)
        scores = evaluate_model(
            result.params, test_ds, replace(base_beam, threshold=thr), attention_on=attention_on
        )
        if log_fn is not None:
            log_fn(f"{name}: threshold={thr}")
        results.append((name, scores))
    return results


def gradcheck_error(seed: int = 0) -> float:
    """Finite-difference check of a 3-step unroll over all four parameter
    groups, with dropout masks frozen by the seed."""
    dims = ModelDims(c=5, k=6, H=8, a=4, H_p=8, m=4)
    params = init_params(dims, seed=seed)
    rng = np.random.default_rng(seed + 1)
    fm = FeatureMaps(rng.normal(size=(dims.m, dims.k)))
    y = np.zeros(dims.c)
    y[rng.choice(dims.c, size=3, replace=False)] = 1.0

    def f():
        states = unroll(fm, params, 3, keep_prob=0.8, dropout_seed=seed + 2)
        total = bce_loss(states[0].p, y)
        for s in states[1:]:
            total = ad.add(total, bce_loss(s.p, y))
        return total

    return ad.grad_check(f, params.all_tensors(), eps=1e-5)


def export_attention(
    checkpoint_path,
    ds: DatasetManifest,
    instance_ids: Optional[Sequence[str]],
    out_dir,
    threshold: float = 0.5,
    max_len: Optional[int] = None,
    attention_on: bool = True,
) -> list[Path]:
    """Write one text file per decode step: the predicted label, its
    confidence, and the g x g attention grid at six decimals."""
    params = load_checkpoint(checkpoint_path)
    g = int(round(np.sqrt(ds.m)))
    if g * g != ds.m:
        raise ContractError(f"export_attention: m={ds.m} is not a square grid")
    by_id = {inst.id: inst for inst in ds.instances}
    if instance_ids is None:
        instance_ids = [inst.id for inst in ds.instances]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if max_len is None:
        max_len = params.dims.c
    written = []
    for inst_id in instance_ids:
        inst = by_id.get(inst_id)
        if inst is None:
            raise ContractError(f"export_attention: no instance with id {inst_id!r}")
        trace = greedy_trace(params, inst.features, threshold, max_len, attention_on=attention_on)
        for t, step in enumerate(trace, start=1):
            grid = step.alpha.reshape(g, g)
            body = [f"label {step.label} confidence {step.confidence:.6f}"]
            body += [" ".join(f"{v:.6f}" for v in row) for row in grid]
            path = out_dir / f"{inst_id}_step{t}.txt"
            path.write_text("\n".join(body) + "\n")
            written.append(path)
    return written


def localization_ratios(
    params, ds: DatasetManifest, threshold: float, max_len: int, attention_on: bool = True
) -> list[float]:
    """Per instance: mean over correctly predicted steps of the attended mass
    on the label's planted cells, relative to the uniform baseline."""
    ratios = []
    for inst in ds.instances:
        trace = greedy_trace(params, inst.features, threshold, max_len, attention_on=attention_on)
        step_ratios = []
        for step in trace:
            cells = inst.planted.get(step.label)
            if not cells:
                continue
            mass = float(step.alpha[list(cells)].sum())
            uniform = len(cells) / ds.m
            step_ratios.append(mass / uniform)
        if step_ratios:
            ratios.append(float(np.mean(step_ratios)))
    return ratios


# ---------------------------------------------------------------------------
# argument wiring


def _beam_config(args, default_max_len: int) -> BeamConfig:
    max_len = args.max_len if args.max_len else default_max_len
    return BeamConfig(
        beam_width=getattr(args, "beam", 1) or 1,
        threshold=args.threshold,
        max_len=max_len,
        threshold_mode=args.threshold_mode,
    )


def _add_decode_flags(sub, with_beam=True):
    if with_beam:
        sub.add_argument("--beam", type=int, default=3, help="beam width K")
    sub.add_argument("--threshold", type=float, default=0.5, help="confidence floor")
    sub.add_argument("--max-len", type=int, default=0, help="path length cap (0: label count)")
    sub.add_argument("--threshold-mode", choices=("node", "path"), default="node")
    sub.add_argument("--no-attention", action="store_true", help="decode with uniform attention")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orderfree",
        description="Order-free multi-label sequence prediction on synthetic planted-region data.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic train/test split")
    p.add_argument("--out", required=True, help="output directory for train.ds and test.ds")
    p.add_argument("--c", type=int, default=12)
    p.add_argument("--grid", type=int, default=6, help="grid side; m = grid^2")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = subs.add_parser("train", help="two-phase training on a dataset directory")
    p.add_argument("--data", required=True, help="directory containing train.ds")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--lr", type=float, default=0.0003)
    p.add_argument("--keep-prob", type=float, default=0.8)
    p.add_argument("--epochs-phase1", type=int, default=5)
    p.add_argument("--epochs-phase2", type=int, default=12)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order-mode", choices=("confidence", "frequency_first", "rare_first"), default="confidence")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=64, help="LSTM units")
    p.add_argument("--attn-dim", type=int, default=32)
    p.add_argument("--pred-hidden", type=int, default=64)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--log", default=None, help="also append epoch lines to this file")

    p = subs.add_parser("predict", help="decode a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="predictions file")
    p.add_argument("--greedy", action="store_true", help="greedy decoding instead of beam")
    _add_decode_flags(p)

    p = subs.add_parser("eval", help="print the six-metric report line for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="model", help="row label for the report line")
    _add_decode_flags(p)

    p = subs.add_parser("ablate", help="train and score the four controlled configurations")
    p.add_argument("--data", required=True, help="directory containing train.ds and test.ds")
    p.add_argument("--lr", type=float, default=0.0003)
    p.add_argument("--keep-prob", type=float, default=0.8)
    p.add_argument("--epochs-phase1", type=int, default=3)
    p.add_argument("--epochs-phase2", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--attn-dim", type=int, default=32)
    p.add_argument("--pred-hidden", type=int, default=64)
    p.add_argument("--beam", type=int, default=3)

    p = subs.add_parser("gradcheck", help="finite-difference check of a 3-step unroll")
    p.add_argument("--seed", type=int, default=0)

    p = subs.add_parser("tune-threshold", help="pick the beam threshold on a validation file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="validation dataset file")
    p.add_argument("--grid", default=",".join(str(t) for t in DEFAULT_GRID))
    _add_decode_flags(p)

    p = subs.add_parser("export-attention", help="write per-step attention grids as text files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", default=None, help="comma-separated instance ids (default: all)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-len", type=int, default=0)
    p.add_argument("--threshold-mode", choices=("node", "path"), default="node")
    p.add_argument("--no-attention", action="store_true")
    return parser


def _cmd_gen_data(args) -> int:
    base = GeneratorConfig.default_benchmark(seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    if (args.c, args.grid, args.k) == (12, 6, 16):
        cfg = replace(base, noise_sigma=args.noise)
    else:
        # non-default shapes get flat mid-frequency labels with unit footprints
        freqs = tuple(0.3 for _ in range(args.c))
        sizes = (1,) * args.c
        cfg = GeneratorConfig(
            c=args.c, g=args.grid, k=args.k, n_train=args.n_train, n_test=args.n_test,
            label_freqs=freqs, cooc=np.zeros((args.c, args.c)), size_map=sizes,
            noise_sigma=args.noise, seed=args.seed,
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        ds = generate_dataset(cfg, split)
        save_dataset(ds, out / f"{split}.ds")
        print(f"wrote {out / (split + '.ds')} ({ds.N} instances, c={ds.c} m={ds.m} k={ds.k})")
    return 0


def _cmd_train(args) -> int:
    train_full = load_dataset(Path(args.data) / "train.ds")
    fit_ds, val_ds = split_validation(train_full, args.val_fraction)
    cfg = TrainConfig(
        lr=args.lr, keep_prob=args.keep_prob,
        epochs_phase1=args.epochs_phase1, epochs_phase2=args.epochs_phase2,
        seed=args.seed, batch=args.batch, order_mode=args.order_mode,
    )
    dims = ModelDims(
        c=fit_ds.c, k=fit_ds.k, m=fit_ds.m,
        H=args.hidden, a=args.attn_dim, H_p=args.pred_hidden,
    )
    log_file = open(args.log, "a") if args.log else None

    def log_fn(line):
        print(line)
        if log_file:
            log_file.write(line + "\n")

    try:
        result = train_two_phase(
            fit_ds, val_ds, cfg, dims=dims,
            attention_on=not args.no_attention, log_fn=log_fn,
        )
    finally:
        if log_file:
            log_file.close()
    save_checkpoint(result.params, args.out)
    if result.skipped:
        print(f"skipped {result.skipped} empty-label instances", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def _cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    cfg = _beam_config(args, params.dims.c)
    greedy = args.greedy or cfg.beam_width == 1
    lines = predict_lines(params, ds, cfg, greedy=greedy, attention_on=not args.no_attention)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out} ({len(lines)} instances)")
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    cfg = _beam_config(args, params.dims.c)
    scores = evaluate_model(params, ds, cfg, attention_on=not args.no_attention)
    print(format_report_line(args.method, scores))
    return 0


def _cmd_ablate(args) -> int:
    train_full = load_dataset(Path(args.data) / "train.ds")
    test_ds = load_dataset(Path(args.data) / "test.ds")
    fit_ds, val_ds = split_validation(train_full, args.val_fraction)
    cfg = TrainConfig(
        lr=args.lr, keep_prob=args.keep_prob,
        epochs_phase1=args.epochs_phase1, epochs_phase2=args.epochs_phase2,
        seed=args.seed,
    )
    dims = ModelDims(
        c=fit_ds.c, k=fit_ds.k, m=fit_ds.m,
        H=args.hidden, a=args.attn_dim, H_p=args.pred_hidden,
    )
    for name, scores in run_ablation(fit_ds, val_ds, test_ds, cfg, dims=dims, beam_width=args.beam):
        print(format_report_line(name, scores))
    return 0


def _cmd_gradcheck(args) -> int:
    err = gradcheck_error(args.seed)
    print(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 1


def _cmd_tune_threshold(args) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    grid = [float(x) for x in args.grid.split(",") if x]
    cfg = _beam_config(args, params.dims.c)
    best = tune_threshold(params, ds, grid, cfg, attention_on=not args.no_attention)
    print(f"{best}")
    return 0


def _cmd_export_attention(args) -> int:
    ds = load_dataset(args.data)
    ids = args.ids.split(",") if args.ids else None
    written = export_attention(
        args.checkpoint, ds, ids, args.out_dir,
        threshold=args.threshold, max_len=args.max_len or None,
        attention_on=not args.no_attention,
    )
    print(f"wrote {len(written)} attention grids to {args.out_dir}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "tune-threshold": _cmd_tune_threshold,
    "export-attention": _cmd_export_attention,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ContractError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
