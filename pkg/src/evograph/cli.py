"""Command-line entry point: ``evograph {gen-data,train,evaluate,gradcheck,predict}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diffengine as de
from .data import DataError, SyntheticConfig, generate_synthetic, load_dataset, read_matrix_csv, \
    save_dataset, write_matrix_csv
from .diffengine import DimensionError, Tensor, gradcheck
from .evaluation import FORMATS, EvalReport, ReportError, emit_report, evaluate_fold
from .gnn import Discriminator, EccLayer, Generator, load_checkpoint, save_checkpoint
from .graphcore import SIGMA_FLOOR, ConnectivityMatrix, InvariantError
from .losses import VARIANTS, LossWeights, StageLosses, adversarial_loss_d, adversarial_loss_g, full_loss, kl_loss, \
    l1_loss, topology_loss
from .training import HISTORY_COLUMNS, ConfigError, NumericError, TrainConfig, TrainDataError, \
    cross_validate, with_variant

log = logging.getLogger("evograph")

OUTPUT_ROOT_ENV = "EVOGRAPH_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _positive(kind=int):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return parse


def _write_config(out_dir: Path, command: str, payload: dict) -> None:
    doc = {"tool": "evograph", "version": __version__, "command": command, **payload}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------- gen-data
def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(args.subjects, args.rois, args.timepoints, args.drift_scale, args.noise_scale,
                          args.sparsity, args.seed)
    out = Path(args.out) if args.out else _output_root() / "data"
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = save_dataset(generate_synthetic(cfg), out)
        _write_config(out, "gen-data", {"synthetic": cfg.to_dict()})
    except OSError as exc:
        print(f"error: cannot write dataset to {out}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(manifest)
    return EXIT_OK


# ---------------------------------------------------------------------- train
def _variants(text: str) -> list[str]:
    names = list(VARIANTS) if text == "all" else [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in VARIANTS]
    if bad or not names:
        raise UsageError(f"unknown variant(s) {bad or text!r}; choose from {', '.join(VARIANTS)} or 'all'")
    return names


def _train_config(args) -> TrainConfig:
    weights = LossWeights(args.lambda1, args.lambda2, args.lambda3)
    return TrainConfig(
        epochs=args.epochs, m=args.m, weights=weights, seed=args.seed, folds=args.folds,
        sigma_floor=args.sigma_floor, dropout=args.dropout, hidden_g=args.hidden_g, hidden_d=args.hidden_d,
        skip=not args.no_skip, chain_backprop=not args.no_chain_backprop, lr_g=args.lr_g, lr_d=args.lr_d,
        beta1=args.beta1, beta2=args.beta2, weight_decay=args.weight_decay,
    )


def write_history(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"], row["stage"], *(repr(float(row[k])) for k in HISTORY_COLUMNS[2:])])


def cmd_train(args) -> int:
    variants = _variants(args.variant)
    base = _train_config(args)
    samples = load_dataset(args.manifest)
    if len(samples) < base.folds:
        raise ConfigError(f"{len(samples)} subjects cannot fill {base.folds} folds")
    out = Path(args.out) if args.out else _output_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, "train", {"manifest": str(args.manifest), "variants": variants, "train": base.to_dict(),
                                 "jobs": args.jobs})
    folds_written = None
    for variant in variants:
        cfg = with_variant(base, variant)
        log.info("training variant %s (%d folds, %d epochs)", variant, cfg.folds, cfg.epochs)
        results = cross_validate(samples, cfg, jobs=args.jobs)
        for res in results:
            fold_dir = out / variant / f"fold{res.fold}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            c = res.cascade
            for i, (g, d) in enumerate(zip(c.generators, c.discriminators), start=1):
                save_checkpoint(fold_dir / f"stage{i}.npz", g, d, config_hash=cfg.hash(),
                                extra={"variant": variant, "fold": res.fold, "stage": i})
            write_history(fold_dir / "loss_history.csv", res.history)
        if folds_written is None:
            folds_written = [{"fold": r.fold, "train": r.train_ids, "test": r.test_ids} for r in results]
            (out / "folds.json").write_text(json.dumps(folds_written, indent=2) + "\n")
        print(f"{variant}: {len(results)} folds -> {out / variant}")
    return EXIT_OK


# ---------------------------------------------------------------------- evaluate
class _LoadedCascade:
    def __init__(self, generators):
        self.generators = generators

    def predict(self, x0):
        preds, prev = [], Tensor(x0)
        for g in self.generators:
            prev = g(prev)
            preds.append(prev.data.copy())
        return preds


def load_cascade(fold_dir: Path, m: int, variant: str = "", fold: int | None = None) -> _LoadedCascade:
    gens = []
    for i in range(1, m + 1):
        path = fold_dir / f"stage{i}.npz"
        if not path.exists():
            raise DataError(f"missing checkpoint for variant {variant or '?'}, fold {fold}, stage {i}: {path}")
        g, _, _ = load_checkpoint(path)
        gens.append(g.eval())
    return _LoadedCascade(gens)


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    try:
        config = json.loads((run / "config.json").read_text())
        folds = json.loads((run / "folds.json").read_text())
    except OSError as exc:
        raise DataError(f"{run}: not a training run directory ({exc})") from exc
    cfg = TrainConfig.from_dict(config["train"])
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise UsageError(f"unknown format(s) {bad}; choose from {', '.join(FORMATS)}")
    manifest = args.manifest or config["manifest"]
    by_id = {s.subject_id: s for s in load_dataset(manifest)}
    report = EvalReport(config_hash=cfg.hash(), seed=cfg.seed)
    for variant in config["variants"]:
        for entry in folds:
            k = entry["fold"]
            missing = [sid for sid in entry["test"] if sid not in by_id]
            if missing:
                raise DataError(f"fold {k}: test subjects {missing} not in {manifest}")
            cascade = load_cascade(run / variant / f"fold{k}", cfg.m, variant, k)
            maes = evaluate_fold(cascade, [by_id[s] for s in entry["test"]], cfg.m)
            report.add(variant, k, maes)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    suffix = {"table": "txt", "csv": "csv", "json": "json"}
    for fmt in formats:
        text = emit_report(report, fmt)
        (out / f"report.{suffix[fmt]}").write_text(text)
    _write_config(out, "evaluate", {"run": str(run), "manifest": str(manifest), "formats": formats,
                                    "train": cfg.to_dict()})
    print(emit_report(report, "table"), end="")
    return EXIT_OK


# ---------------------------------------------------------------------- gradcheck
def _random_graphs(rng, batch: int, n: int) -> np.ndarray:
    u = rng.uniform(0.05, 0.95, size=(batch, n, n))
    w = (u + np.swapaxes(u, 1, 2)) * 0.5
    for b in range(batch):
        np.fill_diagonal(w[b], 0.0)
    return w


def gradcheck_components(seed: int = 0, n: int = 5, h: float = 1e-4, tol: float = 1e-3,
                         linear_tol: float = 1e-5) -> list[tuple[str, float, float, bool]]:
    """Finite-difference checks for every trainable path; returns ``(name, max_err, tol, valid)``."""
    rng = np.random.default_rng(seed)
    x = _random_graphs(rng, 2, n)
    y = _random_graphs(rng, 2, n)
    weight = Tensor(rng.normal(size=(2, n, n)))
    results = []

    def record(name, f, params, component_tol):
        rep = gradcheck(f, params, h=h, tol=component_tol)
        results.append((name, rep.max_error, component_tol, rep.valid))

    layer = EccLayer(n, 3, rng)
    feats = Tensor(rng.normal(size=(2, n, n)), requires_grad=True)
    wl = Tensor(rng.normal(size=(2, n, 3)))
    record("ecc_layer", lambda: (layer(Tensor(x), feats) * wl).sum(), [*layer.parameters(), feats], linear_tol)

    gen = Generator(n, dropout=0.0, rng=rng)
    for p in gen.parameters():
        p.data *= 0.2  # keep outputs away from the clamp edges
    record("generator", lambda: (gen(Tensor(x)) * weight).sum(), gen.parameters(), tol)

    disc = Discriminator(n, rng=rng)
    judged = Tensor(x.copy(), requires_grad=True)
    record("discriminator", lambda: disc(Tensor(y), judged).sum(), [*disc.parameters(), judged], tol)

    pred = Tensor(x.copy(), requires_grad=True)
    record("l1_loss", lambda: l1_loss(pred, Tensor(y)).sum(), [pred], linear_tol)
    record("kl_loss", lambda: kl_loss(pred, Tensor(y)).sum(), [pred], tol)
    record("topology_loss", lambda: topology_loss(pred, Tensor(y)).sum(), [pred], tol)
    scores = Tensor(rng.uniform(0.2, 0.8, size=2), requires_grad=True)
    fake = Tensor(rng.uniform(0.2, 0.8, size=2), requires_grad=True)
    record("adversarial_d", lambda: de.mean(adversarial_loss_d(scores, fake)), [scores, fake], tol)
    record("adversarial_g", lambda: de.mean(adversarial_loss_g(fake)), [fake], tol)

    def full():
        stages = [StageLosses(de.mean(adversarial_loss_g(fake)), l1_loss(pred, Tensor(y)), kl_loss(pred, Tensor(y)))]
        return full_loss(stages, LossWeights(), n_s=2, m=1)

    record("full_loss", full, [pred, fake], tol)
    return results


def cmd_gradcheck(args) -> int:
    results = gradcheck_components(args.seed, args.rois, args.h, args.tol, min(args.tol, args.linear_tol))
    ok = True
    print(f"{'component':<16} {'max_rel_err':>12} {'tol':>8}  status")
    for name, err, tol, valid in results:
        passed = valid and err < tol
        ok &= passed
        status = "PASS" if passed else ("INVALID" if not valid else "FAIL")
        print(f"{name:<16} {err:12.3e} {tol:8.1e}  {status}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------- predict
def cmd_predict(args) -> int:
    ckpt_dir = Path(args.checkpoints)
    stages = sorted(ckpt_dir.glob("stage*.npz"), key=lambda p: int(p.stem[5:]))
    if not stages:
        raise DataError(f"no stage*.npz checkpoints in {ckpt_dir}")
    g0 = read_matrix_csv(args.input)
    out = Path(args.out) if args.out else _output_root() / "predict"
    out.mkdir(parents=True, exist_ok=True)
    cascade = load_cascade(ckpt_dir, len(stages))
    preds = cascade.predict(g0.weights[None])
    for i, p in enumerate(preds, start=1):
        write_matrix_csv(out / f"t{i}.csv", ConnectivityMatrix(p[0]).weights)
    _write_config(out, "predict", {"checkpoints": str(ckpt_dir), "input": str(args.input), "stages": len(stages)})
    print(f"wrote {len(preds)} predicted graphs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evograph", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"evograph {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic longitudinal dataset")
    g.add_argument("--subjects", type=_positive(), default=30)
    g.add_argument("--rois", type=_positive(), default=35)
    g.add_argument("--timepoints", type=_positive(), default=3)
    g.add_argument("--drift-scale", type=float, default=0.05)
    g.add_argument("--noise-scale", type=float, default=0.01)
    g.add_argument("--sparsity", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="k-fold training of one or more loss variants")
    t.add_argument("--manifest", required=True)
    t.add_argument("--variant", default="full", help="full, no_kl, no_kl_plus_topology, a comma list, or 'all'")
    t.add_argument("--epochs", type=_positive(), default=500)
    t.add_argument("--m", type=_positive(), default=2, help="timepoints to predict")
    t.add_argument("--folds", type=int, default=3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lambda1", type=float, default=2.0)
    t.add_argument("--lambda2", type=float, default=2.0)
    t.add_argument("--lambda3", type=float, default=0.001)
    t.add_argument("--lr-g", type=float, default=0.01)
    t.add_argument("--lr-d", type=float, default=0.0002)
    t.add_argument("--beta1", type=float, default=0.5)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--dropout", type=float, default=0.3)
    t.add_argument("--hidden-g", type=_positive(), default=None, help="generator width (default n_r)")
    t.add_argument("--hidden-d", type=_positive(), default=None, help="discriminator width (default n_r)")
    t.add_argument("--sigma-floor", type=float, default=SIGMA_FLOOR)
    t.add_argument("--no-chain-backprop", action="store_true", help="detach each stage's input")
    t.add_argument("--no-skip", action="store_true", help="drop the input-to-output skip connection")
    t.add_argument("--jobs", type=_positive(), default=1, help="folds trained in parallel")
    t.add_argument("--out", help=f"run directory (default ${OUTPUT_ROOT_ENV}/train)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="MAE report for a training run")
    e.add_argument("--run", required=True, help="directory written by 'train'")
    e.add_argument("--manifest", help="dataset manifest (default: the one used for training)")
    e.add_argument("--format", default="table,csv,json", help="comma list of table, csv, json")
    e.add_argument("--out", help="report directory (default <run>/report)")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every trainable path")
    c.add_argument("--tol", type=_positive(float), default=1e-3)
    c.add_argument("--linear-tol", type=_positive(float), default=1e-5)
    c.add_argument("--h", type=_positive(float), default=1e-4)
    c.add_argument("--rois", type=_positive(), default=5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("predict", help="roll a trained cascade from one baseline CSV")
    r.add_argument("--checkpoints", required=True, help="directory holding stage<i>.npz")
    r.add_argument("--input", required=True, help="baseline t0 matrix CSV")
    r.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/predict)")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataError, TrainDataError, ReportError, InvariantError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
