"""Command-line entry point: ``sgscl <command> [flags]``.

Exit codes: 0 success, 1 internal failure, 2 usage error or missing input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import audio
from . import corpus as C
from . import evaluation as E
from . import model as M
from . import objectives as O
from . import trainer as TR
from .gradcheck import GRADCHECK_TOL, run_gradcheck

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class MissingInput(Exception):
    pass


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_records(args) -> list[C.CorpusRecord]:
    return C.read_manifest(_need(args.manifest, "manifest"))


def _load_features(args) -> TR.FeatureSet:
    records = _load_records(args)
    if args.features:
        try:
            return TR.load_feature_dir(records, _need(args.features, "feature directory"))
        except FileNotFoundError as exc:
            raise MissingInput(str(exc)) from exc
    for r in records:
        _need(r.path, "audio file")
    return TR.featurize_records(records)


def _train_config(args) -> TR.TrainConfig:
    cfg = TR.TrainConfig.from_json(_need(args.config, "config")) if args.config else TR.TrainConfig()
    seeds = None
    if args.seeds is not None:
        first = args.seed or 0
        seeds = tuple(range(first, first + args.seeds))
    elif args.seed is not None:
        seeds = (args.seed,)
    return TR.with_overrides(
        cfg, method=args.method, variant=args.variant, tau=args.tau, lambda_start=args.lambda_start,
        lambda_end=args.lambda_end, lambda_steps=args.lambda_steps, epochs=args.epochs,
        batch_size=args.batch, lr=args.lr, seeds=seeds,
    )


def _fit_devices(cfg: TR.TrainConfig, fs: TR.FeatureSet) -> TR.TrainConfig:
    k = int(fs.d.max()) + 1 if len(fs) else 2
    return TR.with_overrides(cfg, num_devices=max(cfg.num_devices, k))


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> str:
    out = _out(args)
    kw = dict(num_devices=args.devices, n_train=args.n_train, n_test=args.n_test,
              correlation=args.correlation, seed=args.seed or 0)
    spec = C.SynthSpec.icbhi_like(**kw) if args.icbhi_like else C.SynthSpec.biased(**kw)
    records = C.synthesize_corpus(spec, out / "audio")
    C.write_manifest(records, out / "manifest.tsv")
    (out / "summary.txt").write_text(C.format_summary(C.summarize(records, spec.num_devices)) + "\n")
    return f"synth: {len(records)} clips, {spec.num_devices} devices -> {out / 'manifest.tsv'}"


def cmd_ingest(args) -> str:
    out = _out(args)
    records = C.ingest_icbhi(_need(args.root, "ICBHI directory"), _need(args.split_file, "split file"))
    C.write_manifest(records, out / "manifest.tsv")
    table = C.summarize(records, 4)
    text = C.format_summary(table)
    (out / "summary.txt").write_text(text + "\n")
    (out / "summary.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return f"ingest-icbhi: {len(records)} cycles -> {out / 'manifest.tsv'}"


def cmd_featurize(args) -> str:
    out = _out(args)
    records = _load_records(args)
    for r in records:
        _need(r.path, "audio file")
        w = C.load_record_audio(r)
        audio.write_fbank(TR.feature_path(out, r), audio.featurize(w))
    return f"featurize: {len(records)} feature files -> {out}"


def _aggregate_line(agg: dict | None) -> str:
    if not agg:
        return "no test split"
    s = agg["4-class"]
    return "4-class S_p {:.2f} S_e {:.2f} Score {:.2f} +/- {:.2f}".format(
        s["S_p"]["mean"], s["S_e"]["mean"], s["Score"]["mean"], s["Score"]["std"])


def cmd_train(args) -> str:
    out = _out(args)
    fs = _load_features(args)
    cfg = _fit_devices(_train_config(args), fs)
    result = TR.train(cfg, fs.subset("train"), fs.subset("test"), out, args.eval_every)
    return f"train: {cfg.method}, seeds {list(cfg.seeds)}: {_aggregate_line(result['aggregate'])}"


def cmd_evaluate(args) -> str:
    out = _out(args)
    state = M.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    test = _load_features(args).subset(args.split)
    reports = E.evaluate(state, test.x, test.y)
    E.write_metrics(reports, out / "metrics.json")
    d = reports["4-class"].display()
    b = reports["2-class"].display()
    return f"evaluate: 4-class Score {d['Score']:.2f} (S_p {d['S_p']:.2f}, S_e {d['S_e']:.2f}); 2-class Score {b['Score']:.2f}"


def cmd_probe(args) -> str:
    out = _out(args)
    state = M.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    fs = _load_features(args)
    tr, te = fs.subset("train"), fs.subset("test")
    acc = E.domain_probe(E.embed(state, tr.x), tr.d, E.embed(state, te.x), te.d, args.steps, args.probe_lr)
    (out / "probe.json").write_text(json.dumps({"device_accuracy": acc}, indent=2) + "\n")
    return f"probe: device accuracy {acc:.2f}%"


def cmd_export(args) -> str:
    out = _out(args)
    state = M.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    fs = _load_features(args)
    E.export_embeddings(state, fs.x, fs.ids, fs.y, fs.d, fs.split, out / "embeddings.csv")
    return f"export-embeddings: {len(fs)} rows -> {out / 'embeddings.csv'}"


def cmd_gradcheck(args) -> tuple[str, int]:
    worst = run_gradcheck(args.batches, args.seed or 0)
    for name, err in worst.items():
        print(f"{name:20s} max rel err {err:.3e}")
    bad = [n for n, e in worst.items() if not e < GRADCHECK_TOL]
    if args.out:
        (_out(args) / "gradcheck.json").write_text(json.dumps(worst, indent=2, sort_keys=True) + "\n")
    line = f"gradcheck: {len(worst)} losses, worst {max(worst.values()):.3e}"
    return (line + f"; FAILED {bad}", EXIT_INTERNAL) if bad else (line, EXIT_OK)


def ablation_table(cfg: TR.TrainConfig, train_set, test_set, variants, out: Path | None = None) -> list[dict]:
    """Train every variant under identical seeds and config; one row per variant."""
    rows = []
    for v in variants:
        vcfg = TR.with_overrides(cfg, method="sgscl", variant=str(v))
        sub = out / str(v).replace(":", "_") if out is not None else None
        agg = TR.train(vcfg, train_set, test_set, sub)["aggregate"]
        anchor, target = v.label
        row = {"anchor": anchor, "target": target, "variant": str(v),
               "default": v == O.DEFAULT_VARIANT}
        for key in ("S_p", "S_e", "Score"):
            row[key] = agg["4-class"][key]["mean"]
            row[key + "_std"] = agg["4-class"][key]["std"]
        rows.append(row)
    return rows


def cmd_ablate(args) -> str:
    out = _out(args)
    fs = _load_features(args)
    cfg = _fit_devices(_train_config(args), fs)
    if args.variants == "all":
        variants = O.VARIANTS
    else:
        variants = [O.Variant.parse(v) for v in args.variants.split(",")]
    rows = ablation_table(cfg, fs.subset("train"), fs.subset("test"), variants, out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    lines = ["anchor\ttarget\tS_p\tS_e\tScore"]
    for r in rows:
        mark = "*" if r["default"] else ""
        lines.append(f"{r['anchor']}\t{r['target']}{mark}\t{r['S_p']:.2f}±{r['S_p_std']:.2f}\t"
                     f"{r['S_e']:.2f}±{r['S_e_std']:.2f}\t{r['Score']:.2f}±{r['Score_std']:.2f}")
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    return f"ablate: {len(rows)} variants -> {out / 'ablation.tsv'}"


# --- parser -----------------------------------------------------------------------


def _add_data(p, features=True):
    p.add_argument("--manifest", required=True, help="corpus manifest (TSV)")
    if features:
        p.add_argument("--features", help="directory of .fbnk files; featurize on the fly if omitted")


def _add_train(p):
    p.add_argument("--config", help="TrainConfig JSON; flags override it")
    p.add_argument("--method", choices=TR.METHODS)
    p.add_argument("--variant", help="<anchor>:<target>[:sgd], e.g. h:h:sgd")
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda-start", type=float)
    p.add_argument("--lambda-end", type=float)
    p.add_argument("--lambda-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="source samples per batch (two views each)")
    p.add_argument("--lr", type=float)
    p.add_argument("--seeds", type=int, help="run N seeds starting at --seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgscl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)
        return p

    p = command("synth", cmd_synth, "write a biased synthetic corpus")
    p.add_argument("--devices", type=int, default=2)
    p.add_argument("--n-train", type=int, default=800)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--correlation", type=float, default=0.8)
    p.add_argument("--icbhi-like", action="store_true", help="4 devices, one absent from test")

    p = command("ingest-icbhi", cmd_ingest, "build a cycle manifest from an ICBHI directory")
    p.add_argument("--root", required=True)
    p.add_argument("--split-file", required=True)

    p = command("featurize", cmd_featurize, "compute Fbank features for a manifest")
    _add_data(p, features=False)

    p = command("train", cmd_train, "train one method over one or more seeds")
    _add_data(p)
    _add_train(p)
    p.add_argument("--eval-every", type=int, default=0, help="evaluate every N epochs (0: never)")

    for name, fn, help_ in (("evaluate", cmd_evaluate, "ICBHI metrics of a checkpoint"),
                            ("probe", cmd_probe, "linear device probe on frozen embeddings"),
                            ("export-embeddings", cmd_export, "CSV of extractor embeddings")):
        p = command(name, fn, help_)
        p.add_argument("--checkpoint", required=True)
        _add_data(p)
        if name == "evaluate":
            p.add_argument("--split", default="test")
        if name == "probe":
            p.add_argument("--steps", type=int, default=500)
            p.add_argument("--probe-lr", type=float, default=0.1)

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of every loss", out_required=False)
    p.add_argument("--batches", type=int, default=20)

    p = command("ablate", cmd_ablate, "train the six anchor/target variants")
    _add_data(p)
    _add_train(p)
    p.add_argument("--variants", default="all", help="'all' or comma-separated variants")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.fn(args)
    except MissingInput as exc:
        print(f"sgscl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"sgscl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("sgscl").exception("internal failure")
        print(f"sgscl: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    line, code = result if isinstance(result, tuple) else (result, EXIT_OK)
    print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
