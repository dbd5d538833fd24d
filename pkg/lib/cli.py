"""Command-line surface.

Every command reads one ``RunConfig`` JSON document and echoes the merged
config into its output directory as ``config.json``. Output layout of a full
``pipeline`` run::

    <out>/config.json
    <out>/corpus/                 manifest.json, vocab.json, splits
    <out>/lm/lm.ckpt
    <out>/<variant>/<mode>/       metrics.jsonl, best.ckpt, last.ckpt, model.ckpt, loss.svg
    <out>/<variant>/<mode>/decode/         nbest.txt, scores.json
    <out>/<variant>/<mode>/decode-fusion/  nbest.txt, scores.json
    <out>/<variant>/ilma/         curve.json, curve.svg (plus the training files)
    <out>/report.txt, <out>/claims.json, <out>/ilma_curves.svg

Exit codes: 0 success, 1 invariant/audit failure, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import report
import uprofiler
from corpus import AuditError, CorpusError, ManifestError, generate_corpus, load_corpus, save_corpus
from decoding import (
    DecodingError,
    ExternalLM,
    decode_utterances,
    fusion_sweep,
    lm_perplexity,
    read_nbest,
    score_sets,
    train_external_lm,
    write_nbest,
)
from losses import Mode, ObjectiveError
from models import ModelConfigError, ModelParams, Variant, VariantError
from runconfig import ConfigError, RunConfig
from training import MetricsLog, TrainConfigError, TrainingHalted, run_training

log = logging.getLogger(__name__)

TRAIN_MODES = [m.value for m in Mode if m is not Mode.ILMA]
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class InvariantError(RuntimeError):
    """A post-hoc artifact check failed."""


class ClaimFailure(RuntimeError):
    """At least one directional claim failed."""


FAILURES = (AuditError, ManifestError, TrainingHalted, InvariantError, ClaimFailure)
CONFIG_ERRORS = (ConfigError, ModelConfigError, VariantError, ObjectiveError, TrainConfigError, DecodingError, CorpusError)


###########
# Helpers #
###########
def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


def _read_json(path):
    return json.loads(Path(path).read_text())


def _corpus_dir(args, cfg):
    if getattr(args, "corpus", None):
        return Path(args.corpus)
    return Path(cfg["out_dir"]) / "corpus"


def _load_params(path):
    params, _, _ = ModelParams.load(path)
    return params


######################
# Reusable pipelines #
######################
def gen_data(cfg, out_dir):
    """Generate, audit and save the corpus. Returns ``(bundle, audit report)``."""
    bundle = generate_corpus(cfg.corpus_spec())
    audit = save_corpus(bundle, out_dir)
    return bundle, audit


def train_model(cfg, bundle, mode, variant, out_dir, resume=False):
    """Train one model from scratch in ``mode``; returns the final parameters."""
    spec = bundle.spec
    model_cfg = cfg.model_config(spec.vocab_size, spec.feature_dim, variant)
    train_cfg = cfg.train_config(mode, model_cfg.variant)
    params = ModelParams.initialize(model_cfg, cfg.init_seed(model_cfg.variant))
    params, metrics = run_training(train_cfg, bundle, params, out_dir=out_dir, resume=resume)
    _finish_training(params, metrics, out_dir)
    return params


def adapt_model(cfg, bundle, params, out_dir, kld_weight=None, resume=False):
    """ILMA fine-tuning of ``params``; verifies the frozen parameters afterwards."""
    train_cfg = cfg.train_config(Mode.ILMA, params.config.variant, kld_weight=kld_weight)
    seed = params.copy()
    adapted, metrics = run_training(train_cfg, bundle, params, out_dir=out_dir, resume=resume)
    changed = [p.name for p in adapted if p.name not in adapted.ilm_names and not np.array_equal(p.values, seed[p.name].values)]
    if changed:
        raise InvariantError(f"ILMA modified non-ILM parameters: {changed}")
    _finish_training(adapted, metrics, out_dir)
    curve = report.eval_curve(metrics.records)
    _write_json(Path(out_dir) / "curve.json", curve)
    if curve:
        report.plot_curves({params.config.variant.value: curve}, Path(out_dir) / "curve.svg")
    return adapted


def _finish_training(params, metrics, out_dir):
    out_dir = Path(out_dir)
    params.save(out_dir / "model.ckpt")
    losses = [(r["step"], r["loss_smoothed"]) for r in metrics.of_kind("step")]
    if losses:
        report.plot_curves(
            {"smoothed loss": losses}, out_dir / "loss.svg", ylabel="Loss", title="Training loss", scale=1.0
        )


def train_lm(cfg, bundle, out_dir):
    result = train_external_lm(
        [u.transcript for u in bundle.paired_train], bundle.unpaired_text, cfg.lm_config(), bundle.spec.vocab_size
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.lm.save(out_dir / "lm.ckpt")
    stats = {
        "losses": result.losses,
        "transcript_share": result.transcript_share,
        "heldout_perplexity": lm_perplexity(result.lm, bundle.heldout_text) if bundle.heldout_text else None,
    }
    _write_json(out_dir / "lm.json", stats)
    return result.lm


def decode_and_score(params, bundle, fusion, ext_lm, out_dir):
    """Decode every test set, write ``nbest.txt`` and ``scores.json``; returns the scores."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_sets = bundle.test_sets()
    utterances = [u for utts in test_sets.values() for u in utts]
    results = decode_utterances(params, utterances, fusion, ext_lm if fusion.fused else None)
    write_nbest(out_dir / "nbest.txt", results, bundle.vocab)
    return score(results, test_sets, out_dir)


def score(results, test_sets, out_dir):
    missing = [u.uid for utts in test_sets.values() for u in utts if u.uid not in results]
    if missing:
        raise InvariantError(f"{len(missing)} utterance(s) have no hypothesis, e.g. {missing[:3]}")
    scores = {name: asdict(r) for name, r in score_sets(results, test_sets).items()}
    for name, s in scores.items():
        s["rate"] = float(s["rate"])
    _write_json(Path(out_dir) / "scores.json", scores)
    return scores


def collect_runs(runs_dir):
    """Scores, adaptation curves and final ILM perplexities found under ``runs_dir``."""
    runs_dir = Path(runs_dir)
    scores, curves, perplexities = {}, {}, {}
    for variant in Variant:
        for run in sorted((runs_dir / variant.value).glob("*")):
            label = f"{variant.value}/{run.name}"
            if (run / "decode" / "scores.json").exists():
                scores[label] = _read_json(run / "decode" / "scores.json")
            if (run / "decode-fusion" / "scores.json").exists():
                scores[f"{label}+fusion"] = _read_json(run / "decode-fusion" / "scores.json")
            if (run / "metrics.jsonl").exists():
                records = MetricsLog.read(run / "metrics.jsonl").records
                ppl = report.eval_curve(records, key="ilm_ppl")
                if ppl:
                    perplexities[label] = ppl[-1][1]
                if run.name == Mode.ILMA.value:
                    curves[label] = report.eval_curve(records)
    return scores, curves, perplexities


def build_report(runs_dir):
    """Write ``report.txt``, ``claims.json`` and the adaptation plot; returns the claims."""
    runs_dir = Path(runs_dir)
    scores, curves, perplexities = collect_runs(runs_dir)
    claims = report.check_claims(scores, curves, perplexities)
    lines = [report.wer_table(scores) if scores else "(no scored runs)", ""]
    if perplexities:
        lines += ["ILM perplexity (held-out text)"] + [f"  {k:<24} {v:10.3f}" for k, v in perplexities.items()] + [""]
    lines += [c.format() for c in claims]
    text = "\n".join(lines) + "\n"
    (runs_dir / "report.txt").write_text(text)
    _write_json(runs_dir / "claims.json", [asdict(c) for c in claims])
    if curves:
        report.plot_curves(curves, runs_dir / "ilma_curves.svg")
    print(text, end="")
    return claims


############
# Commands #
############
def cmd_gen_data(args, cfg):
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "corpus"
    cfg.save(out / "config.json")
    _, audit = gen_data(cfg, out)
    print(audit.format())
    return 0


def cmd_train(args, cfg):
    bundle = load_corpus(_corpus_dir(args, cfg))
    variant = args.variant or cfg["model"]["variant"]
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / variant / args.mode
    cfg.save(out / "config.json")
    train_model(cfg, bundle, args.mode, variant, out, resume=args.resume)
    return 0


def cmd_adapt(args, cfg):
    bundle = load_corpus(_corpus_dir(args, cfg))
    params = _load_params(args.checkpoint)
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / params.config.variant.value / Mode.ILMA.value
    cfg.save(out / "config.json")
    adapt_model(cfg, bundle, params, out, kld_weight=args.kld_weight, resume=args.resume)
    return 0


def cmd_train_lm(args, cfg):
    bundle = load_corpus(_corpus_dir(args, cfg))
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "lm"
    cfg.save(out / "config.json")
    train_lm(cfg, bundle, out)
    return 0


def _fusion_and_lm(args, cfg):
    fusion = cfg.fusion_config(args.lambda_lm, args.lambda_ilm, args.beam)
    ext_lm = None
    if fusion.fused:
        if not args.lm:
            raise ConfigError("fusion requires --lm")
        ext_lm = ExternalLM.load(args.lm)
    return fusion, ext_lm


def cmd_decode(args, cfg):
    fusion, ext_lm = _fusion_and_lm(args, cfg)
    bundle = load_corpus(_corpus_dir(args, cfg))
    params = _load_params(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / ("decode-fusion" if fusion.fused else "decode")
    cfg.save(out / "config.json")
    scores = decode_and_score(params, bundle, fusion, ext_lm, out)
    print(report.wer_table({Path(args.checkpoint).parent.name: scores}))
    return 0


def cmd_score(args, cfg):
    bundle = load_corpus(_corpus_dir(args, cfg))
    results = read_nbest(args.nbest, bundle.vocab)
    out = Path(args.out) if args.out else Path(args.nbest).parent
    scores = score(results, bundle.test_sets(), out)
    print(report.wer_table({Path(args.nbest).parent.name: scores}))
    return 0


def cmd_sweep(args, cfg):
    if not args.lm:
        raise ConfigError("sweep requires --lm")
    bundle = load_corpus(_corpus_dir(args, cfg))
    params = _load_params(args.checkpoint)
    ext_lm = ExternalLM.load(args.lm)
    grid_lm, grid_ilm = cfg.sweep_grid()
    fusion = cfg.fusion_config(beam_width=args.beam)
    utterances = [u for utts in bundle.test_sets().values() for u in utts[: cfg["train"]["eval_utterances"]]]
    result = fusion_sweep(params, utterances, ext_lm, grid_lm, grid_ilm, fusion.beam_width, fusion.max_symbols_per_frame)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "sweep"
    cfg.save(out / "config.json")
    _write_json(out / "sweep.json", {"best": list(result.best), "best_wer": result.best_wer, "table": result.table})
    print(f"best lambda_lm={result.best[0]} lambda_ilm={result.best[1]} WER={100 * result.best_wer:.2f}%")
    return 0


def cmd_report(args, cfg):
    runs = Path(args.runs or cfg["out_dir"])
    claims = build_report(runs)
    failed = [c.name for c in claims if not c.passed]
    if failed:
        raise ClaimFailure(f"failed claims: {failed}")
    return 0


def cmd_pipeline(args, cfg):
    """gen-data, train-lm, train every listed mode, decode, adapt, report."""
    out = Path(args.out or cfg["out_dir"])
    cfg["out_dir"] = str(out)
    cfg.save(out / "config.json")
    bundle, audit = gen_data(cfg, out / "corpus")
    log.info("Corpus audit:\n%s", audit.format())
    ext_lm = train_lm(cfg, bundle, out / "lm")

    pipe = cfg["pipeline"]
    variant = Variant(cfg["model"]["variant"])
    plain = cfg.fusion_config(0.0, 0.0)
    fused = cfg.fusion_config()
    for mode in pipe["modes"]:
        run = out / variant.value / mode
        params = train_model(cfg, bundle, mode, variant, run)
        decode_and_score(params, bundle, plain, None, run / "decode")
        if mode == pipe["fusion_mode"]:
            decode_and_score(params, bundle, fused, ext_lm, run / "decode-fusion")

    for name in pipe["ilma_variants"]:
        v = Variant(name)
        seed_params = train_model(cfg, bundle, Mode.ILMT.value, v, out / v.value / Mode.ILMT.value)
        adapted = adapt_model(cfg, bundle, seed_params, out / v.value / Mode.ILMA.value, pipe["ilma_kld_weight"])
        decode_and_score(adapted, bundle, plain, None, out / v.value / Mode.ILMA.value / "decode")

    return cmd_report(argparse.Namespace(runs=str(out)), cfg)


##########
# Parser #
##########
def build_parser():
    parser = argparse.ArgumentParser(prog="jeitlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG.")
    parser.add_argument("--profile", action="store_true", help="Print the profiler table on exit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, summary):
        p = sub.add_parser(name, help=summary)
        p.set_defaults(func=func)
        p.add_argument("--config", help="RunConfig JSON (defaults when omitted).")
        p.add_argument("--seed-override", type=int, help="Replace the top-level seed.")
        p.add_argument("--out", help="Output directory.")
        return p

    def with_corpus(p):
        p.add_argument("--corpus", help="Corpus directory (default <out_dir>/corpus).")
        return p

    def with_fusion(p):
        p.add_argument("--lm", help="External LM checkpoint.")
        p.add_argument("--lambda-lm", type=float, help="External LM weight.")
        p.add_argument("--lambda-ilm", type=float, help="ILM subtraction weight.")
        p.add_argument("--beam", type=int, help="Beam width.")
        return p

    command("gen-data", cmd_gen_data, "Generate and audit the synthetic corpus.")

    p = with_corpus(command("train", cmd_train, "Train a model in one objective mode."))
    p.add_argument("--mode", required=True, choices=TRAIN_MODES)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--resume", action="store_true", help="Continue from <out>/last.ckpt.")

    p = with_corpus(command("adapt", cmd_adapt, "ILMA fine-tuning of a trained checkpoint."))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kld-weight", type=float)
    p.add_argument("--resume", action="store_true")

    with_corpus(command("train-lm", cmd_train_lm, "Train the external LM."))

    p = with_fusion(with_corpus(command("decode", cmd_decode, "Decode and score all test sets.")))
    p.add_argument("--checkpoint", required=True)

    p = with_corpus(command("score", cmd_score, "Score an n-best file."))
    p.add_argument("--nbest", required=True)

    p = with_fusion(with_corpus(command("sweep", cmd_sweep, "Grid-search fusion weights.")))
    p.add_argument("--checkpoint", required=True)

    p = command("report", cmd_report, "Tables, plots and claim audits for a runs directory.")
    p.add_argument("--runs", help="Runs directory (default out_dir).")

    command("pipeline", cmd_pipeline, "Run every stage end to end.")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT)
    uprofiler.reset()

    try:
        cfg = RunConfig.load(args.config)
        if args.seed_override is not None:
            cfg.override_seed(args.seed_override)
        code = args.func(args, cfg)
    except FAILURES as e:
        log.error("%s: %s", type(e).__name__, e)
        print(f"error: {e}", file=sys.stderr)
        code = 1
    except CONFIG_ERRORS as e:
        log.error("%s: %s", type(e).__name__, e)
        print(f"config error: {e}", file=sys.stderr)
        code = 2

    if args.profile:
        print(uprofiler.format_results())
    return code


if __name__ == "__main__":
    sys.exit(main())
