"""Command-line entry point: gen-data, train, eval, ablate, grad-check.

All modelling choices live in the JSON config; flags only pick the command,
the config, input locations and the output directory. Every command writes
the fully resolved config next to its outputs.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, dataio
from .config import PRESETS, RunConfig
from .data_org import generate_synthetic, organize
from .experiments import new_state, run_ablation, sample_count_study
from .gradcheck import run_grad_checks, summarize
from .retrieval_eval import build_judgments, evaluate
from .training import TrainingSet, run_curriculum, split_medium

log = logging.getLogger("mmretrieval")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def load_config(spec: str | None) -> RunConfig:
    """A JSON path, or ``preset:<name>`` for a built-in configuration."""
    if spec is None:
        return RunConfig()
    if spec.startswith("preset:"):
        name = spec.split(":", 1)[1]
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name]()
    return RunConfig.load(spec)


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    return out


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args, cfg)
    data = generate_synthetic(cfg.synthetic)
    _, report = organize(data.samples, data.clicks, cfg.organization)
    dataio.write_samples(out / dataio.SAMPLES, data.samples)
    dataio.write_samples(out / dataio.TEST_QUERIES, data.test_queries)
    dataio.write_clicks(out / dataio.CLICKS, data.clicks)
    dataio.write_truth(out / dataio.TRUTH, data.truth)
    docs = [s for s in data.samples if s.kind == "doc"]
    dataio.write_judgments(out / dataio.JUDGMENTS, build_judgments(data.test_queries, docs, data.truth))
    _write_json(out / dataio.ORG_REPORT, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _phase_ckpt(out: Path, i: int, name: str) -> Path:
    return out / "checkpoints" / f"phase{i}_{name}.ckpt"


def _resume_point(out: Path, cfg: RunConfig, digest: str):
    """Latest phase checkpoint written by a run of this same config, if any."""
    for i in reversed(range(len(cfg.plan))):
        path = _phase_ckpt(out, i, cfg.plan[i].name)
        if path.exists():
            state, meta = checkpoint.load(path, expect_dims=cfg.model)
            if meta.get("config_digest") == digest:
                return state, i + 1
    return None, 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    samples = dataio.read_samples(data_dir / dataio.SAMPLES)
    if any(s.category < 0 for s in samples):
        raise ValueError("samples have no category assignment; run gen-data first")
    out = _prepare_out(args, cfg)
    (out / "checkpoints").mkdir(exist_ok=True)
    seed = cfg.seeds[0]
    digest = config_digest(cfg)
    state, start = _resume_point(out, cfg, digest)
    if state is None:
        state = new_state(cfg, seed)
        checkpoint.save(out / "checkpoints" / "init.ckpt", state, {"config_digest": digest, "phase": -1})
    else:
        log.info("resuming after phase %d", start - 1)

    snapshot = None
    test_path, judg_path = data_dir / dataio.TEST_QUERIES, data_dir / dataio.JUDGMENTS
    if test_path.exists() and judg_path.exists():
        queries = dataio.read_samples(test_path)
        judgments = dataio.read_judgments(judg_path)
        docs = [s for s in samples if s.kind == "doc"]

        def snapshot(st):
            return evaluate(st.model, queries, docs, judgments).to_dict()

    log_path = out / "train_log.jsonl"
    if start == 0:
        log_path.write_text("")

    def on_phase_end(st, i):
        with open(log_path, "a") as fh:
            for row in st.log:
                fh.write(json.dumps(row) + "\n")
        st.log.clear()
        checkpoint.save(_phase_ckpt(out, i, cfg.plan[i].name), st, {"config_digest": digest, "phase": i})

    datasets = {"medium": TrainingSet(split_medium(samples, cfg.train.medium_fraction, seed)),
                "large": TrainingSet(samples)}
    state, report = run_curriculum(state, cfg.plan, datasets, cfg.train, start_phase=start, snapshot=snapshot,
                                   on_phase_end=on_phase_end)
    checkpoint.save(out / "final.ckpt", state, {"config_digest": digest, "phase": len(cfg.plan) - 1})
    summary = {"seed": seed, "resumed_from_phase": start, "param_hash": state.param_hash(),
               "phases": [{"phase": p["phase"], "iterations": len(p["losses"]),
                           "final_loss": p["losses"][-1] if p["losses"] else None,
                           **({"metrics": p["metrics"]} if "metrics" in p else {})} for p in report["phases"]]}
    _write_json(out / "train_report.json", summary)
    print(json.dumps({"param_hash": summary["param_hash"], "phases": len(summary["phases"])}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    state, _ = checkpoint.load(args.checkpoint, expect_dims=cfg.model)
    samples = dataio.read_samples(data_dir / dataio.SAMPLES)
    queries = dataio.read_samples(Path(args.queries) if args.queries else data_dir / dataio.TEST_QUERIES)
    judgments = dataio.read_judgments(Path(args.judgments) if args.judgments else data_dir / dataio.JUDGMENTS)
    if not queries:
        raise ValueError("no queries to evaluate")
    missing = [q.id for q in queries if q.id not in judgments]
    if missing:
        raise KeyError(f"no judgments for queries {missing[:5]}")
    out = _prepare_out(args, cfg)
    docs = [s for s in samples if s.kind == "doc"]
    report = evaluate(state.model, queries, docs, judgments)
    _write_json(out / "metrics.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args, cfg)
    result = {}
    if cfg.variants:
        result["fusion_variants"] = run_ablation(cfg)
    if cfg.sample_caps:
        result["samples_per_category"] = {str(k): v for k, v in sample_count_study(cfg).items()}
    _write_json(out / "ablation.json", result)
    for name, v in result.get("fusion_variants", {}).items():
        print(f"{name:>12}  identical@1 {v['mean']['identical_at_1']:.4f}")
    for cap, v in result.get("samples_per_category", {}).items():
        print(f"{'cap ' + cap:>12}  identical@1 {v['mean']['identical_at_1']:.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    results = run_grad_checks(seeds=cfg.seeds)
    summary = summarize(results)
    if args.out:
        out = _prepare_out(args, cfg)
        _write_json(out / "gradcheck.json", {"summary": summary, "checks": [r.as_dict() for r in results]})
    for key, v in summary.items():
        print(f"{'PASS' if v['passed'] else 'FAIL'}  {key:<40} max rel err {v['max_rel_err']:.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmretrieval", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_required=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config path or preset:<name> (default: built-in defaults)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate and organize a synthetic corpus")
    sp = add("train", cmd_train, "run the curriculum; resumes from the latest phase checkpoint in --out")
    sp.add_argument("--data", required=True, help="directory written by gen-data")
    sp = add("eval", cmd_eval, "score a checkpoint on held-out queries")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--queries", help="query samples file (default: <data>/test_queries.jsonl)")
    sp.add_argument("--judgments", help="judgments file (default: <data>/judgments.jsonl)")
    add("ablate", cmd_ablate, "fusion variants and samples-per-category study")
    add("grad-check", cmd_grad_check, "finite-difference gradient checks", out_required=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
