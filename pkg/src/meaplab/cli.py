"""Command-line driver.

Commands: pretrain, finetune, eval, analyze, ablate, gendata, rerun. Every
run command merges an optional JSON config file with its flags, writes the
merged snapshot into manifest.json in the output directory, and produces
byte-identical metrics/grids/reports when re-invoked with the same flags,
seed, and inputs (manifests carry wall-clock timestamps and are exempt).

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis
from . import autodiff as ad
from . import data as datamod
from .corruption import EOS, FIRST_ORDINARY, MASK, select_mask_positions
from .errors import ConfigError, MeapError, UsageError
from .model import ModelConfig, PRESETS, forward, greedy_decode
from .rng import SplitMix64, mix_seed
from .training import TrainRunConfig, load_checkpoint, train


# ---------------------------------------------------------------------------
# config plumbing


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    cfg = json.loads(p.read_text(encoding="utf-8"))
    if "command" in cfg and "config" in cfg:
        cfg = cfg["config"]  # accept a manifest as a config source
    return cfg


def _resolve_model(mcfg: dict) -> ModelConfig:
    mcfg = dict(mcfg or {})
    preset = mcfg.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        base = asdict(PRESETS[preset])
        base.update(mcfg)
        return ModelConfig(**base)
    if not mcfg:
        return PRESETS["smoke"]
    return ModelConfig(**mcfg)


def _merge_train(cfg: dict, overrides: dict) -> dict:
    merged = dict(cfg.get("train", {}))
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                    started: str, outputs: list[str]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _parse_list(text: str, kind) -> list:
    try:
        return [kind(x) for x in text.split(",") if x != ""]
    except ValueError as e:
        raise UsageError(f"cannot parse list {text!r}: {e}") from e


def _decoder(model_cfg: ModelConfig, params):
    def decode(prompt: np.ndarray, budget: int) -> np.ndarray:
        return greedy_decode(model_cfg, params, prompt, budget, stop_id=EOS)
    return decode


# ---------------------------------------------------------------------------
# pretrain / finetune


def _run_pretrain(config: dict, out_dir: Path) -> list[str]:
    model = _resolve_model(config.get("model", {}))
    run = TrainRunConfig(**config.get("train", {}))
    corpus = datamod.read_corpus(config["corpus"])
    result = train(run, model, corpus, out_dir=out_dir)
    return [str(result.metrics_path), str(result.checkpoint_path)]


def cmd_pretrain(args) -> int:
    cfg = _load_config_file(args.config)
    objective = args.objective or cfg.get("train", {}).get("objective")
    if objective == "meap":
        objective = "meap-pretrain"
    if objective is None:
        objective = "meap-pretrain"
    if objective == "ntp" and args.mask_ratio is not None:
        raise UsageError("--mask-ratio is meaningless with --objective ntp")
    if objective not in ("ntp", "meap-pretrain"):
        raise UsageError(f"pretrain objective must be ntp or meap, got {objective!r}")

    cfg["train"] = _merge_train(cfg, {
        "objective": objective, "mask_ratio": args.mask_ratio,
        "strategy": args.strategy, "seed": args.seed, "steps": args.steps,
        "batch_size": args.batch_size, "seq_len": args.seq_len,
    })
    if args.preset:
        cfg["model"] = {"preset": args.preset}
    if args.corpus:
        cfg["corpus"] = args.corpus
    if "corpus" not in cfg:
        raise UsageError("no corpus given (flag --corpus or config key 'corpus')")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    outputs = _run_pretrain(cfg, out_dir)
    _write_manifest(out_dir, "pretrain", cfg, cfg["train"].get("seed", 0),
                    started, outputs)
    return 0


def _run_finetune(config: dict, out_dir: Path) -> list[str]:
    model, params, _, _ = load_checkpoint(config["ckpt"])
    run = TrainRunConfig(**config.get("train", {}))
    corpus = datamod.read_corpus(config["corpus"])
    if corpus.vocab_size > model.vocab_size:
        raise ConfigError(
            f"corpus vocab {corpus.vocab_size} exceeds checkpoint vocab {model.vocab_size}")
    result = train(run, model, corpus, params=params, out_dir=out_dir)

    pairs = len(corpus.sequences) // 2
    duplicated = sum(
        1 for i in range(pairs)
        if corpus.sequences[2 * i + 1].shape[0] > run.answer_gate)
    stats = {
        "pairs": pairs,
        "duplicated": duplicated,
        "duplication_rate": duplicated / pairs if pairs else 0.0,
        "loss_scope": run.loss_scope,
        "mask_ratio": run.mask_ratio,
    }
    stats_path = out_dir / "finetune_stats.json"
    stats_path.write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
    return [str(result.metrics_path), str(result.checkpoint_path), str(stats_path)]


def cmd_finetune(args) -> int:
    cfg = _load_config_file(args.config)
    scope = args.loss_scope.replace("-", "_") if args.loss_scope else None
    cfg["train"] = _merge_train(cfg, {
        "objective": "meap-finetune", "mask_ratio": args.mask_ratio,
        "loss_scope": scope, "seed": args.seed, "steps": args.steps,
        "batch_size": args.batch_size, "seq_len": args.seq_len,
    })
    if args.corpus:
        cfg["corpus"] = args.corpus
    if args.ckpt:
        cfg["ckpt"] = args.ckpt
    for key in ("corpus", "ckpt"):
        if key not in cfg:
            raise UsageError(f"finetune needs {key} (flag --{key} or config key)")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    outputs = _run_finetune(cfg, out_dir)
    _write_manifest(out_dir, "finetune", cfg, cfg["train"].get("seed", 0),
                    started, outputs)
    return 0


# ---------------------------------------------------------------------------
# eval


def _run_eval(config: dict, out_dir: Path) -> list[str]:
    model, params, _, _ = load_checkpoint(config["ckpt"])
    decode = _decoder(model, params)
    kind = config["kind"]
    seed = config["seed"]
    samples = config["samples"]
    if samples < 1:
        raise UsageError("--samples must be at least 1")
    if kind == "needle":
        lengths = config["lengths"]
        depths = config["depths"]
        if not lengths or not depths:
            raise UsageError("needle eval needs nonempty --lengths and --depths")
        grid = analysis.needle_grid(decode, model.max_context, lengths, depths,
                                    samples, seed)
        name = "needle"
    else:
        positions = config["positions"]
        if not positions:
            raise UsageError("multidoc eval needs nonempty --positions")
        grid = analysis.multidoc_grid(decode, model.max_context, config["k"],
                                      positions, samples, seed)
        name = "multidoc"
    if (grid.samples == 0).any():
        raise UsageError("grid has cells with zero samples (context overflow?)")
    written = analysis.emit_report(out_dir, grids={name: grid})
    return [str(p) for p in written]


def cmd_eval(args) -> int:
    cfg: dict = {
        "kind": args.kind,
        "ckpt": args.ckpt,
        "seed": args.seed,
        "samples": args.samples,
    }
    if args.kind == "needle":
        if not args.lengths or not args.depths:
            raise UsageError("eval needle needs --lengths and --depths")
        cfg["lengths"] = _parse_list(args.lengths, int)
        cfg["depths"] = _parse_list(args.depths, float)
    else:
        if not args.positions:
            raise UsageError("eval multidoc needs --positions")
        cfg["k"] = args.k
        cfg["positions"] = _parse_list(args.positions, int)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    outputs = _run_eval(cfg, out_dir)
    _write_manifest(out_dir, "eval", cfg, args.seed, started, outputs)
    return 0


# ---------------------------------------------------------------------------
# analyze


def _run_analyze(config: dict, out_dir: Path) -> list[str]:
    model_n, params_n, _, _ = load_checkpoint(config["ckpt_ntp"])
    model_m, params_m, _, _ = load_checkpoint(config["ckpt_meap"])
    if model_n.vocab_size != model_m.vocab_size:
        raise ConfigError(
            f"checkpoints disagree on vocab: {model_n.vocab_size} vs {model_m.vocab_size}")
    length = config["length"]
    if length > min(model_n.max_context, model_m.max_context):
        raise ConfigError(f"analysis length {length} exceeds a model context")

    corpus = datamod.gen_mixed_corpus(config["samples"], length,
                                      mix_seed(config["seed"], 0xA11A),
                                      max_facts=1 if length < 64 else 3)
    agg = config["aggregation"]

    def capture(model_cfg, params):
        def run(ids):
            with ad.no_grad():
                _, rec = forward(model_cfg, params, ids, capture_attention=True)
            return rec
        return run

    stats: dict[str, analysis.AttentionStats] = {}
    if config["pairing"] == "same":
        for name, mc, ps in (("ntp", model_n, params_n),
                             ("meap", model_m, params_m)):
            decays, var_incs = analysis.pair_metrics(
                capture(mc, ps), corpus.sequences, config["mask_ratio"],
                config["seed"], agg)
            stats[name] = analysis.summarize_pairs(decays, var_incs, agg)
    else:  # cross: original through the ntp model, masked through the meap model
        fn_n, fn_m = capture(model_n, params_n), capture(model_m, params_m)
        decays, var_incs = [], []
        for idx, seq in enumerate(corpus.sequences):
            eligible = seq >= FIRST_ORDINARY
            plan = select_mask_positions(
                seq.shape[0], eligible, "random", config["mask_ratio"],
                mix_seed(config["seed"], idx))
            if plan.positions.size == 0:
                continue
            masked = seq.copy()
            masked[plan.positions] = MASK
            pair = analysis.AttentionSamplePair(
                record_orig=fn_n(seq), record_masked=fn_m(masked),
                mask_positions=plan.positions)
            decays.append(analysis.score_decay(pair, agg))
            var_incs.append(analysis.variance_increase(pair, agg))
        stats["cross"] = analysis.summarize_pairs(decays, var_incs, agg)

    extras = {
        "length": length, "mask_ratio": config["mask_ratio"],
        "pairing": config["pairing"], "samples": config["samples"],
    }
    if "ntp" in stats and "meap" in stats:
        extras["meap_minus_ntp"] = {
            "score_decay": stats["meap"].score_decay - stats["ntp"].score_decay,
            "variance_increase": (stats["meap"].variance_increase
                                  - stats["ntp"].variance_increase),
        }
    written = analysis.emit_report(out_dir, attention=stats, extras=extras)
    return [str(p) for p in written]


def cmd_analyze(args) -> int:
    cfg = {
        "ckpt_ntp": args.ckpt_ntp,
        "ckpt_meap": args.ckpt_meap,
        "samples": args.samples,
        "length": args.length,
        "mask_ratio": args.mask_ratio,
        "seed": args.seed,
        "aggregation": args.aggregation,
        "pairing": args.pairing,
    }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    outputs = _run_analyze(cfg, out_dir)
    _write_manifest(out_dir, "analyze", cfg, args.seed, started, outputs)
    return 0


# ---------------------------------------------------------------------------
# ablate


def _run_ablate(config: dict, out_dir: Path) -> list[str]:
    settings = config["settings"]
    rows = []
    for setting in settings:
        tag = setting.replace(":", "-").replace(".", "p")
        sub = out_dir / f"run-{tag}"
        train_cfg = dict(config["train"])
        if config["kind"] == "mask-ratio":
            train_cfg["objective"] = "meap-pretrain"
            train_cfg["mask_ratio"] = float(setting)
        else:
            train_cfg["objective"] = "meap-pretrain"
            train_cfg["strategy"] = setting
        child = {"model": config.get("model", {}), "train": train_cfg,
                 "corpus": config["corpus"]}
        try:
            _run_pretrain(child, sub)
            model, params, _, _ = load_checkpoint(sub / "checkpoint.bin")
            decode = _decoder(model, params)
            grid = analysis.needle_grid(
                decode, model.max_context, config["eval_lengths"],
                config["eval_depths"], config["eval_samples"], config["seed"])
            metrics = json.loads(
                (sub / "metrics.jsonl").read_text().strip().splitlines()[-1])
            rows.append({
                "setting": setting, "status": "ok",
                "final_loss": metrics["loss"],
                "needle_mean_accuracy": float(grid.accuracy().mean()),
            })
        except MeapError as e:
            rows.append({"setting": setting, "status": "error",
                         "final_loss": "", "needle_mean_accuracy": "",
                         "error": str(e)})
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("setting,status,final_loss,needle_mean_accuracy,error\n")
        for r in rows:
            f.write(f"{r['setting']},{r['status']},{r['final_loss']},"
                    f"{r['needle_mean_accuracy']},{r.get('error', '')}\n")
    return [str(csv_path)]


def cmd_ablate(args) -> int:
    cfg = _load_config_file(args.config)
    if args.kind == "mask-ratio":
        if not args.ratios:
            raise UsageError("ablate mask-ratio needs --ratios")
        settings = [str(x) for x in _parse_list(args.ratios, float)]
    else:
        if not args.strategies:
            raise UsageError("ablate strategy needs --strategies")
        settings = args.strategies.split(",")
    merged = {
        "kind": args.kind,
        "settings": settings,
        "model": cfg.get("model", {"preset": args.preset or "smoke"}),
        "train": _merge_train(cfg, {
            "seed": args.seed, "steps": args.steps,
            "batch_size": args.batch_size, "seq_len": args.seq_len,
        }),
        "corpus": args.corpus or cfg.get("corpus"),
        "seed": args.seed if args.seed is not None else 0,
        "eval_lengths": _parse_list(args.eval_lengths, int),
        "eval_depths": _parse_list(args.eval_depths, float),
        "eval_samples": args.eval_samples,
    }
    if args.preset:
        merged["model"] = {"preset": args.preset}
    if not merged["corpus"]:
        raise UsageError("ablate needs a corpus")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    outputs = _run_ablate(merged, out_dir)
    _write_manifest(out_dir, "ablate", merged, merged["seed"], started, outputs)
    return 0


# ---------------------------------------------------------------------------
# gendata


def cmd_gendata(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"output {out} exists; pass --force to overwrite")
    seed = args.seed
    if args.kind == "mixed":
        corpus = datamod.gen_mixed_corpus(args.samples, args.seq_len, seed,
                                          filler_fraction=args.filler_fraction)
    elif args.kind == "needle":
        sequences = []
        for i in range(args.samples):
            child = mix_seed(seed, i)
            rng = SplitMix64(child)
            key, value = datamod.random_fact(rng)
            depth = rng.next_below(1001) / 1000.0
            task = datamod.NeedleTask(context_length=args.context_length,
                                      depth_fraction=depth, key=key, value=value)
            prompt, gold = datamod.gen_needle(task, mix_seed(child, 1))
            if datamod.count_token_run(prompt, gold) != 1:
                raise ConfigError("needle uniqueness scan failed")
            seq = np.concatenate([prompt, gold,
                                  np.array([EOS], dtype=np.int64)])
            sequences.append(seq)
        corpus = datamod.Corpus(datamod.BYTE_VOCAB.size, sequences,
                                note=f"needle corpus seed={seed}")
    elif args.kind == "multidoc":
        sequences = []
        for i in range(args.samples):
            child = mix_seed(seed, 5, i)
            rng = SplitMix64(child)
            gold_pos = 1 + rng.next_below(args.k)
            task = datamod.make_multidoc_task(args.k, gold_pos, rng)
            prompt, gold = datamod.gen_multidoc(task, mix_seed(child, 1))
            sequences.append(np.concatenate([prompt, gold,
                                             np.array([EOS], dtype=np.int64)]))
        corpus = datamod.Corpus(datamod.BYTE_VOCAB.size, sequences,
                                note=f"multidoc corpus seed={seed}")
    elif args.kind == "qa":
        corpus = datamod.make_qa_corpus(args.samples, args.prompt_len,
                                        args.answer_len, seed)
    else:  # bytes
        if not args.input:
            raise UsageError("gendata bytes needs --input")
        raw = Path(args.input).read_bytes()
        chunk = args.seq_len - 2
        sequences = [datamod.tokenize_bytes(raw[i:i + chunk])
                     for i in range(0, max(len(raw), 1), chunk)]
        corpus = datamod.Corpus(datamod.BYTE_VOCAB.size, sequences,
                                note=f"bytes from {args.input}")
    datamod.write_corpus(out, corpus)
    print(f"wrote {len(corpus.sequences)} sequences to {out}")
    return 0


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    command = manifest["command"]
    config = manifest["config"]
    out_dir = Path(args.out) if args.out else Path(args.manifest).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    runner = {
        "pretrain": _run_pretrain,
        "finetune": _run_finetune,
        "eval": _run_eval,
        "analyze": _run_analyze,
        "ablate": _run_ablate,
    }.get(command)
    if runner is None:
        raise UsageError(f"manifest command {command!r} cannot be re-run")
    outputs = runner(config, out_dir)
    _write_manifest(out_dir, command, config, manifest.get("seed", 0),
                    started, outputs)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meaplab",
        description="desk-scale masked next-token prediction lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--corpus", help="token corpus path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--seq-len", type=int, default=None)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("pretrain", help="train a model from scratch")
    add_train_flags(p)
    p.add_argument("--objective", choices=["ntp", "meap"])
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--strategy", default=None, help="random or span:K")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="duplicate-and-mask fine-tuning")
    add_train_flags(p)
    p.add_argument("--ckpt", help="checkpoint to start from")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--loss-scope", choices=["union", "masked-only"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="retrieval evaluation grids")
    p.add_argument("kind", choices=["needle", "multidoc"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lengths", help="comma list of context lengths")
    p.add_argument("--depths", help="comma list of depth fractions")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--positions", help="comma list of gold positions")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="attention-distribution analysis")
    p.add_argument("kind", choices=["attention"])
    p.add_argument("--ckpt-ntp", required=True)
    p.add_argument("--ckpt-meap", required=True)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--mask-ratio", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregation", choices=list(analysis.AGGREGATIONS),
                   default="all")
    p.add_argument("--pairing", choices=["same", "cross"], default="same")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="sweep mask ratios or strategies")
    p.add_argument("kind", choices=["mask-ratio", "strategy"])
    p.add_argument("--ratios", help="comma list, e.g. 0.05,0.10,0.15,0.20")
    p.add_argument("--strategies", help="comma list, e.g. random,span:5,span:50")
    add_train_flags(p)
    p.add_argument("--eval-lengths", default="96")
    p.add_argument("--eval-depths", default="0.25,0.5,0.75")
    p.add_argument("--eval-samples", type=int, default=4)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gendata", help="write synthetic corpora")
    p.add_argument("kind", choices=["mixed", "needle", "multidoc", "qa", "bytes"])
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--context-length", type=int, default=96)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--answer-len", type=int, default=16)
    p.add_argument("--filler-fraction", type=float, default=0.10)
    p.add_argument("--input", help="raw byte file (bytes mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except MeapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
