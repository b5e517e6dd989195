"""Command-line front end: one non-interactive subcommand per workflow.

Outputs are files; every run drops a resolved-config JSON (seed included)
next to them so it can be replayed exactly. Exit codes: 0 success, 1
usage error, 2 runtime failure. With MSN_DETERMINISTIC=1 the package
pins BLAS to a single thread, so equal configs and seeds give
byte-identical artifacts.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    INSTRUCTIONS,
    LatentDataset,
    MetricsLog,
    SyntheticLatentSpec,
    config_digest,
    gen_caption,
    gen_latent_dataset,
    load_checkpoint,
    load_latents,
    load_pairs_jsonl,
    save_checkpoint,
    save_latents,
    save_pairs_jsonl,
)
from .evaluation import (
    ClampLog,
    compare_tokenizers,
    decode_split,
    frechet_distance,
    gaussian_stats,
    mean_pool_embeddings,
    reconstruction_error,
)
from .flow import OBJECTIVE_FLOW, OBJECTIVE_MSE, OtCfmConfig
from .lm import (
    FusionConfig,
    FusionLM,
    LmTrainConfig,
    Vocab,
    build_finetune_example,
    build_pretrain_example,
    extend_vocab,
    generate,
    next_token_accuracy,
    train_lm,
)
from .nn import TransformerConfig, block_gradient_checks
from .pipeline import (
    TokenizerConfig,
    TokenizerModel,
    bitrate,
    decode_tokens,
    encode_to_tokens,
    train_tokenizer,
)
from .tensor import run_gradient_suite

OP_GRAD_TOL = 1e-5
BLOCK_GRAD_TOL = 1e-4


class UsageError(Exception):
    """Bad flags or config keys; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems by default; this tool reserves 2
    # for runtime failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# config plumbing

GEN_DATA_DEFAULTS = {
    "n_classes": 4, "frames": 32, "dim": 16, "noise_std": 0.05,
    "bimodal_class": -1, "n_per_class": 16, "splits": "train,val", "seed": 0,
}

TRAIN_TOKENIZER_DEFAULTS = {
    "code_dim": 16, "codebook_size": 256,
    "encoder.n_blocks": 2, "encoder.hidden_dim": 128, "encoder.head_dim": 32,
    "decoder.n_blocks": 2, "decoder.hidden_dim": 128, "decoder.head_dim": 32,
    "flow.sigma_min": 1e-4, "flow.n_sample_steps": 32, "timestep_dim": 64,
    "lr": 1e-4, "weight_decay": 0.01, "epochs": 10, "batch_size": 16,
    "codebook_loss_weight": 1.0, "commitment_weight": 0.25, "seed": 0,
}

ENCODE_DEFAULTS = {"seed": 0}

DECODE_DEFAULTS = {"seed": 0}

TRAIN_LM_DEFAULTS = {
    "v_text": 256, "n_blocks": 4, "hidden_dim": 128, "head_dim": 32,
    "mlp_ratio": 4, "max_len": 512, "lora_rank": 8, "lora_alpha": 16.0,
    "n_audio": 256, "lr": 1e-3, "weight_decay": 0.01, "epochs": 10,
    "batch_size": 8, "z_coeff": 1e-4, "seed": 0,
    # Optional warm start (usually a pretrain checkpoint before finetune).
    # Structural keys must match the checkpoint; mismatches fail loudly.
    "checkpoint": None,
}

GENERATE_DEFAULTS = {"seed": 0}

EVAL_DEFAULTS = {"seed": 0, "n_steps": None}

COMPARE_DEFAULTS = {"seed": 0, "n_steps": None}

REPORT_DEFAULTS = {
    "tokens_per_clip": 215, "clip_seconds": 10.0, "codebook_size": 8196,
    "seed": 0,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(defaults: dict, path, overrides: list[str]) -> dict:
    """Defaults <- flat JSON file <- --set overrides, with key validation."""
    config = dict(defaults)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        config.update(loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        config[key] = _parse_value(raw)
    return config


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved(out_dir: Path, command: str, config: dict, **extras) -> None:
    payload = {"command": command, **config, **extras}
    payload["digest"] = config_digest(payload)
    _write_json(out_dir / f"{command}-config.json", payload)


# ---------------------------------------------------------------------------
# model (de)serialization helpers

def _transformer(config: dict, prefix: str, causal: bool, max_len: int) -> TransformerConfig:
    return TransformerConfig(
        n_blocks=config[f"{prefix}.n_blocks"],
        hidden_dim=config[f"{prefix}.hidden_dim"],
        head_dim=config[f"{prefix}.head_dim"],
        causal=causal, max_len=max_len)


def _tokenizer_config(config: dict, objective: str, frames: int, data_dim: int,
                      seed: int = 0) -> TokenizerConfig:
    flow = OtCfmConfig(sigma_min=config["flow.sigma_min"],
                       n_sample_steps=config["flow.n_sample_steps"],
                       objective=objective)
    return TokenizerConfig(
        frames=frames, data_dim=data_dim, code_dim=config["code_dim"],
        codebook_size=config["codebook_size"], objective=objective,
        encoder=_transformer(config, "encoder", True, frames),
        decoder=_transformer(config, "decoder", False, frames),
        flow=flow, timestep_dim=config["timestep_dim"],
        lr=config.get("lr", 1e-4), weight_decay=config.get("weight_decay", 0.01),
        epochs=config.get("epochs", 10), batch_size=config.get("batch_size", 16),
        codebook_loss_weight=config.get("codebook_loss_weight", 1.0),
        commitment_weight=config.get("commitment_weight", 0.25), seed=seed)


def _tokenizer_sidecar(cfg: TokenizerConfig) -> dict:
    """The structural half of the config: enough to rebuild the model."""
    return {
        "frames": cfg.frames, "data_dim": cfg.data_dim, "code_dim": cfg.code_dim,
        "codebook_size": cfg.codebook_size, "objective": cfg.objective,
        "encoder.n_blocks": cfg.encoder.n_blocks,
        "encoder.hidden_dim": cfg.encoder.hidden_dim,
        "encoder.head_dim": cfg.encoder.head_dim,
        "decoder.n_blocks": cfg.decoder.n_blocks,
        "decoder.hidden_dim": cfg.decoder.hidden_dim,
        "decoder.head_dim": cfg.decoder.head_dim,
        "flow.sigma_min": cfg.flow.sigma_min,
        "flow.n_sample_steps": cfg.flow.n_sample_steps,
        "timestep_dim": cfg.timestep_dim,
    }


def _read_sidecar(checkpoint_path) -> dict:
    path = Path(checkpoint_path)
    sidecar = path.with_suffix(".json")
    if not sidecar.is_file():
        raise FileNotFoundError(f"missing model config {sidecar} next to {path.name}")
    return json.loads(sidecar.read_text(encoding="utf-8"))


def _load_tokenizer(checkpoint_path) -> tuple[TokenizerModel, TokenizerConfig]:
    side = _read_sidecar(checkpoint_path)
    cfg = _tokenizer_config(side, side["objective"], side["frames"], side["data_dim"])
    model = TokenizerModel(cfg, np.random.default_rng(0))
    load_checkpoint(checkpoint_path, model)
    return model, cfg


def _lm_sidecar(cfg: FusionConfig, n_audio: int, stage: str) -> dict:
    return {
        "v_text": cfg.v_text, "n_blocks": cfg.n_blocks,
        "hidden_dim": cfg.hidden_dim, "head_dim": cfg.head_dim,
        "mlp_ratio": cfg.mlp_ratio, "max_len": cfg.max_len,
        "lora_rank": cfg.lora_rank, "lora_alpha": cfg.lora_alpha,
        "n_audio": n_audio, "stage": stage,
    }


def _load_lm(checkpoint_path) -> tuple[FusionLM, Vocab]:
    side = _read_sidecar(checkpoint_path)
    cfg = FusionConfig(
        v_text=side["v_text"], n_blocks=side["n_blocks"],
        hidden_dim=side["hidden_dim"], head_dim=side["head_dim"],
        mlp_ratio=side["mlp_ratio"], max_len=side["max_len"],
        lora_rank=side["lora_rank"], lora_alpha=side["lora_alpha"])
    model = FusionLM(cfg, np.random.default_rng(0))
    vocab = extend_vocab(model, side["n_audio"], np.random.default_rng(0))
    load_checkpoint(checkpoint_path, model)
    return model, vocab


def _segments(tokens, vocab: Vocab) -> list[dict]:
    """Split a token stream into text runs, audio spans, and stray markers."""
    segments: list[dict] = []
    text: list[int] = []
    audio: list[int] | None = None

    def flush_text():
        if text:
            segments.append({"type": "text",
                             "text": vocab.decode_text(np.array(text, dtype=np.int64))})
            text.clear()

    for tok in np.asarray(tokens).tolist():
        if audio is not None:
            if tok == vocab.eoa:
                segments.append({"type": "audio", "codes": audio})
                audio = None
            else:
                audio.append(tok - vocab.v_text)
        elif tok == vocab.soa:
            flush_text()
            audio = []
        elif tok < vocab.v_text:
            text.append(tok)
        else:
            # Unconstrained sampling can emit audio ids or eoa outside a span.
            flush_text()
            segments.append({"type": "marker", "id": tok})
    flush_text()
    if audio is not None:
        segments.append({"type": "audio", "codes": audio, "unclosed": True})
    return segments


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticLatentSpec.create(
        n_classes=config["n_classes"], frames=config["frames"], dim=config["dim"],
        noise_std=config["noise_std"], seed=config["seed"],
        bimodal_class=config["bimodal_class"])
    splits = [s for s in str(config["splits"]).split(",") if s]
    if not splits:
        raise UsageError("splits must name at least one split")
    for split in splits:
        ds = gen_latent_dataset(spec, config["n_per_class"], split=split)
        path = out / f"{split}.msnl"
        save_latents(path, ds)
        print(f"wrote {path} ({len(ds)} clips of {spec.frames}x{spec.dim})")
    _write_resolved(out, "gen-data", config)
    return 0


def cmd_train_tokenizer(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_latents(args.data)
    _, frames, data_dim = dataset.values.shape
    cfg = _tokenizer_config(config, args.objective, frames, data_dim,
                            seed=config["seed"])
    model = TokenizerModel(cfg)
    checkpoint = out / "tokenizer.msnc"
    # Sidecar goes first so even a divergence-rollback checkpoint loads.
    _write_json(checkpoint.with_suffix(".json"), _tokenizer_sidecar(cfg))
    metrics = MetricsLog()
    report = train_tokenizer(dataset, model, cfg, metrics=metrics,
                             checkpoint_path=checkpoint)
    save_checkpoint(checkpoint, model)
    metrics.write_csv(out / "metrics.csv")
    metrics.write_json(out / "metrics.json", command="train-tokenizer",
                       objective=args.objective, seed=config["seed"])
    _write_resolved(out, "train-tokenizer", config,
                    objective=args.objective, data=str(args.data))
    print(f"wrote {checkpoint}")
    print(f"trained {report.epochs_run} epochs ({report.steps_run} steps), "
          f"final loss {report.final['loss']:.6f}, "
          f"perplexity {report.final['perplexity']:.2f}")
    return 0


def cmd_encode(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _load_tokenizer(args.checkpoint)
    dataset = load_latents(args.data)
    tokens = encode_to_tokens(dataset.values, model)
    np.save(out / "tokens.npy", tokens)
    pairs = []
    for i, label in enumerate(dataset.labels.tolist()):
        rng = np.random.default_rng(np.random.SeedSequence((config["seed"], i)))
        pairs.append({"caption": gen_caption(label, rng),
                      "audio_tokens": tokens[i].tolist()})
    save_pairs_jsonl(out / "pairs.jsonl", pairs)
    _write_resolved(out, "encode", config,
                    checkpoint=str(args.checkpoint), data=str(args.data))
    print(f"wrote {out / 'tokens.npy'} ({tokens.shape[0]} clips x {tokens.shape[1]} tokens)")
    print(f"wrote {out / 'pairs.jsonl'}")
    return 0


def cmd_decode(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _load_tokenizer(args.checkpoint)
    tokens = np.load(args.tokens)
    if tokens.ndim == 1:
        tokens = tokens[np.newaxis, :]
    rng = np.random.default_rng(config["seed"])
    values = decode_tokens(tokens, model, rng=rng, n_steps=args.steps)
    decoded = LatentDataset(values=np.asarray(values, dtype=np.float32),
                            labels=np.zeros(values.shape[0], dtype=np.uint16))
    path = out / "decoded.msnl"
    save_latents(path, decoded)
    _write_resolved(out, "decode", config, checkpoint=str(args.checkpoint),
                    tokens=str(args.tokens), steps=args.steps)
    print(f"wrote {path} ({len(decoded)} clips)")
    return 0


def cmd_train_lm(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = load_pairs_jsonl(args.pairs)
    if not pairs:
        raise ValueError(f"no caption/token pairs in {args.pairs}")
    cfg = FusionConfig(
        v_text=config["v_text"], n_blocks=config["n_blocks"],
        hidden_dim=config["hidden_dim"], head_dim=config["head_dim"],
        mlp_ratio=config["mlp_ratio"], max_len=config["max_len"],
        lora_rank=config["lora_rank"], lora_alpha=config["lora_alpha"])
    model = FusionLM(cfg, np.random.default_rng(config["seed"]))
    vocab = extend_vocab(model, config["n_audio"], np.random.default_rng(config["seed"] + 1))
    if config["checkpoint"] is not None:
        load_checkpoint(Path(config["checkpoint"]), model)
    order_rng = np.random.default_rng(config["seed"] + 2)
    examples = []
    for i, pair in enumerate(pairs):
        codes = pair["audio_tokens"]
        if args.stage == "pretrain":
            examples.append(build_pretrain_example(pair["caption"], codes, vocab, order_rng))
        else:
            # Fine-tune pairs may ship their own instruction and answer;
            # caption-only pairs fall back to a rotating stock instruction.
            instruction = pair.get("instruction", INSTRUCTIONS[i % len(INSTRUCTIONS)])
            answer = pair.get("answer", pair["caption"])
            examples.append(build_finetune_example(instruction, codes, answer, vocab))
    train_cfg = LmTrainConfig(
        lr=config["lr"], weight_decay=config["weight_decay"],
        epochs=config["epochs"], batch_size=config["batch_size"],
        z_coeff=config["z_coeff"], seed=config["seed"])
    metrics = MetricsLog()
    report = train_lm(examples, model, train_cfg, metrics=metrics)
    checkpoint = out / "lm.msnc"
    save_checkpoint(checkpoint, model)
    _write_json(checkpoint.with_suffix(".json"),
                _lm_sidecar(cfg, config["n_audio"], args.stage))
    metrics.write_csv(out / "metrics.csv")
    accuracy = next_token_accuracy(model, examples)
    metrics.write_json(out / "metrics.json", command="train-lm", stage=args.stage,
                       seed=config["seed"], next_token_accuracy=accuracy)
    _write_resolved(out, "train-lm", config, stage=args.stage, pairs=str(args.pairs))
    print(f"wrote {checkpoint}")
    print(f"trained {report.epochs_run} epochs ({report.steps_run} steps), "
          f"final loss {report.step_losses[-1]:.4f}, "
          f"next-token accuracy {accuracy:.3f}")
    return 0


def cmd_generate(args, config: dict) -> int:
    model, vocab = _load_lm(args.checkpoint)
    prompt = vocab.encode_text(args.prompt)
    result = generate(model, prompt, args.max_new,
                      rng=np.random.default_rng(config["seed"]),
                      temperature=args.temperature, top_k=args.top_k,
                      constrain_audio=not args.unconstrained)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {
        "prompt": args.prompt,
        "tokens": result.tokens.tolist(),
        "generated": result.generated.tolist(),
        "segments": _segments(result.tokens, vocab),
        "unclosed_audio": bool(result.unclosed_audio),
    })
    _write_resolved(out.parent, "generate", config,
                    checkpoint=str(args.checkpoint), prompt=args.prompt,
                    max_new=args.max_new, temperature=args.temperature,
                    top_k=args.top_k)
    print(f"wrote {out} ({result.generated.size} new tokens)")
    return 0


def cmd_eval_recon(args, config: dict) -> int:
    model, _ = _load_tokenizer(args.checkpoint)
    dataset = load_latents(args.data)
    split = Path(args.data).stem
    decoded = decode_split(split, dataset, model, config["seed"], config["n_steps"])
    value = reconstruction_error(dataset.values, decoded)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"split": split, "metric": "recon_mse", "value": value,
                      "count": len(dataset), "seed": config["seed"]})
    _write_resolved(out.parent, "eval-recon", config,
                    checkpoint=str(args.checkpoint), data=str(args.data))
    print(f"recon_mse[{split}] = {value:.6f}")
    return 0


def cmd_eval_fad(args, config: dict) -> int:
    model, _ = _load_tokenizer(args.checkpoint)
    dataset = load_latents(args.data)
    split = Path(args.data).stem
    decoded = decode_split(split, dataset, model, config["seed"], config["n_steps"])
    clamp = ClampLog()
    reference = gaussian_stats(mean_pool_embeddings(dataset.values))
    candidate = gaussian_stats(mean_pool_embeddings(decoded))
    value = frechet_distance(reference, candidate, clamp_log=clamp)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"split": split, "metric": "frechet", "value": value,
                      "clamp_events": clamp.events, "count": len(dataset),
                      "seed": config["seed"]})
    _write_resolved(out.parent, "eval-fad", config,
                    checkpoint=str(args.checkpoint), data=str(args.data))
    print(f"frechet[{split}] = {value:.6f} ({clamp.events} eigenvalue clamps)")
    return 0


def cmd_compare(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_fm, _ = _load_tokenizer(args.fm)
    model_mse, _ = _load_tokenizer(args.mse)
    splits = {}
    for item in args.data:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--data expects NAME=PATH, got {item!r}")
        splits[name] = load_latents(path)
    report = compare_tokenizers(splits, model_fm, model_mse,
                                seed=config["seed"], n_steps=config["n_steps"])
    report.write_csv(out / "compare.csv")
    report.write_json(out / "compare.json", seed=config["seed"])
    _write_resolved(out, "compare", config, fm=str(args.fm), mse=str(args.mse),
                    data=list(args.data))
    for split, model_name, metric, value in report.rows:
        print(f"{metric}[{split}, {model_name}] = {value:.6f}")
    return 0


def cmd_grad_check(args, config: dict) -> int:
    all_ok = True
    for name, err in sorted(run_gradient_suite().items()):
        ok = err < OP_GRAD_TOL
        all_ok &= ok
        print(f"op    {name:<20} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    for name, err in sorted(block_gradient_checks().items()):
        ok = err < BLOCK_GRAD_TOL
        all_ok &= ok
        print(f"block {name:<20} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    if not all_ok:
        raise RuntimeError("gradient check failed")
    return 0


def cmd_report(args, config: dict) -> int:
    tokens = config["tokens_per_clip"]
    seconds = config["clip_seconds"]
    codebook = config["codebook_size"]
    bps = bitrate(tokens, seconds, codebook)
    note = (f"{tokens} tokens per {seconds:g} s clip with a {codebook}-entry "
            f"codebook is {bps:.1f} bps ({bps / 1000:.2f} kbps). This is above "
            f"the quoted headline figure of 0.23 kbps; matching that figure "
            f"would need a lower token rate or a smaller effective codebook.")
    payload = {"bitrate_bps": bps, "bitrate_kbps": bps / 1000,
               "tokens_per_clip": tokens, "clip_seconds": seconds,
               "codebook_size": codebook, "note": note}
    if args.metrics:
        payload["metrics"] = {}
        for path in args.metrics:
            payload["metrics"][Path(path).name] = json.loads(
                Path(path).read_text(encoding="utf-8"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, payload)
    _write_resolved(out.parent, "report", config)
    print(f"bitrate {bps:.1f} bps")
    print(note)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch

def build_parser() -> _Parser:
    parser = _Parser(prog="flowtok",
                     description="Latent audio tokenizer and fusion LM workflows.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, defaults, func):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE", help="flat JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=func, defaults=defaults)
        return p

    p = add("gen-data", "generate synthetic latent datasets",
            GEN_DATA_DEFAULTS, cmd_gen_data)
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("train-tokenizer", "train a tokenizer on a latent dataset",
            TRAIN_TOKENIZER_DEFAULTS, cmd_train_tokenizer)
    p.add_argument("--objective", required=True,
                   choices=[OBJECTIVE_FLOW, OBJECTIVE_MSE])
    p.add_argument("--data", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("encode", "encode latents to discrete tokens and caption pairs",
            ENCODE_DEFAULTS, cmd_encode)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("decode", "decode token files back to latents",
            DECODE_DEFAULTS, cmd_decode)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--tokens", required=True, metavar="FILE")
    p.add_argument("--steps", type=int, default=None, metavar="N",
                   help="integration steps (flow objective only)")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("train-lm", "train the fusion language model on token pairs",
            TRAIN_LM_DEFAULTS, cmd_train_lm)
    p.add_argument("--stage", required=True, choices=["pretrain", "finetune"])
    p.add_argument("--pairs", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("generate", "sample tokens from a trained fusion LM",
            GENERATE_DEFAULTS, cmd_generate)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64, metavar="N")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=None, metavar="K")
    p.add_argument("--unconstrained", action="store_true",
                   help="disable audio-span bracketing constraints")
    p.add_argument("--out", required=True, metavar="FILE")

    p = add("eval-recon", "reconstruction error of a tokenizer on a dataset",
            EVAL_DEFAULTS, cmd_eval_recon)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")

    p = add("eval-fad", "distributional distance of reconstructions",
            EVAL_DEFAULTS, cmd_eval_fad)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")

    p = add("compare", "side-by-side metrics for flow and MSE tokenizers",
            COMPARE_DEFAULTS, cmd_compare)
    p.add_argument("--fm", required=True, metavar="FILE",
                   help="flow-objective checkpoint")
    p.add_argument("--mse", required=True, metavar="FILE",
                   help="MSE-objective checkpoint")
    p.add_argument("--data", required=True, action="append", metavar="NAME=PATH",
                   help="named split (repeatable)")
    p.add_argument("--out", required=True, metavar="DIR")

    add("grad-check", "finite-difference check of every differentiable op",
        {}, cmd_grad_check)

    p = add("report", "bitrate accounting and metric aggregation",
            REPORT_DEFAULTS, cmd_report)
    p.add_argument("--metrics", action="append", metavar="FILE", default=[],
                   help="metrics JSON to embed (repeatable)")
    p.add_argument("--out", required=True, metavar="FILE")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        config = _load_config(args.defaults, args.config, args.overrides)
        return args.func(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
