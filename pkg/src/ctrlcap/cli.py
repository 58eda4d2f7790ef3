"""Operational surface: corpus generation, training, decoding, sorting and
evaluation as subcommands.

Every command validates its effective configuration up front, echoes it into
the output directory and writes a manifest (config hash, seed, corpus hash)
so a run can be reproduced bit-for-bit.
"""

from __future__ import annotations

import copy
import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import decode, report
from .data import (
    Corpus,
    GrammarConfig,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from .errors import (
    CheckpointError,
    ConfigError,
    CorpusError,
    CtrlcapError,
    MetricError,
    NumericError,
    UsageError,
)
from .evaluation import evaluate_sequence, evaluate_set
from .model import ModelConfig, ModelParams
from .sorter import (
    SorterConfig,
    SorterTrainConfig,
    SortNetParams,
    ordered_sequences,
    sort_region_sets,
    train_sorter,
)
from .train import TrainConfig, train

EXIT_CODES = {
    ConfigError: 2,
    CorpusError: 3,
    CheckpointError: 3,
    OSError: 3,
    NumericError: 4,
    UsageError: 5,
    MetricError: 5,
}


def _exit_code(exc) -> int:
    for klass, code in EXIT_CODES.items():
        if isinstance(exc, klass):
            return code
    return 1


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (CtrlcapError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))

    return wrapper


DEFAULT_RUN_CONFIG = {
    "seed": 0,
    "model": {"word_emb": 32, "hidden": 48, "attn": 32},
    "train": {
        "lr_xe": 5e-4, "lr_decay": 0.8, "lr_rl": 5e-5, "batch_size": 100,
        "word_weight": 0.2, "gate_weight": 0.8,
        "lambda_cider": 1.0, "lambda_nw": 2.0,
        "xe_epochs": 100, "rl_steps": 200, "rl_batch_size": 10,
        "grad_clip": 5.0, "eval_every": 10, "patience": 10, "max_len": 30,
    },
    "sorter": {
        "visual_dims": [32, 16], "textual_dim": 16, "merge_dim": 32,
        "n_max": 10, "sinkhorn_iters": 20, "temperature": 1.0,
        "lr": 5e-4, "lr_decay": 0.8, "epochs": 60, "batch_size": 16,
        "eval_every": 5, "patience": 6,
    },
}


def _merge(base: dict, extra: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_run_config(path, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = {}
        cursor = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            cursor[part] = {}
            cursor = cursor[part]
        cursor[parts[-1]] = value
        cfg = _merge(cfg, node)
    return cfg


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _config_hash(cfg: dict) -> str:
    return _sha256_bytes(json.dumps(cfg, sort_keys=True).encode())


def _corpus_hash(corpus_dir: Path) -> str:
    h = hashlib.sha256()
    for name in sorted(p.name for p in corpus_dir.glob("*.json*")):
        h.update(name.encode())
        h.update((corpus_dir / name).read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: dict, seed, corpus_dir=None):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": seed,
        "config_hash": _config_hash(cfg),
        "corpus_hash": _corpus_hash(Path(corpus_dir)) if corpus_dir else None,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def _load_split(corpus_dir, split) -> Corpus:
    path = Path(corpus_dir) / f"{split}.jsonl"
    if not path.exists():
        raise CorpusError(f"split file not found: {path}")
    return load_corpus(path)


def _find_image(corpus: Corpus, image_id: int):
    for img in corpus.images:
        if img.image_id == image_id:
            return img
    raise UsageError(f"image id {image_id} not found in this split")


@click.group()
def cli():
    """Controllable grounded captioning toolkit."""


# ----------------------------------------------------------------------- gen


@cli.command("gen")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-images", type=int, required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--order", type=click.Choice(["random", "spatial"]), default="random", show_default=True)
@click.option("--min-chunks", type=int, default=2, show_default=True)
@click.option("--max-chunks", type=int, default=4, show_default=True)
@guarded
def cmd_gen(seed, n_images, out_dir, order, min_chunks, max_chunks):
    """Generate a synthetic corpus with deterministic 80/10/10 splits."""
    grammar = GrammarConfig(order=order, chunks_per_caption=(min_chunks, max_chunks))
    corpus = generate_corpus(seed, n_images, grammar)
    n_train = int(n_images * 0.8)
    n_val = int(n_images * 0.9) - n_train
    ids = [img.image_id for img in corpus.images]
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, split_ids in splits.items():
        save_corpus(corpus.subset(split_ids), out_dir / f"{split}.jsonl")
    _write_manifest(out_dir, "gen", {"seed": seed, "n_images": n_images, "order": order,
                                     "min_chunks": min_chunks, "max_chunks": max_chunks},
                    seed, corpus_dir=out_dir)
    for split, split_ids in splits.items():
        click.echo(f"{split}: {len(split_ids)} images")


# --------------------------------------------------------------------- train


@cli.command("train")
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
@click.option("--set", "overrides", multiple=True, help="dotted config override, e.g. train.xe_epochs=50")
@click.option("--phase", type=click.Choice(["xe", "rl", "sorter"]), default="xe", show_default=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path), default=None,
              help="checkpoint to continue from (required for --phase rl)")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@guarded
def cmd_train(corpus_dir, config_path, overrides, phase, ckpt_path, out_dir):
    """Train the captioning model (xe/rl) or the sorting network."""
    cfg = load_run_config(config_path, overrides)
    train_corpus = _load_split(corpus_dir, "train")
    val_corpus = None
    if (Path(corpus_dir) / "val.jsonl").exists():
        val_corpus = _load_split(corpus_dir, "val")

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    _write_manifest(out_dir, f"train:{phase}", cfg, cfg["seed"], corpus_dir=corpus_dir)
    log_path = out_dir / "metrics.jsonl"
    log_fh = log_path.open("w", encoding="utf-8")

    def log_cb(row):
        log_fh.write(json.dumps(row) + "\n")
        log_fh.flush()

    try:
        if phase == "sorter":
            s_cfg = cfg["sorter"]
            sorter_config = SorterConfig(
                feat_dim=train_corpus.feat_dim, emb_dim=train_corpus.emb_dim,
                visual_dims=tuple(s_cfg["visual_dims"]), textual_dim=s_cfg["textual_dim"],
                merge_dim=s_cfg["merge_dim"], n_max=s_cfg["n_max"],
                sinkhorn_iters=s_cfg["sinkhorn_iters"], temperature=s_cfg["temperature"],
            )
            params = SortNetParams.load(ckpt_path) if ckpt_path else SortNetParams.init(sorter_config, cfg["seed"])
            train_cfg = SorterTrainConfig(
                seed=cfg["seed"], lr=s_cfg["lr"], lr_decay=s_cfg["lr_decay"],
                epochs=s_cfg["epochs"], batch_size=s_cfg["batch_size"],
                eval_every=s_cfg["eval_every"], patience=s_cfg["patience"],
            )
            val_seqs = ordered_sequences(val_corpus) if val_corpus and val_corpus.images else None
            params, rows = train_sorter(train_cfg, params, ordered_sequences(train_corpus),
                                        val_seqs, log_cb=log_cb)
            params.save(out_dir / "sorter.json")
            if rows:
                report.save_sorter_curves(rows, out_dir / "figures" / "training_curves.png")
            click.echo(f"sorter checkpoint: {out_dir / 'sorter.json'}")
            return

        t_cfg = dict(cfg["train"])
        train_config = TrainConfig(seed=cfg["seed"], **t_cfg)
        if phase == "xe":
            train_config.rl_steps = 0
            if ckpt_path:
                params = ModelParams.load(ckpt_path)
            else:
                model_config = ModelConfig(
                    vocab_size=len(train_corpus.vocab), feat_dim=train_corpus.feat_dim,
                    **cfg["model"],
                )
                params = ModelParams.init(model_config, cfg["seed"])
        else:  # rl
            if not ckpt_path:
                raise ConfigError("--phase rl requires --ckpt with an XE-pretrained model")
            params = ModelParams.load(ckpt_path)
            train_config.xe_epochs = 0
        params, rows = train(train_config, params, train_corpus, val_corpus, log_cb=log_cb)
        params.save(out_dir / "checkpoint.json")
        if rows:
            report.save_training_curves(rows, out_dir / "figures" / "training_curves.png")
        click.echo(f"checkpoint: {out_dir / 'checkpoint.json'}")
    finally:
        log_fh.close()


# ---------------------------------------------------------------------- eval


@cli.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--mode", type=click.Choice(["sequence", "set"]), default="sequence", show_default=True)
@click.option("--sorter-ckpt", "sorter_path", type=click.Path(path_type=Path), default=None)
@click.option("--scramble-seed", type=int, default=0, show_default=True)
@click.option("--max-len", type=int, default=30, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@guarded
def cmd_eval(ckpt_path, corpus_dir, split, mode, sorter_path, scramble_seed, max_len, out_dir):
    """Evaluate a checkpoint: sequence-controlled or set-controlled protocol."""
    corpus = _load_split(corpus_dir, split)
    params = ModelParams.load(ckpt_path)
    if mode == "sequence":
        rep = evaluate_sequence(params, corpus, max_len=max_len)
    else:
        if not sorter_path:
            raise ConfigError("--mode set requires --sorter-ckpt")
        sorter_params = SortNetParams.load(sorter_path)
        rep = evaluate_set(params, sorter_params, corpus, scramble_seed=scramble_seed, max_len=max_len)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, f"eval:{mode}", {"split": split, "mode": mode,
                                              "scramble_seed": scramble_seed, "max_len": max_len},
                    scramble_seed, corpus_dir=corpus_dir)
    (out_dir / "report.json").write_text(json.dumps(rep, indent=1) + "\n", encoding="utf-8")
    report.write_per_sample_csv(rep, out_dir / "per_sample.csv")
    report.save_eval_figures(rep, out_dir / "figures" / "metrics.png")
    summary = {k: rep[k] for k in ("mode", "cider_d", "nw", "iou", "tau", "accuracy", "order_following")}
    click.echo(json.dumps(summary, indent=1))


# ------------------------------------------------------------------ generate


def parse_control_spec(spec: str) -> list[list[int]]:
    """Parse `[0,2];[1]` into grouped region indices."""
    groups = []
    for part in spec.split(";"):
        part = part.strip()
        if not (part.startswith("[") and part.endswith("]")):
            raise UsageError(f"control group {part!r} must look like [i,j,...]")
        body = part[1:-1].strip()
        if not body:
            raise UsageError("control groups must not be empty")
        try:
            groups.append([int(x) for x in body.split(",")])
        except ValueError:
            raise UsageError(f"control group {part!r} holds non-integer indices") from None
    return groups


def grounding_trace(corpus: Corpus, control, tokens, gates) -> list[str]:
    """One line per decoded chunk: `chunk_text -> set_index [region indices]`."""
    n_sets = len(control)
    lines = []
    segment = []
    pointer = 0
    for tok, gate in zip(tokens, gates):
        if tok == corpus.vocab.eos_id:
            break
        segment.append(corpus.vocab.token(tok))
        if gate:
            idx = min(pointer, n_sets - 1)
            lines.append(f"{' '.join(segment)} -> {idx} {control.sets[idx].indices}")
            segment = []
            pointer = min(pointer + 1, n_sets)
    if segment:
        idx = min(pointer, n_sets - 1)
        lines.append(f"{' '.join(segment)} -> {idx} {control.sets[idx].indices}")
    return lines


@cli.command("generate")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--image-id", type=int, required=True)
@click.option("--control", "control_spec", default=None,
              help='ordered region-index groups, e.g. "[0,2];[1]"')
@click.option("--beam", "beam_size", type=int, default=0, help="use beam search with this width")
@click.option("--max-len", type=int, default=30, show_default=True)
@guarded
def cmd_generate(ckpt_path, corpus_dir, split, image_id, control_spec, beam_size, max_len):
    """Decode a caption for one image and print the grounding trace."""
    from .data import ControlSignal, RegionSet

    corpus = _load_split(corpus_dir, split)
    params = ModelParams.load(ckpt_path)
    image = _find_image(corpus, image_id)
    if control_spec:
        groups = parse_control_spec(control_spec)
        for group in groups:
            for idx in group:
                if not 0 <= idx < len(image.regions):
                    raise UsageError(f"region index {idx} out of range for image {image_id}")
        control = ControlSignal([
            RegionSet(g, [image.regions[i] for i in g]) for g in groups
        ])
    else:
        from .data import Sample

        control = Sample(image, image.captions[0]).control
    desc = image.image_desc()
    if beam_size:
        hyps = decode.beam_decode(params, desc, control, beam_size=beam_size, max_len=max_len)
        tokens, gates, _ = hyps[0]
    else:
        tokens, gates = decode.greedy_decode(params, desc, control, max_len)
    text = " ".join(corpus.vocab.token(t) for t in tokens if t != corpus.vocab.eos_id)
    click.echo(text)
    for line in grounding_trace(corpus, control, tokens, gates):
        click.echo(line)


# ---------------------------------------------------------------------- sort


@cli.command("sort")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path), required=True,
              help="sorter checkpoint")
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--image-id", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True, help="scramble seed")
@guarded
def cmd_sort(ckpt_path, corpus_dir, split, image_id, seed):
    """Scramble an image's region sets and print the learned ordering."""
    from .data import Sample

    corpus = _load_split(corpus_dir, split)
    sorter_params = SortNetParams.load(ckpt_path)
    image = _find_image(corpus, image_id)
    control = Sample(image, image.captions[0]).control
    rng = np.random.default_rng(seed)
    perm = [int(p) for p in rng.permutation(len(control))]
    scrambled = [control.sets[p] for p in perm]
    item_order = sort_region_sets(sorter_params, scrambled)
    recovered = [perm[i] for i in item_order]
    click.echo(f"scrambled order: {perm}")
    click.echo(f"predicted order: {recovered}")
    ordered = [scrambled[i] for i in item_order]
    click.echo("control: " + ";".join("[" + ",".join(map(str, s.indices)) + "]" for s in ordered))


def main():
    cli(prog_name="ctrlcap")


if __name__ == "__main__":
    main()
