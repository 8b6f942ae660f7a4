"""Command-line entry point: ``finsent <command> [--config run.json] [--flags]``.

Every command reads one flat :class:`RunConfig`.  Values resolve as
defaults, then the JSON config file, then ``--kebab-case`` flags.  Each run
writes into a fresh versioned directory ``<output_dir>/<command>-NNN`` and
starts by saving ``effective_config.json`` (all resolved values, reusable as
``--config``) and ``run.json`` (command, version, argv) there.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 checkpoint error.  Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import MaskingConfig, load_corpus, load_labeled, load_scored, split_examples
from .errors import CheckpointError, ConfigError, DataError, FinSentError
from .metrics import loss_accuracy_correlation
from .model import LABELS, ModelConfig, init_model
from .numerics import softmax
from .serialization import export_attention, load_checkpoint, save_checkpoint
from .tokenizer import Vocabulary, build_vocab, encode
from .training import (
    MetricsLog, TrainConfig, depth_sweep, evaluate, finetune, forgetting_probe, pretrain, write_table,
)

COMMANDS = ("build-vocab", "pretrain", "finetune", "evaluate", "predict", "export-attention", "depth-sweep",
            "probe-forgetting")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3

_MODEL_KEYS = ("num_layers", "num_heads", "hidden_size", "intermediate_size", "max_position", "dropout_prob",
               "attention_dropout_prob", "initializer_range", "layer_norm_eps", "use_pooler", "task")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
_MASK_KEYS = tuple(f.name for f in fields(MaskingConfig))


@dataclass
class RunConfig:
    """Everything a command can read.  Paths left as ``None`` are unused or optional."""

    # paths
    output_dir: str = "runs"
    run_name: str | None = None
    vocab: str | None = None
    corpus: str | None = None
    train_data: str | None = None
    val_data: str | None = None
    data: str | None = None
    data_format: str = "tsv"
    checkpoint: str | None = None
    snapshot_dir: str | None = None
    probe_corpus: str | None = None
    input: str | None = None
    text: str | None = None
    # vocabulary induction
    vocab_size: int = 8192
    min_freq: int = 1
    # model
    num_layers: int = 4
    num_heads: int = 4
    hidden_size: int = 128
    intermediate_size: int = 512
    max_position: int = 64
    dropout_prob: float = 0.12
    attention_dropout_prob: float = 0.1
    initializer_range: float = 0.02
    layer_norm_eps: float = 1e-12
    use_pooler: bool = True
    task: str = "classification"
    resize_embeddings: bool = False
    # training
    base_lr: float = 2e-5
    warmup_proportion: float = 0.21
    dropout: float = 0.12
    max_seq_len: int = 64
    batch_size: int = 64
    epochs: int = 10
    discrimination_rate: float = 0.87
    grad_accumulation_steps: int = 1
    weight_decay: float = 0.01
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-6
    max_grad_norm: float = 1.0
    bias_correction: bool = False
    shuffle: bool = True
    seed: int = 42
    # masking
    mask_percent: float = 15.0
    replace_with_mask: float = 0.8
    replace_with_random: float = 0.1
    keep_original: float = 0.1
    # experiments
    split_fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    depths: list = field(default_factory=lambda: [1, 2, 4])

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **{k: getattr(self, k) for k in _MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        values = {k: getattr(self, k) for k in _TRAIN_KEYS}
        values["adam_betas"] = tuple(self.adam_betas)
        return TrainConfig(**values)

    def masking(self) -> MaskingConfig:
        return MaskingConfig(**{k: getattr(self, k) for k in _MASK_KEYS})


_FIELDS = {f.name: f for f in fields(RunConfig)}
_LIST_ITEM = {"adam_betas": float, "split_fractions": float, "depths": int}


def _field_type(name: str):
    ann = _FIELDS[name].type
    for typ, token in ((bool, "bool"), (int, "int"), (float, "float"), (list, "list")):
        if ann.startswith(token):
            return typ
    return str


def _check_value(name: str, value):
    """Type-check one config value (JSON numbers may need int -> float widening)."""
    typ = _field_type(name)
    if value is None:
        if _FIELDS[name].default is None:
            return None
        raise ConfigError(f"config key {name!r} may not be null")
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} must be true or false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r} must be an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} must be a number, got {value!r}")
        return float(value)
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"config key {name!r} must be a list, got {value!r}")
        item = _LIST_ITEM[name]
        return [_check_value_item(name, v, item) for v in value]
    if not isinstance(value, str):
        raise ConfigError(f"config key {name!r} must be a string, got {value!r}")
    return value


def _check_value_item(name, v, item):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (item is int and not isinstance(v, int)):
        raise ConfigError(f"config key {name!r} has a bad element {v!r}")
    return item(v)


def resolve_config(file_values: dict | None, flag_values: dict) -> RunConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    merged = {}
    for source in (file_values or {}, flag_values):
        unknown = sorted(set(source) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        for k, v in source.items():
            merged[k] = _check_value(k, v)
    return RunConfig(**merged)


def _read_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return values


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="finsent", description="Desk-scale BERT-style financial sentiment pipeline.")
    parser.add_argument("--version", action="version", version=f"finsent {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of RunConfig values (flags override it)")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            typ = _field_type(f.name)
            if typ is bool:
                p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction)
            elif typ is list:
                p.add_argument(flag, dest=f.name, nargs="+", type=_LIST_ITEM[f.name])
            else:
                p.add_argument(flag, dest=f.name, type=typ)
    return parser


_HELP = {
    "build-vocab": "induce a WordPiece vocabulary from --corpus (and --train-data texts)",
    "pretrain": "masked-LM + next-sentence pretraining on --corpus",
    "finetune": "fine-tune on labeled (classification) or scored (regression) --train-data",
    "evaluate": "metrics of --checkpoint on --data",
    "predict": "label or score each line of --input, or a single --text",
    "export-attention": "attention maps of --checkpoint for one --text",
    "depth-sweep": "train one classifier per entry of --depths and tabulate loss and accuracy",
    "probe-forgetting": "held-out masked-LM loss of every snapshot in --snapshot-dir",
}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
        if name != "text" and not Path(value).exists():
            raise ConfigError(f"{name} path does not exist: {value}")


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    if cfg.run_name:
        run = root / cfg.run_name
        if run.exists():
            raise ConfigError(f"run directory already exists: {run}")
        run.mkdir()
        return run
    n = 1
    while True:
        run = root / f"{command}-{n:03d}"
        try:
            run.mkdir()
            return run
        except FileExistsError:
            n += 1


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _load_examples(cfg: RunConfig, path: str, task: str):
    if task == "regression":
        return load_scored(path)
    return load_labeled(path, cfg.data_format)


def _load_model(cfg: RunConfig, vocab: Vocabulary):
    model, _ = load_checkpoint(cfg.checkpoint)
    if model.config.vocab_size != len(vocab):
        if not cfg.resize_embeddings:
            raise ConfigError(f"checkpoint has vocab_size {model.config.vocab_size} but the vocabulary has "
                              f"{len(vocab)} tokens (pass --resize-embeddings to resize)")
        model = model.resize_embeddings(len(vocab), cfg.seed)
    return model


def _log(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_vocab(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "corpus")
    lines = [s for doc in load_corpus(cfg.corpus) for s in doc]
    if cfg.train_data is not None:
        _require(cfg, "train_data")
        lines += [ex.text for ex in _load_examples(cfg, cfg.train_data, cfg.task)]
    vocab = build_vocab(lines, target_size=cfg.vocab_size, min_freq=cfg.min_freq)
    vocab.save(run / "vocab.txt")
    _log(f"wrote {len(vocab)} tokens to {run / 'vocab.txt'}")


def cmd_pretrain(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "corpus", "vocab")
    vocab = Vocabulary.load(cfg.vocab)
    documents = load_corpus(cfg.corpus)
    if cfg.checkpoint is not None:
        _require(cfg, "checkpoint")
        model = _load_model(cfg, vocab)
    else:
        model = init_model(cfg.model_config(len(vocab)), cfg.seed)
    log = MetricsLog(run / "metrics.jsonl")
    result = pretrain(model, documents, vocab, cfg.masking(), cfg.train_config(), checkpoint_dir=run, log=log)
    save_checkpoint(result.model, run / "model.ckpt")
    _write_json(run / "history.json", result.history)
    if result.history:
        _log(f"final epoch: {json.dumps(result.history[-1])}")


def cmd_finetune(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "train_data", "vocab")
    vocab = Vocabulary.load(cfg.vocab)
    examples = _load_examples(cfg, cfg.train_data, cfg.task)
    if cfg.val_data is not None:
        _require(cfg, "val_data")
        train, val = examples, _load_examples(cfg, cfg.val_data, cfg.task)
    else:
        if len(cfg.split_fractions) != 3:
            raise ConfigError("split_fractions needs three values (train, validation, test)")
        train, val, test = split_examples(examples, tuple(cfg.split_fractions))
        if not train:
            raise DataError("the train split is empty; adjust --split-fractions")
        _write_split(run / "test.tsv", test)
    if cfg.checkpoint is not None:
        _require(cfg, "checkpoint")
        model = _load_model(cfg, vocab)
    else:
        model = init_model(cfg.model_config(len(vocab)), cfg.seed)
    log = MetricsLog(run / "metrics.jsonl")
    result = finetune(model, train, vocab, cfg.train_config(), task=cfg.task, val_examples=val or None, log=log,
                      snapshot_dir=run / "snapshots")
    save_checkpoint(result.model, run / "model.ckpt")
    _write_json(run / "history.json", result.history)
    if result.history:
        _log(f"final epoch: {json.dumps(result.history[-1])}")


def _write_split(path: Path, examples) -> None:
    lines = [f"{ex.text}\t{ex.label if ex.label is not None else repr(ex.score)}" for ex in examples]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def cmd_evaluate(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "checkpoint", "data", "vocab")
    vocab = Vocabulary.load(cfg.vocab)
    model = _load_model(cfg, vocab)
    examples = _load_examples(cfg, cfg.data, model.config.task)
    loss, result, _ = evaluate(model, examples, vocab, cfg.max_seq_len, cfg.batch_size)
    if model.config.task == "classification":
        doc = result.to_dict()
    else:
        doc = {"mse": result, "mean_loss": loss, "count": len(examples)}
    _write_json(run / "metrics.json", doc)
    print(json.dumps(doc, indent=2))


def _predict_lines(cfg: RunConfig) -> list[str]:
    if cfg.text is not None and cfg.input is not None:
        raise ConfigError("pass either --text or --input, not both")
    if cfg.text is not None:
        return [cfg.text]
    _require(cfg, "input")
    try:
        raw = Path(cfg.input).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"not valid UTF-8 ({exc})", path=cfg.input) from None
    return [line.rstrip("\r") for line in raw.split("\n") if line.strip()]


def cmd_predict(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "checkpoint", "vocab")
    vocab = Vocabulary.load(cfg.vocab)
    model = _load_model(cfg, vocab)
    texts = _predict_lines(cfg)
    out_lines = []
    for start in range(0, len(texts), cfg.batch_size):
        chunk = texts[start:start + cfg.batch_size]
        feats = [encode(t, None, vocab, cfg.max_seq_len) for t in chunk]
        ids = np.asarray([f.input_ids for f in feats])
        mask = np.asarray([f.attention_mask for f in feats])
        seg = np.asarray([f.segment_ids for f in feats])
        pooled = model.forward_arrays(ids, mask, seg).pooled
        if model.config.task == "classification":
            probs = softmax(model.classify(pooled).astype(np.float64), axis=-1).data
            for t, p in zip(chunk, probs):
                out_lines.append({"text": t, "label": LABELS[int(np.argmax(p))],
                                  "probs": {name: float(x) for name, x in zip(LABELS, p)}})
        else:
            for t, s in zip(chunk, model.regress(pooled).data):
                out_lines.append({"text": t, "score": float(s)})
    rendered = "".join(json.dumps(rec, ensure_ascii=False) + "\n" for rec in out_lines)
    (run / "predictions.jsonl").write_text(rendered, encoding="utf-8")
    sys.stdout.write(rendered)


def cmd_export_attention(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "checkpoint", "vocab", "text")
    vocab = Vocabulary.load(cfg.vocab)
    model = _load_model(cfg, vocab)
    feats = encode(cfg.text, None, vocab, min(cfg.max_seq_len, model.config.max_position))
    export_attention(model, feats, run / "attention.json", vocab)
    _log(f"wrote {run / 'attention.json'}")


def cmd_depth_sweep(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "train_data", "vocab")
    if cfg.task != "classification":
        raise ConfigError("depth-sweep tabulates accuracy and therefore needs task=classification")
    vocab = Vocabulary.load(cfg.vocab)
    examples = load_labeled(cfg.train_data, cfg.data_format)
    base = cfg.model_config(len(vocab))
    rows = depth_sweep(base, cfg.depths, examples, vocab, cfg.train_config())
    write_table(rows, run / "depth_sweep.tsv", run / "depth_sweep.json")
    summary: dict = {"depths": cfg.depths}
    try:
        summary["loss_accuracy_correlation"] = loss_accuracy_correlation(
            [r["loss"] for r in rows], [r["accuracy"] for r in rows])
    except FinSentError as exc:
        summary["loss_accuracy_correlation"] = None
        summary["reason"] = str(exc)
    _write_json(run / "correlation.json", summary)
    sys.stdout.write((run / "depth_sweep.tsv").read_text(encoding="utf-8"))


def cmd_probe_forgetting(cfg: RunConfig, run: Path) -> None:
    _require(cfg, "snapshot_dir", "probe_corpus", "vocab")
    vocab = Vocabulary.load(cfg.vocab)
    paths = sorted(Path(cfg.snapshot_dir).glob("epoch_*.ckpt"))
    if not paths:
        raise CheckpointError(f"no epoch_*.ckpt snapshots in {cfg.snapshot_dir}")
    snapshots = [load_checkpoint(p)[0] for p in paths]
    sentences = [s for doc in load_corpus(cfg.probe_corpus) for s in doc]
    rows = forgetting_probe(snapshots, sentences, vocab, cfg.masking(), cfg.seed, cfg.max_seq_len)
    for row, p in zip(rows, paths):
        row["epoch"] = int(p.stem.split("_")[1])
    write_table(rows, run / "forgetting.tsv", run / "forgetting.json")
    sys.stdout.write((run / "forgetting.tsv").read_text(encoding="utf-8"))


_DISPATCH = {
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
    "depth-sweep": cmd_depth_sweep,
    "probe-forgetting": cmd_probe_forgetting,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except _UsageError as exc:
        _log(str(exc))
        return EXIT_CONFIG
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        cfg = resolve_config(_read_config_file(config_path) if config_path else None, args)
        # Validate the derived configs before creating any output.
        cfg.train_config()
        cfg.masking()
        cfg.model_config(max(cfg.vocab_size, 6))
        run = make_run_dir(cfg, command)
        # effective_config.json is itself a valid --config file for replaying the run.
        _write_json(run / "effective_config.json", dataclasses.asdict(cfg))
        _write_json(run / "run.json", {"command": command, "version": __version__,
                                       "argv": list(sys.argv[1:] if argv is None else argv)})
        _DISPATCH[command](cfg, run)
    except CheckpointError as exc:
        _log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except DataError as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except FinSentError as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    _log(f"run directory: {run}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
