"""Training loop, metrics, significance testing, cross-validation and reports."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import augment_arrays, read_tensor, split_folds, stack_subjects, write_tensor
from .errors import ConfigError, ContractError, NonFiniteError, ParseError
from .layers import Adam
from .model import (BRANCHES, MMMNAConfig, build_model, config_from_dict, focal_loss,
                    substitution_sources)
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

METRICS = ("accuracy", "recall", "precision", "f_score")
PRED_COLUMNS = ("subject_id", "label", "pred_fusion", "pred_flair", "pred_t1", "pred_t1ce", "pred_t2")

# availability rows in the order of the missing-modality table
ABLATION_CONFIGS = (
    ("flair",),
    ("flair", "t1"),
    ("flair", "t1ce"),
    ("flair", "t2"),
    ("flair", "t1", "t1ce"),
    ("flair", "t1", "t2"),
    ("flair", "t1ce", "t2"),
    ("flair", "t1", "t1ce", "t2"),
)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 4
    lam: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0
    seed: int = 0
    variant: str = "linformer"
    single_scale: bool = False
    baseline_concat: bool = False
    base_channels: int = 8
    augment: bool = True

    def __post_init__(self):
        for name in ("lr", "weight_decay", "max_epochs", "patience", "batch_size", "lam", "alpha"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if self.gamma < 0 or self.seed < 0:
            raise ConfigError("gamma and seed must be non-negative")

    def model_config(self, input_shape):
        return MMMNAConfig(input_shape=input_shape, base_channels=self.base_channels, lam=self.lam,
                           alpha=self.alpha, gamma=self.gamma, variant=self.variant,
                           single_scale=self.single_scale, baseline_concat=self.baseline_concat,
                           seed=self.seed)


def _parse_value(raw, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def parse_key_values(text, defaults, source="<config>"):
    values = {}
    known = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


def load_train_config(path):
    path = Path(path)
    return TrainConfig(**parse_key_values(path.read_text(), TrainConfig(), str(path)))


def dump_key_values(obj):
    return "".join(f"{k}={v}\n" for k, v in asdict(obj).items())


# -- training -------------------------------------------------------------

@dataclass
class TrainResult:
    state: dict
    history: list
    best_epoch: int


def _onehot(labels, k=3):
    return np.eye(k)[np.asarray(labels, dtype=int)]


def _as_arrays(data):
    if isinstance(data, tuple):
        return data
    return stack_subjects(data)


def predict(model, inputs, nonimage, batch_size=8):
    """Eval-mode logits per branch, as ``{branch: S x 3 ndarray}``."""
    model.eval()
    out = {}
    for start in range(0, len(inputs), batch_size):
        res = model(inputs[start:start + batch_size], nonimage[start:start + batch_size])
        for name, logits in res.items():
            out.setdefault(name, []).append(logits.data)
    return {k: np.concatenate(v) for k, v in out.items()}


def fusion_loss_eval(model, inputs, nonimage, labels, batch_size=8):
    cfg = model.config
    logits = predict(model, inputs, nonimage, batch_size)["fusion"]
    return float(focal_loss(Tensor(logits), _onehot(labels), cfg.alpha, cfg.gamma).data)


def train(model, train_data, val_data, config: TrainConfig, on_epoch_end=None):
    """Adam on the weighted multi-branch loss with early stopping.

    ``train_data`` / ``val_data`` are lists of subjects or pre-stacked
    ``(inputs, nonimage, labels)`` arrays. Early stopping watches the
    validation fusion-branch loss, or the mean training loss when there is
    no validation data. The best state is loaded back into ``model``.
    ``on_epoch_end(epoch, model, record)`` may return True to stop at once,
    keeping the current weights instead of the best monitored ones.
    """
    x, ni, y = _as_arrays(train_data)
    val = _as_arrays(val_data) if val_data is not None and len(val_data) else None
    if val is not None and isinstance(train_data, list) and isinstance(val_data, list):
        overlap = {s.id for s in train_data} & {s.id for s in val_data}
        if overlap:
            raise ContractError(f"train and validation share subjects: {sorted(overlap)[:3]}")
    params = model.parameters()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    best = math.inf
    best_state, best_epoch, stale = model.state_dict(), -1, 0
    history = []
    for epoch in range(config.max_epochs):
        model.train()
        order = rng.permutation(len(x))
        losses, correct = [], 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = x[idx]
            if config.augment:
                xb = np.stack([augment_arrays([s], rng)[0] for s in xb])
            try:
                with Tape() as tape:
                    out = model(xb, ni[idx])
                    loss, _ = model.loss(out, _onehot(y[idx]))
                grads = backward(loss, tape)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc.op} at epoch {epoch}, batch {b}", exc.phase) from exc
            opt.step(grads)
            losses.append(float(loss.data) * len(idx))
            correct += int((out.fusion.data.argmax(axis=1) == y[idx]).sum())
        record = {"epoch": epoch, "train_loss": sum(losses) / len(x), "train_acc": correct / len(x)}
        if val is not None:
            record["val_loss"] = fusion_loss_eval(model, *val)
            monitored = record["val_loss"]
        else:
            monitored = record["train_loss"]
        history.append(record)
        log.debug("epoch %d %s", epoch, record)
        if monitored < best:
            best, best_epoch, stale = monitored, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
        if on_epoch_end is not None and on_epoch_end(epoch, model, record):
            return TrainResult(state=model.state_dict(), history=history, best_epoch=epoch)
        if stale >= config.patience:
            break
    model.load_state_dict(best_state)
    return TrainResult(state=best_state, history=history, best_epoch=best_epoch)


# -- metrics --------------------------------------------------------------

@dataclass
class FoldMetrics:
    accuracy: float
    recall: float
    precision: float
    f_score: float
    confusion: np.ndarray = field(repr=False, default=None)

    def values(self):
        return {m: getattr(self, m) for m in METRICS}


def confusion_matrix(labels, preds, k=3):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
    return cm


def evaluate(preds, labels, k=3):
    """Accuracy plus macro one-vs-rest precision/recall; F from the macro values.

    Precision or recall terms with an empty denominator count as 0.
    """
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ContractError(f"{len(preds)} predictions for {len(labels)} labels")
    if not labels:
        raise ContractError("nothing to evaluate")
    if any(not 0 <= int(v) < k for v in preds + labels):
        raise ContractError(f"classes must lie in 0..{k - 1}")
    cm = confusion_matrix(labels, preds, k)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    prec = np.divide(tp, pred_pos, out=np.zeros(k), where=pred_pos > 0)
    rec = np.divide(tp, true_pos, out=np.zeros(k), where=true_pos > 0)
    p, r = float(prec.mean()), float(rec.mean())
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return FoldMetrics(accuracy=float(tp.sum() / cm.sum()), recall=r, precision=p, f_score=f, confusion=cm)


@dataclass
class MetricsReport:
    folds: list = field(default_factory=list)

    def summary(self):
        """``{metric: (mean, sample std)}``; std is 0 for a single fold."""
        out = {}
        for m in METRICS:
            vals = np.array([getattr(f, m) for f in self.folds], dtype=float)
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out[m] = (float(vals.mean()), std)
        return out


@dataclass
class ContingencyTable:
    both_correct: int
    b: int
    c: int
    both_wrong: int

    @property
    def total(self):
        return self.both_correct + self.b + self.c + self.both_wrong


@dataclass
class McNemarResult:
    statistic: float
    p_value: float
    degenerate: bool = False


def contingency_table(labels, preds_a, preds_b):
    labels, a, b = (np.asarray(v) for v in (labels, preds_a, preds_b))
    if not len(labels) == len(a) == len(b):
        raise ContractError("labels and prediction lists differ in length")
    ca, cb = a == labels, b == labels
    return ContingencyTable(int((ca & cb).sum()), int((ca & ~cb).sum()),
                            int((~ca & cb).sum()), int((~ca & ~cb).sum()))


def mcnemar_test(table: ContingencyTable):
    """Continuity-corrected McNemar chi-square with 1 dof: ``p = erfc(sqrt(chi2 / 2))``."""
    b, c = table.b, table.c
    if b < 0 or c < 0:
        raise ContractError("discordant counts must be non-negative")
    if b + c == 0:
        return McNemarResult(0.0, 1.0, degenerate=True)
    chi2 = (abs(b - c) - 1) ** 2 / (b + c)
    return McNemarResult(chi2, math.erfc(math.sqrt(chi2 / 2.0)))


# -- predictions files ----------------------------------------------------

def prediction_rows(ids, labels, branch_logits):
    rows = []
    for i, sid in enumerate(ids):
        row = {"subject_id": sid, "label": int(labels[i])}
        for name in BRANCHES:
            logits = branch_logits.get(name)
            row[f"pred_{name}"] = int(logits[i].argmax()) if logits is not None else -1
        rows.append(row)
    return rows


def write_predictions(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PRED_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def read_predictions(path):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PRED_COLUMNS:
            raise ParseError(path, 0, f"unexpected header {reader.fieldnames}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            try:
                rows.append({k: (rec[k] if k == "subject_id" else int(rec[k])) for k in PRED_COLUMNS})
            except (TypeError, ValueError) as exc:
                raise ParseError(path, lineno, f"bad row {rec}") from exc
    return rows


def compare_predictions(rows_a, rows_b, column="pred_fusion"):
    """McNemar test of two prediction files over their shared subjects."""
    a = {r["subject_id"]: r for r in rows_a}
    b = {r["subject_id"]: r for r in rows_b}
    ids = sorted(set(a) & set(b))
    if not ids:
        raise ContractError("prediction files share no subjects")
    for sid in ids:
        if a[sid]["label"] != b[sid]["label"]:
            raise ContractError(f"label mismatch for {sid}")
    table = contingency_table([a[s]["label"] for s in ids], [a[s][column] for s in ids],
                              [b[s][column] for s in ids])
    return table, mcnemar_test(table)


# -- cross-validation -----------------------------------------------------

@dataclass
class CVResult:
    report: MetricsReport
    predictions: list
    ablation: dict | None = None
    histories: list = field(default_factory=list)


def substitute_array(inputs, available):
    """Apply modality substitution to stacked ``S x 4 x 2 x ...`` inputs."""
    return inputs[:, substitution_sources(available)]


def run_missing_modality_ablation(model, data, batch_size=8, configs=ABLATION_CONFIGS):
    """One :class:`MetricsReport` row per availability configuration, in table order."""
    for avail in configs:
        if "flair" not in avail:
            raise ConfigError(f"configuration {avail} lacks FLAIR, the substitution source")
    x, ni, y = _as_arrays(data)
    rows = {}
    for avail in configs:
        logits = predict(model, substitute_array(x, avail), ni, batch_size)["fusion"]
        rows[ablation_name(avail)] = MetricsReport([evaluate(logits.argmax(axis=1), y)])
    return rows


_DISPLAY = {"flair": "FLAIR", "t1": "T1", "t1ce": "T1Ce", "t2": "T2"}


def ablation_name(available):
    return "+".join(_DISPLAY[m] for m in available)


def _run_fold(args):
    fold, subjects, split, config, input_shape, ablate = args
    test_ids = set(split.folds[fold])
    pool = [s for s in subjects if s.id not in test_ids]
    test = [s for s in subjects if s.id in test_ids]
    inner = split_folds([s.id for s in pool], split.n_folds, config.seed + 1000 + fold,
                        labels=[int(s.label) for s in pool])
    val_ids = set(inner.folds[0])
    train_set = [s for s in pool if s.id not in val_ids]
    val_set = [s for s in pool if s.id in val_ids]
    fold_cfg = TrainConfig(**{**asdict(config), "seed": config.seed + fold})
    model = build_model(fold_cfg.model_config(input_shape))
    result = train(model, train_set, val_set, fold_cfg)
    x, ni, y = stack_subjects(test)
    logits = predict(model, x, ni)
    metrics = evaluate(logits["fusion"].argmax(axis=1), y)
    rows = prediction_rows([s.id for s in test], y, logits)
    abl = run_missing_modality_ablation(model, (x, ni, y)) if ablate and not config.baseline_concat else None
    return metrics, rows, abl, result.history


def run_cross_validation(subjects, config: TrainConfig, folds=10, out_dir=None, workers=1, ablate=False):
    """Stratified k-fold CV; each fold holds out one inner fold for early stopping."""
    if folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    subjects = list(subjects)
    input_shape = subjects[0].shape
    split = split_folds([s.id for s in subjects], folds, config.seed,
                        labels=[int(s.label) for s in subjects])
    jobs = [(i, subjects, split, config, input_shape, ablate) for i in range(folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    report = MetricsReport([r[0] for r in results])
    preds = [r[1] for r in results]
    ablation = None
    if ablate and results[0][2] is not None:
        ablation = {name: MetricsReport([r[2][name].folds[0] for r in results]) for name in results[0][2]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, rows in enumerate(preds):
            write_predictions(out / f"preds_fold{i:02d}.csv", rows)
    return CVResult(report=report, predictions=preds, ablation=ablation, histories=[r[3] for r in results])


def report_from_predictions(pred_files):
    return MetricsReport([evaluate([r["pred_fusion"] for r in rows], [r["label"] for r in rows])
                          for rows in (read_predictions(p) for p in pred_files)])


# -- reports --------------------------------------------------------------

def format_mean_std(mean, std):
    return f"{mean:.4f}±{std:.4f}"


def emit_report(reports, destination):
    """Write ``folds.csv``, ``summary.csv`` and a plain-text ``summary.txt``.

    ``reports`` maps a row name (method or modality configuration) to a
    :class:`MetricsReport`.
    """
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name", "fold") + METRICS)
        for name, rep in reports.items():
            for i, f in enumerate(rep.folds):
                w.writerow([name, i] + [repr(float(getattr(f, m))) for m in METRICS])
    summaries = {name: rep.summary() for name, rep in reports.items()}
    with open(dest / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name",) + METRICS)
        for name, summ in summaries.items():
            w.writerow([name] + [format_mean_std(*summ[m]) for m in METRICS])
    width = max([len("Method")] + [len(n) for n in reports])
    lines = [f"{'Method':<{width}} | " + " | ".join(f"{m.replace('_', '-').title():<15}" for m in METRICS)]
    lines.append("-" * len(lines[0]))
    for name, summ in summaries.items():
        lines.append(f"{name:<{width}} | " + " | ".join(f"{format_mean_std(*summ[m]):<15}" for m in METRICS))
    (dest / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [dest / "folds.csv", dest / "summary.csv", dest / "summary.txt"]


def read_fold_report(path):
    reports = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            reports.setdefault(rec["name"], MetricsReport()).folds.append(
                FoldMetrics(**{m: float(rec[m]) for m in METRICS}))
    return reports


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model, directory):
    root = Path(directory)
    (root / "params").mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    (root / "config.txt").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items()))
    lines = []
    for i, (name, arr) in enumerate(sorted(model.state_dict().items())):
        fname = f"params/{i:04d}.mmv"
        write_tensor(root / fname, np.asarray(arr, dtype=np.float32))
        lines.append(f"{name}={fname}\n")
    (root / "manifest.txt").write_text("".join(lines))


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(e) for e in v)
    return "" if v is None else str(v)


def load_checkpoint(directory):
    root = Path(directory)
    defaults = MMMNAConfig()
    raw = {}
    for lineno, line in enumerate((root / "config.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        if key not in {f.name for f in fields(MMMNAConfig)}:
            raise ParseError(root / "config.txt", lineno, f"unknown key {key!r}")
        cur = getattr(defaults, key)
        if key in ("input_shape", "ranks"):
            raw[key] = tuple(int(v) for v in val.split(",")) if val else None
        else:
            raw[key] = _parse_value(val, cur)
    model = build_model(config_from_dict(raw))
    state = {}
    for line in (root / "manifest.txt").read_text().splitlines():
        if line.strip():
            name, _, fname = line.partition("=")
            state[name] = read_tensor(root / fname)
    model.load_state_dict(state)
    return model
