"""Experiment orchestration: data selection, training, attack evaluation and reports."""
from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_mnist_idx, resolve, split_indices, subset
from .errors import ConfigError, DataError, RbfMapError
from .metrics import MI_VARIANT, pca_project, separability
from .models import Model, build_orig, build_prop, feature_tap
from .training import TrainConfig, train

log = logging.getLogger(__name__)

POOL_IMAGES = "mnist5k-images-idx3-ubyte.gz"
POOL_LABELS = "mnist5k-labels-idx1-ubyte.gz"


@dataclass
class ModelConfig:
    kind: str = "prop"
    P: list = field(default_factory=lambda: [8, 8, 8])
    learn_A: bool = True
    learn_beta: bool = True
    last_only: bool = False

    def __post_init__(self):
        if self.kind not in ("orig", "prop"):
            raise ConfigError(f"model.kind must be 'orig' or 'prop', got {self.kind!r}")
        self.P = [int(p) for p in self.P]

    def build(self, seed: int, num_classes: int = 10, input_shape=(28, 28, 1)) -> Model:
        if self.kind == "orig":
            return build_orig(num_classes, input_shape, seed)
        return build_prop(num_classes, self.P, self.learn_A, self.learn_beta, self.last_only, input_shape, seed)


MNIST_FILES = (
    "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz",
)


@dataclass
class DataConfig:
    """Dataset selection.

    Unset fields are filled by :meth:`resolved`: standard MNIST files in the
    data root if present (10000/2000 subsets), otherwise the bundled
    5000-image pool split 4000/1000.
    """

    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None  # None: carve the test subset out of the training pool
    test_labels: str | None = None
    n_train: int | None = None
    n_test: int | None = None
    full: bool = False  # use every available sample

    def resolved(self) -> "DataConfig":
        out = DataConfig(**asdict(self))
        if out.train_images is None and out.train_labels is None:
            if all(resolve(f).exists() for f in MNIST_FILES):
                out.train_images, out.train_labels, std_ti, std_tl = MNIST_FILES
                if out.test_images is None and out.test_labels is None:
                    out.test_images, out.test_labels = std_ti, std_tl
            else:
                out.train_images, out.train_labels = POOL_IMAGES, POOL_LABELS
        if out.train_images is None or out.train_labels is None:
            raise ConfigError("data.train_images and data.train_labels must be given together")
        separate = out.test_images is not None
        if out.n_train is None:
            out.n_train = 10000 if separate else 4000
        if out.n_test is None:
            out.n_test = 2000 if separate else 1000
        if out.n_train < 1 or out.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be >= 1")
        return out

    def mode(self) -> str:
        if self.full:
            return "full"
        return "subset" if self.test_images else "pool-split"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    attacks: list = field(default_factory=list)
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint: str | None = None  # load parameters instead of training
    attack_samples: int | None = None  # cap on test samples attacked (None: all)
    spsa_max_samples: int = 50
    separability_samples: int = 2000

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        _reject_unknown(cls, raw, "experiment")
        nested = {
            "model": ModelConfig,
            "train": TrainConfig,
            "data": DataConfig,
        }
        for key, typ in nested.items():
            if key in raw:
                if not isinstance(raw[key], dict):
                    raise ConfigError(f"{key} must be an object")
                _reject_unknown(typ, raw[key], key)
                raw[key] = typ(**raw[key])
        if "attacks" in raw:
            parsed = []
            for i, a in enumerate(raw["attacks"]):
                if not isinstance(a, dict):
                    raise ConfigError(f"attacks[{i}] must be an object")
                _reject_unknown(AttackConfig, a, f"attacks[{i}]")
                try:
                    parsed.append(AttackConfig(**a))
                except TypeError as exc:
                    raise ConfigError(f"attacks[{i}]: {exc}") from exc
            raw["attacks"] = parsed
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


def _reject_unknown(cls, raw: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Split:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mode: str
    train_index: np.ndarray
    test_index: np.ndarray


def load_split(cfg: DataConfig, seed: int) -> Split:
    cfg = cfg.resolved()
    for p in (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels):
        if p is not None and not resolve(p).exists():
            raise DataError(f"data file not found: {p}")
    x, y = load_mnist_idx(cfg.train_images, cfg.train_labels)
    if cfg.test_images:
        if not cfg.test_labels:
            raise ConfigError("data.test_images given without data.test_labels")
        xt, yt = load_mnist_idx(cfg.test_images, cfg.test_labels)
        if cfg.full:
            tr, te = np.arange(len(y)), np.arange(len(yt))
        else:
            tr, te = subset(len(y), cfg.n_train, seed), subset(len(yt), cfg.n_test, seed + 1)
        return Split(x[tr], y[tr], xt[te], yt[te], cfg.mode(), tr, te)
    if cfg.full:
        tr, te = split_indices(len(y), len(y) - cfg.n_test, cfg.n_test, seed)
    else:
        tr, te = split_indices(len(y), cfg.n_train, cfg.n_test, seed)
    if np.intersect1d(tr, te).size:
        raise DataError("train and test index sets overlap")
    return Split(x[tr], y[tr], x[te], y[te], cfg.mode(), tr, te)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    data_mode: str
    n_train: int
    n_test: int
    clean_accuracy: float
    attacks: list = field(default_factory=list)
    separability: dict | None = None
    pca_explained: list | None = None
    gradient_stats: dict | None = None
    trace: list | None = None
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(_plain(asdict(self)), indent=2, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def attack_row(config: AttackConfig, adv: atk.AdversarialBatch) -> dict:
    return {
        "attack": config.kind,
        "epsilon": config.epsilon,
        "iterations": config.iterations,
        "n": int(len(adv.labels)),
        "clean_accuracy": adv.clean_accuracy,
        "accuracy": adv.accuracy,
        "success_rate": adv.success_rate,
        "mean_linf": float(adv.linf.mean()) if len(adv.linf) else 0.0,
        "mean_l2": float(adv.l2.mean()) if len(adv.l2) else 0.0,
    }


def evaluate_attacks(model: Model, x, y, configs, attack_samples=None, spsa_max_samples=50) -> list[dict]:
    rows = []
    for cfg in configs:
        n = len(y) if attack_samples is None else min(len(y), attack_samples)
        if cfg.kind == "spsa":
            n = min(n, spsa_max_samples)
        started = time.perf_counter()
        adv = atk.run_attack(model, x[:n], y[:n], cfg)
        row = attack_row(cfg, adv)
        log.info("%s %s acc %.4f (%.1fs)", model.name, cfg.label, row["accuracy"], time.perf_counter() - started)
        rows.append(row)
    return rows


def gradient_histogram(model: Model, x, y, bins=None, n_bins: int = 60, limit: float | None = None):
    """Histogram of per-sample input-gradient entries of the cross-entropy."""
    g = model.input_gradient(x, y) * len(x)
    values = g.reshape(-1)
    if bins is None:
        limit = float(np.abs(values).max()) if limit is None else limit
        limit = limit if limit > 0 else 1.0
        bins = np.linspace(-limit, limit, n_bins + 1)
    counts, edges = np.histogram(np.clip(values, bins[0], bins[-1]), bins=bins)
    stats = {
        "mean_abs": float(np.abs(values).mean()),
        "max_abs": float(np.abs(values).max()),
        "zero_fraction": float(np.mean(values == 0.0)),
    }
    return stats, counts, edges


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def train_or_load(config: ExperimentConfig, split: Split, out: Path | None = None):
    model = config.model.build(config.seed)
    trace = None
    if config.checkpoint:
        load_checkpoint(model, config.checkpoint)
    else:
        tcfg = TrainConfig(**{**asdict(config.train), "learn_A": config.model.learn_A,
                              "learn_beta": config.model.learn_beta})
        _, trace = train(model, split.x_train, split.y_train, tcfg)
        if out is not None:
            save_checkpoint(model, out / "model.rbfm")
            trace.to_csv(out / "trace.csv")
    return model, trace


def run_experiment(config: ExperimentConfig) -> EvalReport:
    """Train (or load), evaluate clean and adversarial accuracy, score separability, write artifacts.

    Artifacts in ``config.output_dir``: ``config.json``, ``model.rbfm``,
    ``trace.csv``, ``attacks.csv``, ``separability.csv``, ``pca.csv``,
    ``gradient_hist.csv`` and ``report.json``.  On failure the report is still
    written with its ``error`` field set, then the exception propagates.
    """
    started = time.perf_counter()
    config = replace(config, data=config.data.resolved())
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(_plain(config.to_dict()), indent=2, sort_keys=True))
    report = EvalReport(
        model=config.model.kind, data_mode=config.data.mode(), n_train=0, n_test=0,
        clean_accuracy=float("nan"), config=_plain(config.to_dict()),
        metadata={
            "mutual_info_variant": MI_VARIANT,
            "gn_sigma": "epsilon / 255 on [0, 1] pixels",
            "separability_features": "final tapped layer, true labels as clusters",
        },
    )
    try:
        split = load_split(config.data, config.seed)
        report.n_train, report.n_test = len(split.y_train), len(split.y_test)
        report.data_mode = split.mode
        model, trace = train_or_load(config, split, out)
        if trace is not None:
            report.trace = [dict(zip(trace.header(), row)) for row in trace.rows()]
        xt, yt = split.x_test, split.y_test
        report.clean_accuracy = float(np.mean(model.predict(xt) == yt))
        log.info("%s clean accuracy %.4f", model.name, report.clean_accuracy)

        report.attacks = evaluate_attacks(
            model, xt, yt, config.attacks, config.attack_samples, config.spsa_max_samples
        )
        if report.attacks:
            keys = list(report.attacks[0])
            write_csv(out / "attacks.csv", keys, [[r[k] for k in keys] for r in report.attacks])

        ns = min(len(yt), config.separability_samples)
        feats = feature_tap(model, xt[:ns], -1)
        sep = separability(feats, yt[:ns], model.predict(xt[:ns]))
        report.separability = sep.to_dict()
        write_csv(out / "separability.csv", ["model", *report.separability],
                  [[model.name, *report.separability.values()]])
        proj, ratios = pca_project(feats, 2)
        report.pca_explained = ratios.tolist()
        write_csv(out / "pca.csv", ["pc1", "pc2", "label"],
                  [[float(a), float(b), int(c)] for (a, b), c in zip(proj, yt[:ns])])

        ng = min(len(yt), 500)
        stats, counts, edges = gradient_histogram(model, xt[:ng], yt[:ng])
        report.gradient_stats = {**stats, "bin_edges": edges.tolist(), "counts": counts.tolist()}
        write_csv(out / "gradient_hist.csv", ["bin_left", "bin_right", "count"],
                  [[float(edges[i]), float(edges[i + 1]), int(counts[i])] for i in range(len(counts))])
    except Exception as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        report.wall_clock_seconds = time.perf_counter() - started
        (out / "report.json").write_text(report.to_json())
    return report


# ---------------------------------------------------------------------------
# gradient-masking diagnostics
# ---------------------------------------------------------------------------

EPS_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4)
GN_GRID = (0.0, 10.0, 20.0, 40.0, 80.0, 160.0)
ONE_STEP_VS_ITERATIVE = (
    AttackConfig("bim", 0.3, iterations=5),
    AttackConfig("mim", 0.3, iterations=10, decay=1.0),
    AttackConfig("pgd", 0.1, iterations=40),
)


@dataclass
class Diagnostics:
    one_step_vs_iterative: list
    whitebox_vs_transfer: list
    curves: list
    gradient_hist: list
    gradient_stats: dict
    checks: dict

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def diagnose_gradient_masking(
    models: dict, x, y, eps_grid=EPS_GRID, gn_grid=GN_GRID, out_dir=None,
    iterative=ONE_STEP_VS_ITERATIVE, curve_kinds=("fgsm", "pgd"), pgd_iterations: int = 40,
    cache: dict | None = None,
) -> Diagnostics:
    """Symptom checks for obfuscated gradients on a pair of models.

    ``models`` maps names (e.g. ``"orig"``, ``"prop"``) to trained models.
    Emits (a) one-step vs iterative success rates, (b) white-box vs transfer
    accuracy, (c) accuracy-vs-epsilon curves and (d) input-gradient
    histograms, each as a plot-ready CSV when ``out_dir`` is given.
    ``cache`` may be a dict shared across calls; it is filled with
    ``(name, kind, epsilon, iterations, decay, step_size) -> AdversarialBatch``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    for name, m in models.items():
        acc = float(np.mean(m.predict(x) == y))
        if acc < 0.5:
            warnings.warn(f"model {name} looks untrained (clean accuracy {acc:.3f})", RuntimeWarning)

    cache = {} if cache is None else cache

    def run(name, cfg):
        key = (name, cfg.kind, cfg.epsilon, cfg.iterations, cfg.decay, cfg.step_size)
        if key not in cache:
            cache[key] = atk.run_attack(models[name], x, y, cfg)
        return cache[key]

    one_step = []
    for name in models:
        for it_cfg in iterative:
            f = run(name, AttackConfig("fgsm", it_cfg.epsilon))
            it = run(name, it_cfg)
            one_step.append({
                "model": name, "epsilon": it_cfg.epsilon, "iterative": it_cfg.kind,
                "fgsm_success": f.success_rate, "iterative_success": it.success_rate,
                "iterative_not_weaker": it.success_rate >= f.success_rate,
            })

    transfer = []
    names = list(models)
    for target in names:
        for source in names:
            if source == target:
                continue
            for cfg in (AttackConfig("fgsm", 0.3), *iterative):
                wb = run(target, cfg)
                adv = run(source, cfg)
                t_acc = float(np.mean(models[target].predict(adv.perturbed) == y))
                transfer.append({
                    "target": target, "source": source, "attack": cfg.kind, "epsilon": cfg.epsilon,
                    "whitebox_accuracy": wb.accuracy, "transfer_accuracy": t_acc,
                    "blackbox_not_stronger": t_acc >= wb.accuracy,
                })

    curves = []
    for name in models:
        for kind in curve_kinds:
            for eps in eps_grid:
                if kind == "pgd":
                    cfg = AttackConfig("pgd", eps, iterations=pgd_iterations)
                else:
                    cfg = AttackConfig(kind, eps)
                acc = run(name, cfg).accuracy if eps > 0 else float(np.mean(models[name].predict(x) == y))
                curves.append({"model": name, "attack": kind, "epsilon": eps, "accuracy": acc})
        for eps in gn_grid:
            acc = run(name, AttackConfig("gn", eps)).accuracy
            curves.append({"model": name, "attack": "gn", "epsilon": eps, "accuracy": acc})

    grads = {n: m.input_gradient(x, y) * len(x) for n, m in models.items()}
    limit = max(float(np.abs(g).max()) for g in grads.values()) or 1.0
    edges = np.linspace(-limit, limit, 61)
    hist_rows = []
    stats = {}
    counts = {n: np.histogram(g.reshape(-1), bins=edges)[0] for n, g in grads.items()}
    for n, g in grads.items():
        stats[n] = {"mean_abs": float(np.abs(g).mean()), "max_abs": float(np.abs(g).max())}
    for i in range(len(edges) - 1):
        row = {"bin_left": float(edges[i]), "bin_right": float(edges[i + 1])}
        row.update({f"count_{n}": int(c[i]) for n, c in counts.items()})
        hist_rows.append(row)

    def monotone(name, kind):
        accs = [c["accuracy"] for c in curves if c["model"] == name and c["attack"] == kind]
        return all(b <= a for a, b in zip(accs, accs[1:]))

    checks = {
        "iterative_not_weaker": all(r["iterative_not_weaker"] for r in one_step),
        "blackbox_not_stronger": all(r["blackbox_not_stronger"] for r in transfer),
        "monotone_curves": {f"{n}:{k}": monotone(n, k) for n in models for k in (*curve_kinds, "gn")},
    }
    diag = Diagnostics(one_step, transfer, curves, hist_rows, stats, checks)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for fname, rows in (
            ("one_step_vs_iterative.csv", one_step),
            ("whitebox_vs_transfer.csv", transfer),
            ("accuracy_vs_epsilon.csv", curves),
            ("gradient_hist.csv", hist_rows),
        ):
            if rows:
                keys = list(rows[0])
                write_csv(out / fname, keys, [[r[k] for k in keys] for r in rows])
        (out / "diagnostics.json").write_text(json.dumps(diag.to_dict(), indent=2, sort_keys=True))
    return diag


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_GRID = ((False, True), (True, False), (False, False), (True, True))


def ablate(config: ExperimentConfig, split: Split | None = None, attack: AttackConfig | None = None) -> list[dict]:
    """Train PROP under every {learn_A, learn_beta} combination and score it."""
    split = load_split(config.data, config.seed) if split is None else split
    rows = []
    for learn_A, learn_beta in ABLATION_GRID:
        mcfg = ModelConfig("prop", list(config.model.P), learn_A, learn_beta, config.model.last_only)
        cfg = ExperimentConfig(model=mcfg, train=config.train, data=config.data, seed=config.seed)
        model, trace = train_or_load(cfg, split)
        row = {
            "learn_A": learn_A, "learn_beta": learn_beta,
            "clean_accuracy": float(np.mean(model.predict(split.x_test) == split.y_test)),
            "final_psi_delta": trace.psi_deltas[-1] if trace and trace.psi_deltas else [],
        }
        if attack is not None:
            row[f"{attack.kind}_accuracy"] = atk.run_attack(model, split.x_test, split.y_test, attack).accuracy
        log.info("ablation %s", row)
        rows.append(row)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k in rows[0] if k != "final_psi_delta"]
    write_csv(out / "ablation.csv", keys, [[r[k] for k in keys] for r in rows])
    return rows
