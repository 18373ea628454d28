"""End-to-end orchestration: load-or-generate embeddings, search, refine,
score, threshold, evaluate, and write machine-readable reports.

All stage randomness derives from the single run seed through fixed
per-stage spawn keys, so stages run individually produce the same results as
the full pipeline. Reports are JSON with sorted keys and no timestamps;
identical configs and seeds yield byte-identical files in single-threaded
mode.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import gmm, metrics, refine, scoring, search, store, synth
from .core import PredictionConfig

STAGE_KEYS = {"synth": 0, "search": 1, "refine": 2, "eval": 3}

REPORT_NAMES = {
    "search": "search_report.json",
    "refine": "refine_report.json",
    "adapter": "adapter.embx",
    "scores": "scores.csv",
    "threshold": "threshold_report.json",
    "eval": "eval_report.json",
    "eval_csv": "eval_report.csv",
    "plot": "plot_data.csv",
}


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGE_KEYS[stage]]).generate_state(1)[0])


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    threads: int = 0
    variant: str = "unims"
    score_on_raw: bool = False
    inputs: dict | None = None
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    search: search.SearchConfig = field(default_factory=search.SearchConfig)
    train: refine.TrainConfig = field(default_factory=refine.TrainConfig)
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)

    def validate(self):
        if self.variant.lower() not in scoring.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.inputs is not None:
            for role, path in self.inputs.items():
                if role not in synth.ROLE_ORDER:
                    raise ValueError(f"unknown input role {role!r}")
                if not Path(path).exists():
                    raise FileNotFoundError(f"input {role}: {path}")


def _section(data, name):
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"config section [{name}] must be a table")
    return value


def config_from_toml(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as f:
        data = tomllib.load(f)

    run = _section(data, "run")
    pred = _section(data, "prediction")
    srch = _section(data, "search")
    trn = _section(data, "train")
    syn = dict(_section(data, "synth"))
    split_tbl = syn.pop("split", None)
    inputs = _section(data, "inputs") or None

    cfg = RunConfig(
        seed=int(run.get("seed", 0)),
        out_dir=str(run.get("out_dir", "runs/out")),
        threads=int(run.get("threads", 0)),
        variant=str(run.get("variant", "unims")),
        score_on_raw=bool(run.get("score_on_raw", False)),
        inputs=inputs,
        prediction=PredictionConfig(**pred),
        search=search.SearchConfig(**srch),
        train=refine.TrainConfig(**trn),
        synth=synth.SynthConfig(
            split=metrics.ScenarioSplit(**split_tbl) if split_tbl else
            metrics.ScenarioSplit(10, 5, 15),
            **syn),
    )
    cfg.validate()
    return cfg


DEFAULT_CONFIG_TOML = """\
# tasc run configuration

[run]
seed = 0
out_dir = "runs/out"
threads = 0            # 0 = library default; 1 = bitwise-reproducible runs
variant = "unims"      # unims | ms-s | ms-t | ms-s-weighted | ms-t-weighted
score_on_raw = false   # true scores raw target embeddings (ablation)

# Point all four roles at EMBX files to run on real extractor output;
# leave the table empty to generate synthetic data from [synth].
[inputs]
# source_images = "data/source_images.embx"
# target_images = "data/target_images.embx"
# source_classnames = "data/source_classnames.embx"
# noun_vocab = "data/noun_vocab.embx"

[prediction]
tau = 0.02
lambda_div = 0.6

[search]
k0 = 100
n_c = 300
gamma_ent = 0.3
n_outer = 20

[train]
eta0 = 1e-4
epochs = 30
batch_size = 64

[synth]
dims = 512
vocab_size = 400
samples_per_class = 30
cluster_spread = 0.05
shift_angle = 0.2
shift_noise = 0.02
similarity_cap = 0.5

[synth.split]
n_common = 10
n_source_private = 5
n_target_private = 15
"""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class Session:
    """Normalized matrices, manifest payloads, and the similarity cache."""

    source_images: store.EmbeddingMatrix
    target_images: store.EmbeddingMatrix
    classnames: store.EmbeddingMatrix
    nouns: store.EmbeddingMatrix
    source_labels: np.ndarray
    target_labels: np.ndarray | None
    class_names: list
    noun_names: list
    cache: store.SimilarityCache

    @property
    def n_source(self):
        return self.classnames.rows


def load_bundle(paths: dict) -> dict:
    """Load the four role files; `paths` maps role -> EMBX path."""
    bundle = {}
    for role in synth.ROLE_ORDER:
        if role not in paths:
            raise FileNotFoundError(f"missing input for role {role!r}")
        matrix, manifest = store.load_embeddings(paths[role])
        if manifest.role != role:
            raise store.ConsistencyError(
                f"{paths[role]}: expected role {role!r}, manifest says {manifest.role!r}")
        bundle[role] = (matrix, manifest)
    return bundle


def bundle_paths(data_dir) -> dict:
    data_dir = Path(data_dir)
    return {role: data_dir / f"{role}.embx" for role in synth.ROLE_ORDER}


def build_session(bundle: dict) -> Session:
    dims = {role: pair[0].dims for role, pair in bundle.items()}
    if len(set(dims.values())) != 1:
        raise store.ConsistencyError(f"embedding dims differ across roles: {dims}")
    src_m, src_man = bundle["source_images"]
    tgt_m, tgt_man = bundle["target_images"]
    cls_m, cls_man = bundle["source_classnames"]
    noun_m, noun_man = bundle["noun_vocab"]
    if src_man.labels is None:
        raise store.ConsistencyError("source_images manifest must carry labels")
    src_labels = np.asarray(src_man.labels, dtype=np.int64)
    if src_labels.min() < 0 or src_labels.max() >= cls_man.count:
        raise store.ConsistencyError("source labels out of class-name range")

    source = store.l2_normalize(src_m)
    target = store.l2_normalize(tgt_m)
    classnames = store.l2_normalize(cls_m)
    nouns = store.l2_normalize(noun_m)
    texts = store.stack_texts(classnames, nouns)
    cache = store.build_similarity_cache(target, texts, n_source=classnames.rows)
    return Session(
        source_images=source, target_images=target, classnames=classnames,
        nouns=nouns, source_labels=src_labels,
        target_labels=None if tgt_man.labels is None
        else np.asarray(tgt_man.labels, dtype=np.int64),
        class_names=list(cls_man.names), noun_names=list(noun_man.names),
        cache=cache)


def search_report_dict(state, estimate, trace, session: Session) -> dict:
    names = []
    for col in state.T:
        col = int(col)
        if col < session.n_source:
            names.append(session.class_names[col])
        else:
            names.append(session.noun_names[col - session.n_source])
    return {
        "T_columns": state.T, "T_names": names, "r": state.r,
        "n_source": state.n_source, "K": estimate.K, "K_com": estimate.K_com,
        "K_pri": estimate.K_pri, "loss_trace": trace.losses,
        "k_trace": trace.k_values,
    }


def state_from_report(report: dict) -> search.SearchState:
    return search.SearchState(
        T=np.asarray(report["T_columns"], dtype=np.int64),
        r=np.asarray(report["r"], dtype=np.int8),
        n_source=int(report["n_source"]))


def stage_synth(cfg: RunConfig, data_dir):
    syn_cfg = dataclasses.replace(cfg.synth, seed=stage_seed(cfg.seed, "synth"))
    result = synth.generate(syn_cfg)
    synth.write_bundle(result.bundle, data_dir)
    return result


def stage_search(session: Session, cfg: RunConfig):
    srch = dataclasses.replace(cfg.search, seed=stage_seed(cfg.seed, "search"))
    state, estimate, trace = search.run_search(session.cache, srch, cfg.prediction)
    return state, estimate, trace


def active_target_centers(session: Session, state: search.SearchState):
    return session.cache.texts.data[state.active_columns()].astype(np.float64)


def stage_refine(session: Session, state, cfg: RunConfig):
    trn = dataclasses.replace(cfg.train, seed=stage_seed(cfg.seed, "refine"))
    adapter = refine.Adapter.identity(session.source_images.dims)
    return refine.train(
        adapter, session.source_images.data, session.source_labels,
        session.target_images.data,
        session.classnames.data.astype(np.float64),
        active_target_centers(session, state), trn, cfg.prediction)


def adapted_target_embeddings(session: Session, adapter, cfg: RunConfig):
    if adapter is None or cfg.score_on_raw:
        return session.target_images.data.astype(np.float64)
    return refine.forward(adapter, session.target_images.data)


def stage_score(session: Session, state, adapter, cfg: RunConfig):
    src_centers = session.classnames.data.astype(np.float64)
    tgt_centers = active_target_centers(session, state)
    ev = scoring.entropy_vectors(src_centers, tgt_centers, cfg.prediction.tau)
    Z = adapted_target_embeddings(session, adapter, cfg)
    return ev, scoring.score(Z, src_centers, tgt_centers, ev, cfg.variant)


def stage_threshold(score_set, estimate):
    return gmm.select_threshold(score_set.scores, estimate.K_com, estimate.K_pri)


def threshold_report_dict(report: gmm.ThresholdReport) -> dict:
    params = None
    if report.params is not None:
        params = dataclasses.asdict(report.params)
    gamma = report.threshold.gamma
    return {
        "weights": list(report.weights), "params": params,
        "gamma": gamma if np.isfinite(gamma) else None,
        "mode": report.threshold.mode, "loglik_trace": report.loglik_trace,
    }


def infer_split(target_labels, n_source: int) -> metrics.ScenarioSplit:
    uniq = np.unique(np.asarray(target_labels))
    n_common = int((uniq < n_source).sum())
    n_tp = int((uniq >= n_source).sum())
    return metrics.ScenarioSplit(n_common=n_common,
                                 n_source_private=n_source - n_common,
                                 n_target_private=n_tp)


def stage_eval(session: Session, adapter, score_set, threshold: gmm.Threshold,
               cfg: RunConfig) -> metrics.EvalReport:
    if session.target_labels is None:
        raise ValueError("target_images manifest carries no labels; cannot evaluate")
    gt = session.target_labels
    Z = adapted_target_embeddings(session, adapter, cfg)
    sims = Z @ session.classnames.data.astype(np.float64).T
    preds = sims.argmax(axis=1)
    mask = gmm.predict_known(score_set.scores, threshold)
    split = infer_split(gt, session.n_source)
    private = gt >= session.n_source
    private_emb = Z[private] if private.any() else None
    return metrics.evaluate(preds, gt, mask, score_set.scores, private_emb,
                            split, seed=stage_seed(cfg.seed, "eval"))


def write_eval_csv(path, report: metrics.EvalReport):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(report.CSV_FIELDS)
        writer.writerow(report.to_csv_row())


def write_plot_data(path, trace, refine_curve, score_set, bins: int = 30):
    """Loss/K traces, refinement curve, and the score histogram as one CSV."""
    counts, edges = np.histogram(score_set.scores, bins=bins)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "x", "y"])
        for i, loss in enumerate(trace.losses):
            writer.writerow(["loss_trace", i, repr(float(loss))])
        for i, k in enumerate(trace.k_values):
            writer.writerow(["k_trace", i, k])
        for i, loss in enumerate(refine_curve):
            writer.writerow(["refine_loss", i, repr(float(loss))])
        for left, count in zip(edges[:-1], counts):
            writer.writerow(["score_hist", repr(float(left)), int(count)])


def run_pipeline(cfg: RunConfig, out_dir=None) -> dict:
    """Execute every stage and write all reports; returns artifact paths."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}

    def run_stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - re-tagged with the stage name
            raise StageError(name, exc) from exc

    if cfg.inputs is None:
        data_dir = out / "data"
        run_stage("synth", lambda: stage_synth(cfg, data_dir))
        paths = bundle_paths(data_dir)
    else:
        paths = dict(cfg.inputs)
    bundle = run_stage("load", lambda: load_bundle(paths))
    session = run_stage("load", lambda: build_session(bundle))

    state, estimate, trace = run_stage("search", lambda: stage_search(session, cfg))
    search_path = out / REPORT_NAMES["search"]
    write_json(search_path, search_report_dict(state, estimate, trace, session))
    artifacts["search"] = search_path

    adapter, curve = run_stage("refine", lambda: stage_refine(session, state, cfg))
    adapter_path = out / REPORT_NAMES["adapter"]
    refine.save_adapter(adapter_path, adapter)
    refine_path = out / REPORT_NAMES["refine"]
    write_json(refine_path,
               {"loss_curve": curve, "epochs": cfg.train.epochs,
                "batch_size": cfg.train.batch_size, "eta0": cfg.train.eta0})
    artifacts["adapter"] = adapter_path
    artifacts["refine"] = refine_path

    _, score_set = run_stage("score", lambda: stage_score(session, state, adapter, cfg))
    scores_path = out / REPORT_NAMES["scores"]
    scoring.write_scores_csv(scores_path, score_set)
    artifacts["scores"] = scores_path

    thr_report = run_stage("threshold", lambda: stage_threshold(score_set, estimate))
    threshold_path = out / REPORT_NAMES["threshold"]
    write_json(threshold_path, threshold_report_dict(thr_report))
    artifacts["threshold"] = threshold_path

    if session.target_labels is not None:
        report = run_stage("eval", lambda: stage_eval(
            session, adapter, score_set, thr_report.threshold, cfg))
        eval_path = out / REPORT_NAMES["eval"]
        write_json(eval_path, report.to_json())
        write_eval_csv(out / REPORT_NAMES["eval_csv"], report)
        artifacts["eval"] = eval_path

    write_plot_data(out / REPORT_NAMES["plot"], trace, curve, score_set)
    artifacts["plot"] = out / REPORT_NAMES["plot"]
    return artifacts
