"""End-to-end stages over a run directory.

Each stage reads what earlier stages wrote and writes its own outputs
atomically, so any stage can be rerun on its own:

=============  ==========================================================
synth          clean.oqai, split.csv, samples.oqai, manifest.csv
pretrain       model.oqap[EXT1], features.oqaf, manifest.csv with gt
train-rqa      model.oqap[RQA1] (weights + class templates), rqa_history.csv
train-aqa      model.oqap[AQA1], aqa_history.csv
score          scores.csv
eval           report.csv/.txt (ablation.csv/.txt in ablation mode)
gate           gate.csv/.txt
=============  ==========================================================
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import aqa, dataio, evalgate, extractor, rqa
from .checkpoint import read_container, read_features, update_container, write_features
from .config import RunConfig
from .errors import ConsistencyError, ContractError

log = logging.getLogger(__name__)

SPLIT_FIELDS = ["clean_id", "label", "split"]
SCORE_FIELDS = ["sample_id", "q_rel", "Q_abs", "confidence", "delta", "th"]
N_CLASSES = extractor.N_CLASSES

# fixed offsets keep the streams of different stages apart under one seed
_SEED_SPLIT, _SEED_SYNTH, _SEED_PRETRAIN, _SEED_RQA, _SEED_TMPL, _SEED_AQA = 1, 2, 3, 4, 5, 6
_SEED_INTRA, _SEED_INTER, _SEED_SEQ = 7, 8, 9


def _seed(cfg: RunConfig, offset: int) -> int:
    return cfg.seed * 1000 + offset


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ContractError(f"missing {path.name} in {path.parent}; run '{stage}' first")
    return path


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- run state

@dataclass
class Run:
    """Lazy view of a run directory."""
    cfg: RunConfig

    @property
    def dir(self) -> Path:
        return self.cfg.out_dir

    def path(self, name: str) -> Path:
        return self.dir / name

    @cached_property
    def clean_images(self) -> np.ndarray:
        return dataio.read_oqai(_require(self.path("clean.oqai"), "synth"))

    @cached_property
    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """(clean labels, boolean train mask) indexed by clean id."""
        with open(_require(self.path("split.csv"), "synth"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        if [int(r["clean_id"]) for r in rows] != list(range(len(rows))):
            raise ConsistencyError("split.csv must list clean ids 0..n-1 in order")
        return (np.array([int(r["label"]) for r in rows]),
                np.array([r["split"] == "train" for r in rows]))

    @cached_property
    def samples(self) -> list[dataio.LabeledSample]:
        images = dataio.read_oqai(_require(self.path("samples.oqai"), "synth"))
        return dataio.read_manifest(_require(self.path("manifest.csv"), "synth"), images)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])

    @cached_property
    def train_mask(self) -> np.ndarray:
        _, is_train = self.split
        return is_train[[s.clean_id for s in self.samples]]

    @cached_property
    def sections(self) -> dict:
        return read_container(_require(self.path("model.oqap"), "pretrain"))

    def section(self, tag: str, stage: str) -> list:
        if tag not in self.sections:
            raise ContractError(f"model.oqap has no {tag} section; run '{stage}' first")
        return self.sections[tag]

    @cached_property
    def ext(self) -> extractor.ExtractorParams:
        return extractor.ExtractorParams.from_arrays(self.section("EXT1", "pretrain"))

    @cached_property
    def rqa_params(self) -> rqa.RqaParams:
        return rqa.RqaParams.from_arrays(self.section("RQA1", "train-rqa")[:-1])

    @cached_property
    def templates(self) -> np.ndarray:
        """C x classes; column c is the template of class c."""
        return self.section("RQA1", "train-rqa")[-1]

    @cached_property
    def aqa_params(self) -> aqa.AqaParams:
        return aqa.AqaParams.from_arrays(self.section("AQA1", "train-aqa"))

    @cached_property
    def feats(self) -> np.ndarray:
        F = read_features(_require(self.path("features.oqaf"), "pretrain"))
        if F.shape[1] != len(self.samples):
            raise ConsistencyError(f"features.oqaf has {F.shape[1]} rows for {len(self.samples)} samples")
        return F

    @cached_property
    def recognition(self) -> tuple[np.ndarray, np.ndarray]:
        """(predicted class, softmax confidence) per sample, from the stored features."""
        logits = extractor.head_logits(self.ext, self.feats)
        z = np.exp(logits - logits.max(axis=0))
        probs = z / z.sum(axis=0)
        return probs.argmax(axis=0), probs.max(axis=0)

    @cached_property
    def delta(self) -> np.ndarray:
        """-1 where the recognizer is right, +1 where it is wrong."""
        return np.where(self.recognition[0] == self.labels, -1.0, 1.0)

    @cached_property
    def q_rel(self) -> np.ndarray:
        """Relative score in [0, 1] against the sample's own class template."""
        return rel_scores(self.templates, self.feats, self.labels)

    @cached_property
    def Q_abs(self) -> np.ndarray:
        return aqa.absolute_scores(self.aqa_params, self.feats)


def rel_scores(templates: np.ndarray, F: np.ndarray, classes: np.ndarray) -> np.ndarray:
    out = np.empty(F.shape[1])
    for c in np.unique(classes):
        ids = np.flatnonzero(classes == c)
        out[ids] = rqa.relative_scores(templates[:, c], F[:, ids])
    return rqa.to_unit(out)


# ---------------------------------------------------------------- stages

def load_clean(cfg: RunConfig) -> list[tuple[np.ndarray, int]]:
    """First ``n_clean`` IDX digits when available, else procedural glyphs."""
    found = dataio.find_idx(cfg.data_dir) if cfg.data_dir else None
    if found:
        digits = dataio.load_idx(*found)
        if len(digits) < cfg.n_clean:
            raise ContractError(f"{found[0]} holds {len(digits)} images, need {cfg.n_clean}")
        log.info("using %d IDX digits from %s", cfg.n_clean, found[0])
        return digits[:cfg.n_clean]
    log.info("no IDX files found; rendering %d procedural digits", cfg.n_clean)
    return dataio.procedural_digits(cfg.n_clean, _seed(cfg, _SEED_SYNTH))


def synth(cfg: RunConfig) -> Path:
    clean = load_clean(cfg)
    labels = np.array([lab for _, lab in clean])
    train, _ = dataio.split_train_test(labels, _seed(cfg, _SEED_SPLIT))
    is_train = np.zeros(len(clean), bool)
    is_train[train] = True
    samples = dataio.synth_dataset(clean, cfg.kind, _seed(cfg, _SEED_SYNTH))
    out = cfg.out_dir
    dataio.write_oqai(out / "clean.oqai", np.stack([img for img, _ in clean]))
    dataio.atomic_write(out / "split.csv", _csv_text(
        SPLIT_FIELDS, [(i, int(lab), "train" if t else "test") for i, (lab, t) in enumerate(zip(labels, is_train))]))
    dataio.write_oqai(out / "samples.oqai", np.stack([s.image for s in samples]))
    dataio.write_manifest(out / "manifest.csv", samples)
    dataio.atomic_write(out / "config.txt", cfg.to_text())
    log.info("synth: %d clean, %d %s samples", len(clean), len(samples), cfg.kind)
    return out / "manifest.csv"


def pretrain(cfg: RunConfig) -> Path:
    run = Run(cfg)
    labels, is_train = run.split
    params = extractor.pretrain(run.clean_images[is_train], labels[is_train], epochs=cfg.pretrain_epochs,
                                seed=_seed(cfg, _SEED_PRETRAIN), feature_dim=cfg.feature_dim,
                                hidden=cfg.hidden, lr=cfg.pretrain_lr)
    ckpt = cfg.out_dir / "model.oqap"
    if ckpt.exists():
        ckpt.unlink()  # later sections depend on this extractor
    update_container(ckpt, "EXT1", params.arrays())
    # continue with the stored (f32) weights so every later stage sees the same extractor
    params = extractor.ExtractorParams.from_arrays(read_container(ckpt)["EXT1"])
    samples = dataio.make_ground_truth(run.samples, run.clean_images, params)
    dataio.write_manifest(cfg.out_dir / "manifest.csv", samples)
    write_features(cfg.out_dir / "features.oqaf", extractor.features(params, np.stack([s.image for s in samples])))
    log.info("pretrain: clean test accuracy %.3f",
             extractor.accuracy(params, run.clean_images[~is_train], labels[~is_train]))
    return ckpt


def train_rqa(cfg: RunConfig) -> Path:
    run = Run(cfg)
    F, labels = run.feats[:, run.train_mask], run.labels[run.train_mask]
    seed = _seed(cfg, _SEED_RQA)
    init = rqa.RqaParams.init(np.random.default_rng(seed), cfg.feature_dim, cfg.heads)
    config = rqa.RqaConfig(lr=cfg.rqa_lr, decay_rate=cfg.rqa_decay_rate, decay_every=cfg.rqa_decay_every,
                           batch=cfg.rqa_batch, epochs=cfg.rqa_epochs, lambda_c=cfg.lambda_c,
                           attention=cfg.attention)
    params, hist = rqa.train_rqa(init, F, labels, (run.ext.wh, run.ext.bh), config, seed)
    tmpl = rqa.class_templates(params, F, labels, _seed(cfg, _SEED_TMPL), cfg.template_triplets, cfg.attention)
    missing = sorted(set(range(N_CLASSES)) - set(tmpl))
    if missing:
        raise ConsistencyError(f"no training samples for classes {missing}")
    T = np.stack([tmpl[c] for c in range(N_CLASSES)], axis=1)
    update_container(cfg.out_dir / "model.oqap", "RQA1", params.arrays() + [T])
    dataio.atomic_write(cfg.out_dir / "rqa_history.csv", _csv_text(
        ["epoch", "lr", "total", "recog", "consis"],
        [(e, f"{lr:.6g}", f"{t:.6f}", f"{r:.6f}", f"{c:.6f}")
         for e, lr, t, r, c in zip(hist.epoch, hist.lr, hist.total, hist.recog, hist.consis)]))
    return cfg.out_dir / "model.oqap"


def fit_aqa(run: Run, cfg: RunConfig, use_intra: bool, use_inter: bool,
            on_epoch=None) -> tuple[aqa.AqaParams, aqa.AqaHistory]:
    """Train an absolute scorer on the training split with the given terms switched on."""
    m = run.train_mask
    F = run.feats[:, m]
    seed = _seed(cfg, _SEED_AQA)
    init = aqa.AqaParams.init(np.random.default_rng(seed), cfg.feature_dim, cfg.aqa_hidden).fit_input(F)
    hyper = aqa.AqaHyper(eps=cfg.eps, zeta=cfg.zeta, lambda_intra=cfg.lambda_intra,
                         lambda_a1=cfg.lambda_a1, lambda_a2=cfg.lambda_a2, entropy_floor=cfg.entropy_floor)
    config = aqa.AqaConfig(lr=cfg.aqa_lr, weight_decay=cfg.aqa_weight_decay, batch=cfg.aqa_batch,
                           epochs=cfg.aqa_epochs, use_intra=use_intra, use_inter=use_inter,
                           average_from=cfg.aqa_average_from)
    return aqa.train_aqa(init, F, run.q_rel[m], run.delta[m], run.labels[m], hyper, config, seed, on_epoch)


def train_aqa(cfg: RunConfig) -> Path:
    run = Run(cfg)
    params, hist = fit_aqa(run, cfg, cfg.use_intra, cfg.use_inter)
    update_container(cfg.out_dir / "model.oqap", "AQA1", params.arrays())
    dataio.atomic_write(cfg.out_dir / "aqa_history.csv", _csv_text(
        ["epoch", "total", "th"],
        [(e, f"{t:.6f}", f"{th:.6f}") for e, t, th in zip(hist.epoch, hist.total, hist.th)]))
    return cfg.out_dir / "model.oqap"


def score(cfg: RunConfig, input_path=None, output_path=None) -> Path:
    """Score the run's samples, or any OQAI image store.

    For the run's own samples q_rel uses the true-class template and delta
    is filled in; for a foreign store the recognized class picks the
    template and delta is left empty.
    """
    run = Run(cfg)
    th = run.aqa_params.th
    if input_path is None:
        ids = [s.sample_id for s in run.samples]
        q, Q, conf, delta = run.q_rel, run.Q_abs, run.recognition[1], run.delta
        deltas = [f"{int(d)}" for d in delta]
    else:
        images = dataio.read_oqai(input_path)
        F = extractor.features(run.ext, images)
        pred, conf = extractor.predict(run.ext, images)
        ids = range(len(images))
        q, Q = rel_scores(run.templates, F, pred), aqa.absolute_scores(run.aqa_params, F)
        deltas = [""] * len(images)
    rows = [(i, f"{a:.6f}", f"{b:.6f}", f"{c:.6f}", d, f"{th:.6f}")
            for i, a, b, c, d in zip(ids, q, Q, conf, deltas)]
    out = Path(output_path) if output_path else cfg.out_dir / "scores.csv"
    dataio.atomic_write(out, _csv_text(SCORE_FIELDS, rows))
    return out


def _test_groups(run: Run, cfg: RunConfig):
    test = [s for s, m in zip(run.samples, run.train_mask) if not m]
    return {"Intra": dataio.build_groups(test, "Intra", cfg.n_intra, _seed(cfg, _SEED_INTRA)),
            "Inter": dataio.build_groups(test, "Inter", cfg.n_inter, _seed(cfg, _SEED_INTER))}


def _by_id(values: np.ndarray):
    return lambda members: values[[m.sample_id for m in members]]


def evaluate(cfg: RunConfig) -> Path:
    run = Run(cfg)
    groups = _test_groups(run, cfg)
    report = evalgate.MetricReport()
    gt = np.array([s.gt_score for s in run.samples])
    scorers = {"RQA": run.q_rel, "AQA": run.Q_abs, "PCW": run.recognition[1], "GT": gt}
    for set_name, gs in groups.items():
        for name, values in scorers.items():
            report.add(cfg.kind, set_name, name, evalgate.evaluate_groups(gs, _by_id(values)))
    evalgate.emit_report(report, cfg.out_dir / "report")
    if cfg.ablation:
        evalgate.emit_report(ablation(run, cfg, groups), cfg.out_dir / "ablation")
    return cfg.out_dir / "report.csv"


ABLATION_VARIANTS = (("align", False, False), ("align+intra", True, False),
                     ("align+inter", False, True), ("full", True, True))


def ablation(run: Run, cfg: RunConfig, groups) -> evalgate.MetricReport:
    """Retrain the absolute scorer once per loss combination and evaluate each."""
    report = evalgate.MetricReport()
    for name, ui, ue in ABLATION_VARIANTS:
        params, _ = fit_aqa(run, cfg, ui, ue)
        Q = aqa.absolute_scores(params, run.feats)
        for set_name, gs in groups.items():
            report.add(cfg.kind, set_name, name, evalgate.evaluate_groups(gs, _by_id(Q)))
        log.info("ablation %s done", name)
    return report


def build_sequences(run: Run, cfg: RunConfig) -> list[evalgate.SequenceSample]:
    """Frames are distinct degraded variants of one test clean image."""
    rng = np.random.default_rng(_seed(cfg, _SEED_SEQ))
    by_clean: dict[int, list[int]] = {}
    for i, (s, m) in enumerate(zip(run.samples, run.train_mask)):
        if not m:
            by_clean.setdefault(s.clean_id, []).append(i)
    pool = sorted(c for c, v in by_clean.items() if len(v) >= cfg.seq_min)
    if not pool:
        raise ContractError(f"no test image has {cfg.seq_min} variants")
    chosen = rng.choice(pool, cfg.n_sequences, replace=len(pool) < cfg.n_sequences)
    pred, conf = run.recognition
    seqs = []
    for c in chosen:
        ids = by_clean[int(c)]
        n = int(rng.integers(cfg.seq_min, min(cfg.seq_max, len(ids)) + 1))
        idx = rng.choice(ids, n, replace=False)
        seqs.append(evalgate.SequenceSample([run.samples[i] for i in idx], run.samples[idx[0]].label,
                                            pred[idx], conf[idx]))
    return seqs


def _frame_scores(values: np.ndarray):
    return lambda seq: values[[f.sample_id for f in seq.frames]]


def gate(cfg: RunConfig) -> Path:
    run = Run(cfg)
    seqs = build_sequences(run, cfg)
    th = run.aqa_params.th
    Q = _frame_scores(run.Q_abs)
    gt = np.array([s.gt_score for s in run.samples])
    report = evalgate.MetricReport()
    n = len(seqs)
    report.add_value(cfg.kind, "Sequences", "AQA", "th", th, n)
    report.add_value(cfg.kind, "Sequences", "ungated", "SRA", evalgate.sra(seqs, Q, -np.inf), n)
    report.add_value(cfg.kind, "Sequences", "AQA-gated", "SRA", evalgate.sra(seqs, Q, th), n)
    for name, values in (("AQA", run.Q_abs), ("PCW", run.recognition[1]), ("RQA", run.q_rel), ("GT", gt)):
        report.add_value(cfg.kind, "Sequences", name, "QSHR", evalgate.qshr(seqs, _frame_scores(values)), n)
    evalgate.emit_report(report, cfg.out_dir / "gate")
    return cfg.out_dir / "gate.csv"


STAGES = {"synth": synth, "pretrain": pretrain, "train-rqa": train_rqa, "train-aqa": train_aqa,
          "score": score, "eval": evaluate, "gate": gate}
