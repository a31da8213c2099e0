"""Recording-level evaluation: majority voting over windows, k-fold CV."""

import os
from dataclasses import dataclass, field

import numpy as np

from .architectures import WindowDataset, build_model
from .data import ABNORMAL, NORMAL
from .errors import DataError, TrainingDiverged
from .net import TrainConfig, init_weights, predict_batch, train_network

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "macc")


def majority_vote(probs, threshold: float = 0.5) -> str:
    """Vote a recording's label from its window probabilities.

    A window counts as abnormal when prob >= threshold; an exact tie between
    the window camps also resolves to abnormal.
    """
    probs = np.asarray(probs)
    if probs.size == 0:
        raise DataError("no windows to vote on")
    n_abnormal = int(np.sum(probs >= threshold))
    return ABNORMAL if 2 * n_abnormal >= probs.size else NORMAL


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def metrics_from_confusion(conf: Confusion) -> dict:
    """Accuracy, sensitivity, specificity and their mean (macc).

    Abnormal is the positive class. A zero denominator yields nan, which
    aggregation later skips.
    """
    if conf.total == 0:
        raise DataError("confusion matrix is empty")

    def _ratio(num, den):
        return num / den if den else float("nan")

    sens = _ratio(conf.tp, conf.tp + conf.fn)
    spec = _ratio(conf.tn, conf.tn + conf.fp)
    return {"accuracy": (conf.tp + conf.tn) / conf.total,
            "sensitivity": sens,
            "specificity": spec,
            "macc": (sens + spec) / 2.0}


@dataclass
class FoldResult:
    fold: int
    status: str = "ok"  # ok | diverged
    confusion: Confusion = field(default_factory=Confusion)
    metrics: dict = field(default_factory=dict)


def score_recordings(window_probs: dict, recording_labels: dict,
                     threshold: float = 0.5) -> Confusion:
    """Confusion over recordings given {rec_id: [probs]} and true labels."""
    conf = Confusion()
    for rec_id, probs in window_probs.items():
        voted = majority_vote(probs, threshold)
        truth = recording_labels[rec_id]
        if truth == ABNORMAL:
            if voted == ABNORMAL:
                conf.tp += 1
            else:
                conf.fn += 1
        else:
            if voted == NORMAL:
                conf.tn += 1
            else:
                conf.fp += 1
    return conf


def default_trainer(variant_name: str, cfg: TrainConfig, out_dir=None,
                    resume: bool = True):
    """Build the standard trainer closure used by run_cv.

    Per fold it either loads previously saved weights (resume) or trains from
    a fold-specific seed, saving weights and per-epoch metrics when out_dir
    is given. Returns a predict function.
    """
    from .net import load_weights, save_weights  # local to keep import light

    def train_fold(fold, train, val):
        x_tr, y_tr, aux_tr = train
        x_val, y_val, aux_val = val
        spec = build_model(variant_name)
        weights_path = None
        if out_dir is not None:
            weights_path = os.path.join(out_dir, "weights", f"fold_{fold}.pcgw")
        if resume and weights_path is not None and os.path.exists(weights_path):
            weights = load_weights(weights_path)
        else:
            fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + fold})
            weights = init_weights(spec, seed=fold_cfg.seed)
            metrics_path = None
            if out_dir is not None:
                metrics_path = os.path.join(out_dir, "metrics",
                                            f"fold_{fold}_epochs.csv")
            weights, _ = train_network(spec, weights, x_tr, y_tr, x_val, y_val,
                                       fold_cfg, aux_train=aux_tr,
                                       aux_val=aux_val, metrics_path=metrics_path)
            if weights_path is not None:
                save_weights(weights_path, weights)
        return lambda xs, aux=None: predict_batch(spec, weights, xs, aux=aux)

    return train_fold


def run_cv(dataset: WindowDataset, plan, variant_name: str, cfg: TrainConfig,
           trainer=None, out_dir=None, threshold: float = 0.5):
    """Train and evaluate each fold on its validation windows plus the rest
    partition, voting at recording level. Returns (fold_results, summary)."""
    if trainer is None:
        trainer = default_trainer(variant_name, cfg, out_dir=out_dir)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "weights"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "metrics"), exist_ok=True)

    rec_label = {}
    for rid, lab in zip(dataset.recording_ids, dataset.labels):
        rec_label[rid] = ABNORMAL if lab == 1 else NORMAL

    results = []
    for fold, (train_ids, val_ids) in enumerate(plan.folds):
        tr = dataset.rows_for(train_ids)
        ev = dataset.rows_for(tuple(val_ids) + tuple(plan.rest_ids))
        va = dataset.rows_for(val_ids)
        aux = dataset.aux
        train = (dataset.x[tr], dataset.labels[tr],
                 None if aux is None else aux[tr])
        val = (dataset.x[va], dataset.labels[va],
               None if aux is None else aux[va])
        try:
            predict_fn = trainer(fold, train, val)
            probs = predict_fn(dataset.x[ev],
                               None if aux is None else aux[ev])
        except TrainingDiverged:
            results.append(FoldResult(fold=fold, status="diverged"))
            continue
        by_rec = {}
        for row, p in zip(ev, probs):
            by_rec.setdefault(dataset.recording_ids[row], []).append(p)
        conf = score_recordings(by_rec, rec_label, threshold)
        results.append(FoldResult(fold=fold, confusion=conf,
                                  metrics=metrics_from_confusion(conf)))

    summary = summarize(results)
    if out_dir is not None:
        write_cv_results(results, os.path.join(out_dir, "metrics", "cv_results.csv"))
        write_cv_summary(summary, os.path.join(out_dir, "metrics", "cv_summary.csv"))
    return results, summary


def summarize(results) -> dict:
    """Mean and sample std of each metric over non-failed folds.

    nan metrics (undefined ratios) are excluded per-metric.
    """
    ok = [r for r in results if r.status == "ok"]
    summary = {"folds_ok": len(ok),
               "folds_failed": len(results) - len(ok)}
    for name in METRIC_NAMES:
        vals = np.array([r.metrics[name] for r in ok], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        summary[f"{name}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        summary[f"{name}_std"] = (float(vals.std(ddof=1)) if len(vals) > 1
                                  else float("nan"))
    return summary


def write_cv_results(results, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fold,status,tp,fp,tn,fn,accuracy,sensitivity,specificity,macc\n")
        for r in results:
            c = r.confusion
            mets = [r.metrics.get(name, float("nan")) for name in METRIC_NAMES]
            mets = ",".join(f"{v:.6f}" for v in mets)
            fh.write(f"{r.fold},{r.status},{c.tp},{c.fp},{c.tn},{c.fn},{mets}\n")


def write_cv_summary(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,mean,std\n")
        for name in METRIC_NAMES:
            fh.write(f"{name},{summary[f'{name}_mean']:.6f},"
                     f"{summary[f'{name}_std']:.6f}\n")
        fh.write(f"folds_ok,{summary['folds_ok']},\n")
        fh.write(f"folds_failed,{summary['folds_failed']},\n")
