"""Command-line pipeline: synth, prepare, train, eval, explain.

Every command takes --config (key=value lines), --seed and --out; explicit
flags override config-file values which override defaults. Human-readable
progress goes to stderr; machine-readable artifacts are files under the run
directory: manifests/, weights/, metrics/, explanations/. Exit codes:
0 success, 1 usage or bad configuration, 2 unusable data, 3 runtime failure.
"""

import argparse
import contextlib
import os
import sys

import numpy as np

from . import architectures, data, evaluate, explain, net, synth
from .errors import ConfigError, DataError, PcgError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _log(msg):
    print(msg, file=sys.stderr)


@contextlib.contextmanager
def _locked(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PcgError(f"run directory {out_dir} is locked by another command "
                       f"(remove {lock} if that run is dead)")
    try:
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _load_config_file(path, known):
    values = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def _coerce(key, value, default):
    if isinstance(default, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}")
    return value


def _merge_options(args, defaults):
    """defaults <- config file <- explicit CLI flags."""
    cfg = dict(defaults)
    if args.config:
        for key, raw in _load_config_file(args.config, set(defaults)).items():
            cfg[key] = _coerce(key, raw, defaults[key])
    for key, default in defaults.items():
        given = getattr(args, key, None)
        if given is not None:
            cfg[key] = given
    return cfg


def _add_options(parser, defaults):
    parser.add_argument("--config", help="key=value config file")
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, default=None,
                                type=lambda v, k=key, d=default: _coerce(k, v, d))
        elif isinstance(default, (int, float)):
            parser.add_argument(flag, type=type(default), default=None)
        else:
            parser.add_argument(flag, default=None)


def _parse_band(text):
    lo, sep, hi = str(text).partition("-")
    if not sep:
        raise ConfigError(f"expected a band like 150-400, got {text!r}")
    try:
        return float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"expected a numeric band, got {text!r}")


SYNTH_DEFAULTS = {
    "n_normal": 10, "n_abnormal": 10, "duration_s": 3.0,
    "heart_rate_bpm": 60.0, "jitter": 0.02, "noise_level": 0.02,
    "murmur_band": "150-400", "murmur_amplitude": 0.35,
    "seed": 0, "out": "runs/run",
}


def cmd_synth(cfg):
    if cfg["n_normal"] + cfg["n_abnormal"] < 1:
        raise ConfigError("nothing to generate: n_normal + n_abnormal is 0")
    band = _parse_band(cfg["murmur_band"])
    out = cfg["out"]
    data_dir = os.path.join(out, "data")
    with _locked(out):
        os.makedirs(data_dir, exist_ok=True)
        rows = []
        for i in range(cfg["n_normal"] + cfg["n_abnormal"]):
            abnormal = i >= cfg["n_normal"]
            rec_id = f"{'a' if abnormal else 'n'}{i:04d}"
            rec = synth.synth_pcg(synth.SynthConfig(
                duration_s=cfg["duration_s"],
                heart_rate_bpm=cfg["heart_rate_bpm"],
                abnormal=abnormal,
                seed=cfg["seed"] + i,
                murmur_band_hz=band,
                murmur_amplitude=cfg["murmur_amplitude"],
                noise_level=cfg["noise_level"],
                jitter=cfg["jitter"],
                recording_id=rec_id,
            ))
            data.write_wav(os.path.join(data_dir, f"{rec_id}.wav"),
                           rec.samples, rec.sample_rate_hz)
            rows.append((rec_id, "1" if abnormal else "-1"))
        with open(os.path.join(data_dir, "reference.csv"), "w",
                  encoding="utf-8") as fh:
            for rec_id, lab in rows:
                fh.write(f"{rec_id},{lab}\n")
    _log(f"synth: wrote {cfg['n_normal']} normal + {cfg['n_abnormal']} abnormal "
         f"recordings to {data_dir}")
    return 0


def _load_corpus(data_dir, labels_path):
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory {data_dir} does not exist")
    labels = data.load_labels(labels_path)
    wavs = sorted(f for f in os.listdir(data_dir) if f.lower().endswith(".wav"))
    if not wavs:
        raise DataError(f"no recordings found in {data_dir}")
    recordings = []
    missing = []
    for name in wavs:
        rec = data.load_wav(os.path.join(data_dir, name))
        if rec.id not in labels:
            missing.append(rec.id)
            continue
        rec.label = labels[rec.id]
        recordings.append(data.resample(rec, data.RATE_HZ))
    if missing:
        raise DataError(f"{len(missing)} recordings without labels, "
                        f"first: {missing[0]}")
    return recordings


def _window_corpus(recordings):
    windows = []
    for rec in recordings:
        windows.extend(data.window_signal(rec))
    return windows


PREPARE_DEFAULTS = {
    "data": "", "labels": "", "k": 10, "seed": 0, "out": "runs/run",
}


def _resolve_data_paths(cfg):
    data_dir = cfg["data"] or os.path.join(cfg["out"], "data")
    labels = cfg["labels"] or os.path.join(data_dir, "reference.csv")
    return data_dir, labels


def cmd_prepare(cfg):
    data_dir, labels_path = _resolve_data_paths(cfg)
    out = cfg["out"]
    with _locked(out):
        recordings = _load_corpus(data_dir, labels_path)
        windows = _window_corpus(recordings)
        bal, rest = data.build_balanced_db(windows, seed=cfg["seed"])
        plan = data.make_folds(bal, k=cfg["k"], seed=cfg["seed"], rest=rest)
        manifest_dir = os.path.join(out, "manifests")
        os.makedirs(manifest_dir, exist_ok=True)
        data.write_window_manifest(windows, os.path.join(manifest_dir, "windows.csv"))
        data.write_fold_plan(plan, os.path.join(manifest_dir, "folds.txt"))
    n_abn = sum(1 for w in bal if w.label == data.ABNORMAL)
    _log(f"prepare: {len(recordings)} recordings, {len(windows)} windows; "
         f"balanced {n_abn}+{len(bal) - n_abn}, rest {len(rest)}; "
         f"{cfg['k']} folds -> {os.path.join(out, 'manifests')}")
    return 0


TRAIN_DEFAULTS = {
    "data": "", "labels": "", "variant": "final", "k": 10,
    "epochs": 100, "patience": 10, "batch_size": 64, "learning_rate": 1e-3,
    "segmenter": "heuristic", "threads": 0, "seed": 0, "out": "runs/run",
}


def _limit_threads(n):
    if n and n > 0:
        try:
            import threadpoolctl
        except ImportError:
            _log("train: threadpoolctl unavailable, --threads ignored")
            return contextlib.nullcontext()
        return threadpoolctl.threadpool_limits(limits=n)
    return contextlib.nullcontext()


def _assemble(cfg, windows):
    segmenter = cfg.get("segmenter", "heuristic")
    if segmenter not in ("heuristic", "none") and segmenter:
        segmenter = architectures.load_segmenter_features(segmenter)
    elif segmenter == "none":
        segmenter = None
    return architectures.assemble_inputs(windows, cfg["variant"],
                                         segmenter=segmenter)


def _prepared_inputs(cfg):
    data_dir, labels_path = _resolve_data_paths(cfg)
    recordings = _load_corpus(data_dir, labels_path)
    windows = _window_corpus(recordings)
    bal, rest = data.build_balanced_db(windows, seed=cfg["seed"])
    plan = data.make_folds(bal, k=cfg["k"], seed=cfg["seed"], rest=rest)
    by_id = {w.window_id: w for w in windows}
    used = list(dict.fromkeys(
        [wid for tr, va in plan.folds for wid in tr + va] + list(plan.rest_ids)))
    dataset = _assemble(cfg, [by_id[w] for w in used])
    return dataset, plan


def cmd_train(cfg):
    train_cfg = net.TrainConfig(learning_rate=cfg["learning_rate"],
                                batch_size=cfg["batch_size"],
                                max_epochs=cfg["epochs"],
                                patience=cfg["patience"],
                                seed=cfg["seed"])
    out = cfg["out"]
    with _locked(out), _limit_threads(cfg["threads"]):
        dataset, plan = _prepared_inputs(cfg)
        results, summary = evaluate.run_cv(dataset, plan, cfg["variant"],
                                           train_cfg, out_dir=out)
    ok = [r for r in results if r.status == "ok"]
    _log(f"train: {cfg['variant']} {len(ok)}/{len(results)} folds ok, "
         f"accuracy {summary['accuracy_mean']:.4f} "
         f"(std {summary['accuracy_std']:.4f}) -> {out}")
    return 0


EVAL_DEFAULTS = {
    "data": "", "labels": "", "variant": "final", "k": 10,
    "segmenter": "heuristic", "seed": 0, "out": "runs/run",
}


def cmd_eval(cfg):
    out = cfg["out"]
    for fold in range(cfg["k"]):
        path = os.path.join(out, "weights", f"fold_{fold}.pcgw")
        if not os.path.exists(path):
            raise DataError(f"missing weights for fold {fold}: {path}")
    train_cfg = net.TrainConfig(seed=cfg["seed"])
    with _locked(out):
        dataset, plan = _prepared_inputs(cfg)
        results, summary = evaluate.run_cv(dataset, plan, cfg["variant"],
                                           train_cfg, out_dir=out)
    _log(f"eval: accuracy {summary['accuracy_mean']:.4f} "
         f"(std {summary['accuracy_std']:.4f}) over {summary['folds_ok']} folds")
    return 0


EXPLAIN_DEFAULTS = {
    "data": "", "labels": "", "variant": "final", "method": "shap",
    "instance": "", "m": 2000, "baseline": "mean", "background": 50,
    "fill": 0.0, "kernel": 3, "weights": "", "fold": 0,
    "seed": 0, "out": "runs/run",
}


def cmd_explain(cfg):
    method = cfg["method"]
    if method not in ("shap", "shap-intermediate", "occlusion"):
        raise ConfigError(f"unknown method {cfg['method']!r}")
    if not cfg["instance"]:
        raise ConfigError("an --instance window id is required")
    out = cfg["out"]
    weights_path = cfg["weights"] or os.path.join(out, "weights",
                                                  f"fold_{cfg['fold']}.pcgw")
    if not os.path.exists(weights_path):
        raise DataError(f"weights file {weights_path} does not exist")

    data_dir, labels_path = _resolve_data_paths(cfg)
    recordings = _load_corpus(data_dir, labels_path)
    windows = _window_corpus(recordings)
    by_id = {w.window_id: w for w in windows}
    if cfg["instance"] not in by_id:
        hint = windows[0].window_id if windows else "none"
        raise DataError(f"instance {cfg['instance']!r} not found "
                        f"(ids look like {hint})")

    variant = architectures.get_variant(cfg["variant"])
    spec = architectures.build_model(cfg["variant"])
    weights = net.load_weights(weights_path)

    rng = np.random.default_rng(cfg["seed"])
    background_ids = rng.permutation(len(windows))[:cfg["background"]]
    background = [windows[i] for i in background_ids]
    pack = architectures.assemble_inputs([by_id[cfg["instance"]]] + background,
                                         cfg["variant"])
    x_inst = pack.x[0]
    aux_inst = None if pack.aux is None else pack.aux[0]
    x_back = pack.x[1:]
    aux_back = None if pack.aux is None else pack.aux[1:]

    with _locked(out):
        exp_dir = os.path.join(out, "explanations")
        os.makedirs(exp_dir, exist_ok=True)
        tag = cfg["instance"].replace("#", "_")
        base = os.path.join(exp_dir, f"{tag}_{method.replace('-', '_')}")
        # record the weights file relative to the run dir so reruns in a
        # different location produce byte-identical manifests
        weights_ref = os.path.relpath(weights_path, out)
        manifest = {"instance": cfg["instance"], "method": method,
                    "m": cfg["m"], "seed": cfg["seed"],
                    "baseline": cfg["baseline"], "weights": weights_ref}

        if method == "shap":
            if cfg["baseline"] == "zero":
                baseline = np.zeros_like(np.asarray(x_inst, dtype=np.float64))
            else:
                if len(x_back) < 1:
                    raise DataError("no background windows for the mean baseline")
                baseline = np.asarray(x_back, dtype=np.float64).mean(axis=0)

            def model_fn(maps):
                aux = None
                if aux_inst is not None:
                    aux = np.repeat(aux_inst[None, :], len(maps), axis=0)
                return net.predict_batch(spec, weights, maps, aux=aux)

            attr = explain.shapley_grouped(model_fn, x_inst, baseline,
                                           m=cfg["m"], seed=cfg["seed"])
            paths = explain.render_heatmap(attr.values[:, :, 0] if attr.values.ndim == 3
                                           else attr.values, base, mode="signed")
            manifest["base_value"] = f"{attr.base_value:.9g}"
            manifest["target_output"] = f"{attr.target_output:.9g}"
        elif method == "shap-intermediate":
            if not variant.uses_embedding:
                raise ConfigError(f"variant {variant.name} has no branch tap")
            if cfg["baseline"] == "zero":
                tap = net.concat_index(spec)
                width = spec.shapes[tap][0]
                baseline = np.zeros(width)
            else:
                baseline = explain.intermediate_baseline(
                    spec, weights, x_back, aux_back,
                    min_background=min(cfg["background"], len(x_back)))
            attr, mass = explain.shapley_intermediate(
                spec, weights, x_inst, aux_inst, baseline,
                m=cfg["m"], seed=cfg["seed"])
            paths = explain.render_heatmap(attr.values[None, :], base, mode="signed")
            manifest["mass_segmenter"] = f"{mass['segmenter']:.9g}"
            manifest["mass_cnn"] = f"{mass['cnn']:.9g}"
        else:
            def model_fn(maps):
                aux = None
                if aux_inst is not None:
                    aux = np.repeat(aux_inst[None, :], len(maps), axis=0)
                return net.predict_batch(spec, weights, maps, aux=aux)

            k = cfg["kernel"]
            occ = explain.occlusion_map(model_fn, x_inst, kernel=(k, k),
                                        fill=cfg["fill"])
            paths = explain.render_heatmap(occ.values, base, mode="absolute")
            manifest["intact_output"] = f"{occ.intact_output:.9g}"
            manifest["fill"] = cfg["fill"]
        explain.write_explanation_manifest(f"{base}.manifest", manifest)
    _log(f"explain: {method} for {cfg['instance']} -> "
         f"{', '.join(os.path.basename(p) for p in paths)}")
    return 0


_COMMANDS = {
    "synth": (cmd_synth, SYNTH_DEFAULTS, "generate a labeled synthetic corpus"),
    "prepare": (cmd_prepare, PREPARE_DEFAULTS,
                "window recordings, balance classes, plan folds"),
    "train": (cmd_train, TRAIN_DEFAULTS, "train and cross-validate a variant"),
    "eval": (cmd_eval, EVAL_DEFAULTS, "re-score saved fold weights"),
    "explain": (cmd_explain, EXPLAIN_DEFAULTS,
                "attribute a prediction or run occlusion"),
}


def main(argv=None) -> int:
    parser = _Parser(prog="pcgkit",
                     description="heart sound classification pipeline")
    sub = parser.add_subparsers(dest="command")
    for name, (_, defaults, help_text) in _COMMANDS.items():
        _add_options(sub.add_parser(name, help=help_text), defaults)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise ConfigError("a command is required "
                              f"(one of {', '.join(_COMMANDS)})")
        handler, defaults, _ = _COMMANDS[args.command]
        cfg = _merge_options(args, defaults)
        return handler(cfg)
    except ConfigError as exc:
        print(f"pcgkit: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"pcgkit: data error: {exc}", file=sys.stderr)
        return 2
    except PcgError as exc:
        print(f"pcgkit: failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
