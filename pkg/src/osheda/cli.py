"""Command-line entry point: osheda {generate,train,eval,bench,bound-audit,estimate-lambda}.

Every command reads a YAML config carrying ``schema_version: 1``. Relative
paths in a config resolve against the config file's directory. Outputs go to
``--out``, else ``$OSHEDA_OUT_ROOT``, else the config's ``out`` key, else the
working directory.

Exit codes: 0 success, 2 input or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import bounds, metrics
from .data import LabelSpace, SyntheticConfig, estimate_lambda, generate_synthetic, load_csv, load_labels, save_csv, save_labels
from .errors import InvalidConfigError, InvalidInputError, NumericError, OshedaError, UnsupportedInputError
from .losses import Toggles
from .trainer import TrainConfig, TrainedModel, train

log = logging.getLogger("osheda")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
OUT_ROOT_ENV = "OSHEDA_OUT_ROOT"


# ---------------------------------------------------------------- config / manifest


class _ConfigLoader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-3``) as numbers."""


_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def load_config(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InvalidInputError(f"cannot read config {path}: {e.strerror}") from None
    try:
        cfg = yaml.load(raw, Loader=_ConfigLoader)
    except yaml.YAMLError as e:
        raise InvalidConfigError(f"{path}: not valid YAML ({e})") from None
    if not isinstance(cfg, dict):
        raise InvalidConfigError(f"{path}: config must be a mapping")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InvalidConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return cfg, raw, path.parent


def _sha256_bytes(b):
    return hashlib.sha256(b).hexdigest()


def _sha256_file(path):
    try:
        return _sha256_bytes(Path(path).read_bytes())
    except OSError as e:
        raise InvalidInputError(f"cannot read {path}: {e.strerror}") from None


def _resolve(base, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def _out_dir(args, cfg, base):
    if args.out:
        out = Path(args.out)
    elif os.environ.get(OUT_ROOT_ENV):
        out = Path(os.environ[OUT_ROOT_ENV])
    elif cfg.get("out"):
        out = _resolve(base, cfg["out"])
    else:
        out = Path(".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InvalidInputError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


class Manifest:
    """Content hash of a run's inputs plus the files it wrote.

    The hash covers the command, config bytes, CLI overrides and the bytes of
    every input file; timestamps are recorded beside it, never inside it.
    """

    def __init__(self, command, config_bytes=b"", overrides=None):
        self.command = command
        self.config_sha256 = _sha256_bytes(config_bytes)
        self.overrides = dict(overrides or {})
        self.inputs = {}
        self.outputs = {}
        self.started = time.time()

    def add_input(self, name, path):
        self.inputs[name] = _sha256_file(path)

    @property
    def hash(self):
        body = {"command": self.command, "config_sha256": self.config_sha256, "overrides": self.overrides, "inputs": self.inputs}
        return _sha256_bytes(json.dumps(body, sort_keys=True).encode())

    def write_text(self, out_dir, name, text):
        path = Path(out_dir) / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as e:
            raise InvalidInputError(f"cannot write {path}: {e.strerror}") from None
        self.outputs[name] = _sha256_file(path)
        return path

    def write_json(self, out_dir, name, obj):
        return self.write_text(out_dir, name, _dumps(obj))

    def record(self, out_dir, name):
        self.outputs[name] = _sha256_file(Path(out_dir) / name)

    def save(self, out_dir):
        content = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "hash": self.hash,
            "config_sha256": self.config_sha256,
            "overrides": self.overrides,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        doc = {
            "content": content,
            "timestamps": {
                "started": _iso(self.started),
                "finished": _iso(time.time()),
            },
        }
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return path


def _iso(t):
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _synthetic_config(d, seed=None):
    if not isinstance(d, dict):
        raise InvalidConfigError("'synthetic' must be a mapping of generator settings")
    cfg = SyntheticConfig.from_dict(d)
    return cfg if seed is None else replace(cfg, seed=seed)


def _train_config(d, seed=None, lam=None):
    d = dict(d or {})
    if lam is not None:
        d.pop("lambda", None)
        d["lam"] = lam
    elif _wants_estimate(d):
        raise InvalidConfigError("lambda 'estimate' needs unlabeled target data to estimate from")
    cfg = TrainConfig.from_dict(d)
    return cfg if seed is None else replace(cfg, seed=seed)


def _wants_estimate(d):
    d = d or {}
    return d.get("lam", d.get("lambda")) == "estimate"


# ---------------------------------------------------------------- generate


def cmd_generate(args):
    cfg, raw, base = load_config(args.config)
    syn = _synthetic_config(cfg.get("synthetic", {}), args.seed)
    out = _out_dir(args, cfg, base)
    man = Manifest("generate", raw, {"seed": args.seed})
    b = generate_synthetic(syn)
    for name, ds in (("source.csv", b.source), ("target_labeled.csv", b.target_labeled), ("target_unlabeled.csv", b.target_unlabeled)):
        save_csv(ds, out / name)
        man.record(out, name)
    save_labels(b.truth_collapsed, out / "truth.csv")
    man.record(out, "truth.csv")
    man.write_json(out, "synthetic.json", {"manifest_hash": man.hash, "config": syn.to_dict(), "realized_lambda": b.realized_lambda})
    man.save(out)
    print(f"wrote 4 datasets to {out} (realized lambda {b.realized_lambda:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _load_task_data(data, base, method, man=None):
    """Source / labeled-target / unlabeled-target datasets named in a config ``data`` block."""
    if not isinstance(data, dict):
        raise InvalidConfigError("'data' must map source/target_labeled/target_unlabeled to CSV paths")
    out = {}
    for key, domain in (("source", "source"), ("target_labeled", "target"), ("target_unlabeled", "target")):
        p = _resolve(base, data.get(key))
        if p is None:
            out[key] = None
            continue
        if not p.exists():
            raise InvalidInputError(f"{key} file {p} does not exist")
        if man is not None:
            man.add_input(key, p)
        out[key] = load_csv(p, has_labels=True, domain=domain, name=key)
    if out["target_labeled"] is None:
        raise InvalidInputError("data.target_labeled is required")
    if method == "rl_osheda" and out["source"] is None:
        raise InvalidInputError("method rl_osheda needs data.source")
    if method in ("rl_osheda", "pl") and out["target_unlabeled"] is None:
        raise InvalidInputError(f"method {method} needs data.target_unlabeled")
    return out


def cmd_train(args):
    cfg, raw, base = load_config(args.config)
    tc = cfg.get("train", {}) or {}
    method = tc.get("method", "rl_osheda")
    man = Manifest("train", raw, {"seed": args.seed})
    data = _load_task_data(cfg.get("data"), base, method, man)
    lam = None
    if _wants_estimate(tc):
        if data["target_unlabeled"] is None:
            raise InvalidInputError("lambda: estimate needs data.target_unlabeled")
        lam = estimate_lambda(data["target_labeled"], data["target_unlabeled"], k=int(cfg.get("estimate_k", 1)))
        log.info("estimated lambda = %.4f", lam)
    tcfg = _train_config(tc, args.seed, lam)
    out = _out_dir(args, cfg, base)
    n_known = cfg.get("n_known")
    label_space = LabelSpace(int(n_known)) if n_known is not None else None
    model = train(method, data["source"], data["target_labeled"], data["target_unlabeled"], tcfg, label_space)
    dump = model.to_dict()
    dump["manifest_hash"] = man.hash
    man.write_text(out, "model.json", json.dumps(dump, sort_keys=True) + "\n")
    man.write_json(out, "history.json", {
        "manifest_hash": man.hash,
        "method": model.method,
        "lambda": tcfg.lam,
        "lambda_estimated": lam is not None,
        "epochs": [b.to_dict() for b in model.history],
    })
    man.save(out)
    print(f"trained {model.method} for {tcfg.epochs} epochs; final loss {model.history[-1].total:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args):
    cfg, raw, base = ({}, b"", Path("."))
    if args.config:
        cfg, raw, base = load_config(args.config)
    model_p = Path(args.model) if args.model else _resolve(base, cfg.get("model"))
    data_p = Path(args.data) if args.data else _resolve(base, cfg.get("data"))
    truth_p = Path(args.truth) if args.truth else _resolve(base, cfg.get("truth"))
    if model_p is None or data_p is None or truth_p is None:
        raise InvalidConfigError("eval needs a model, a data CSV and a truth file")
    man = Manifest("eval", raw)
    for name, p in (("model", model_p), ("data", data_p), ("truth", truth_p)):
        if not p.exists():
            raise InvalidInputError(f"{name} file {p} does not exist")
        man.add_input(name, p)
    try:
        model = TrainedModel.load(model_p)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"{model_p}: not a model dump ({e})") from None
    ds = load_csv(data_p, has_labels=True, domain="target")
    if ds.dim != model.f_t.in_dim:
        raise InvalidInputError(f"data has {ds.dim} features, model expects {model.f_t.in_dim}")
    truth = load_labels(truth_p)
    report = metrics.evaluate(model, ds, truth)
    doc = report.to_dict()
    doc["manifest_hash"] = man.hash
    text = _dumps(doc)
    sys.stdout.write(text)
    if args.out or cfg.get("out") or os.environ.get(OUT_ROOT_ENV):
        out = _out_dir(args, cfg, base)
        man.write_text(out, "eval_report.json", text)
        man.save(out)
    return EXIT_OK


# ---------------------------------------------------------------- bench


def _variant_specs(cfg):
    """[(label, method, toggles)] from the grid's ``variants`` (or ``methods``) list."""
    entries = cfg.get("variants", cfg.get("methods", ["rl_osheda", "sl", "pl"]))
    out = []
    for e in entries:
        if isinstance(e, str):
            out.append((e, e, None))
            continue
        if not isinstance(e, dict):
            raise InvalidConfigError(f"bad variant entry {e!r}")
        method = e.get("method", "rl_osheda")
        toggles = e.get("toggles")
        if toggles is not None:
            toggles = Toggles(**toggles).to_dict()
        label = e.get("label") or (method if toggles is None else f"{method}[{Toggles(**toggles).label()}]")
        out.append((label, method, toggles))
    labels = [v[0] for v in out]
    if len(set(labels)) != len(labels):
        raise InvalidConfigError(f"variant labels must be unique, got {labels}")
    if not out:
        raise InvalidConfigError("bench grid lists no variants")
    return out


def _seeds(cfg, root):
    if "seeds" in cfg:
        seeds = [int(s) for s in cfg["seeds"]]
    else:
        seeds = list(range(int(cfg.get("n_seeds", 1))))
    return [root + s for s in seeds]


def _tasks(cfg, base):
    tasks = cfg.get("tasks")
    if not tasks:
        raise InvalidConfigError("bench grid needs a non-empty 'tasks' list")
    out = []
    for i, t in enumerate(tasks):
        name = t.get("name", f"task{i}")
        if "synthetic" in t:
            _synthetic_config(t["synthetic"])  # validate early
            out.append({"name": name, "synthetic": t["synthetic"]})
        elif "data" in t:
            paths = {k: (None if v is None else str(_resolve(base, v))) for k, v in t["data"].items()}
            out.append({"name": name, "data": paths, "truth": str(_resolve(base, t.get("truth"))), "n_known": t.get("n_known")})
        else:
            raise InvalidConfigError(f"task {name!r} needs a 'synthetic' or 'data' block")
    names = [t["name"] for t in out]
    if len(set(names)) != len(names):
        raise InvalidConfigError(f"task names must be unique, got {names}")
    return out


def run_cell(cell):
    """Train and evaluate one (task, variant, seed) cell; failures come back as records."""
    rec = {"task": cell["task"]["name"], "variant": cell["label"], "method": cell["method"], "seed": cell["seed"]}
    try:
        task = cell["task"]
        tc = dict(cell["train"])
        if cell["toggles"] is not None:
            tc["toggles"] = cell["toggles"]
        tc["method"] = cell["method"]
        if "synthetic" in task:
            b = generate_synthetic(_synthetic_config(task["synthetic"], cell["seed"]))
            src, tl, tu, truth, ls = b.source, b.target_labeled, b.target_unlabeled, b.truth, b.label_space
            lam_true = b.realized_lambda
        else:
            d = _load_task_data(task["data"], Path("."), cell["method"])
            src, tl, tu = d["source"], d["target_labeled"], d["target_unlabeled"]
            truth = load_labels(task["truth"])
            ls = LabelSpace(int(task["n_known"])) if task.get("n_known") else None
            lam_true = None
        if _wants_estimate(tc):
            lam = estimate_lambda(tl, tu)
        elif "lam" in tc or "lambda" in tc:
            lam = None
        else:
            lam = lam_true
        tcfg = _train_config(tc, cell["seed"], lam)
        model = train(cell["method"], src, tl, tu, tcfg, ls)
        report = metrics.evaluate(model, tu, truth)
        rec.update(status="ok", report=report.to_dict(), error="")
    except NumericError as e:
        rec.update(status="numeric_error", report=None, error=str(e))
    except (OshedaError, ValueError, OSError, KeyError, TypeError) as e:
        rec.update(status="error", report=None, error=f"{type(e).__name__}: {e}")
    return rec


def _significance(records, variants, alpha, metric):
    ok = [r for r in records if r["status"] == "ok"]
    tasks = sorted({r["task"] for r in ok})
    # Friedman blocks are tasks; with a single task the seeds act as blocks
    if len(tasks) >= 2:
        def block(r):
            return r["task"]
        blocks = tasks
    else:
        def block(r):
            return f"{r['task']}#{r['seed']}"
        blocks = sorted({block(r) for r in ok})
    table = {}
    for r in ok:
        table.setdefault(block(r), {}).setdefault(r["variant"], []).append(r["report"][metric])
    cols = [b for b in blocks if all(v in table.get(b, {}) for v in variants)]
    if len(variants) < 2 or len(cols) < 2:
        return {"skipped": f"need >= 2 variants and >= 2 complete blocks, have {len(variants)} and {len(cols)}"}
    scores = np.array([[float(np.mean(table[b][v])) for b in cols] for v in variants])
    res = metrics.friedman_nemenyi(scores, alpha, variants)
    doc = res.to_dict()
    doc.update(blocks=cols, metric=metric)
    return doc, scores, cols


def cmd_bench(args):
    cfg, raw, base = load_config(args.config)
    root = args.seed if args.seed is not None else int(cfg.get("root_seed", 0))
    variants = _variant_specs(cfg)
    tasks = _tasks(cfg, base)
    seeds = _seeds(cfg, root)
    train_cfg = dict(cfg.get("train", {}) or {})
    _train_config({k: v for k, v in train_cfg.items() if not (k in ("lam", "lambda") and v == "estimate")})
    alpha = float(cfg.get("alpha", 0.05))
    metric = cfg.get("metric", "hos")
    if metric not in ("os_star", "unk", "hos"):
        raise InvalidConfigError(f"metric must be os_star, unk or hos, got {metric!r}")
    man = Manifest("bench", raw, {"seed": args.seed})
    for t in tasks:
        if "data" in t:
            for k, p in t["data"].items():
                if p is not None:
                    man.add_input(f"{t['name']}/{k}", p)
            man.add_input(f"{t['name']}/truth", t["truth"])
    out = _out_dir(args, cfg, base)

    cells = [
        {"task": t, "label": label, "method": method, "toggles": toggles, "seed": s, "train": train_cfg}
        for t in tasks for (label, method, toggles) in variants for s in seeds
    ]
    jobs = args.jobs or os.cpu_count() or 1
    if jobs == 1 or len(cells) == 1:
        records = [run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as ex:
            records = list(ex.map(run_cell, cells))

    for r in records:
        name = f"cells/{r['task']}__{r['variant']}__seed{r['seed']}.json"
        man.write_json(out, name, dict(r, manifest_hash=man.hash))

    fields = ["task", "variant", "method", "seed", "status", "os_star", "unk", "hos", "unk_defined", "error"]
    lines = [",".join(fields)]
    for r in records:
        rep = r["report"] or {}
        row = [r["task"], r["variant"], r["method"], str(r["seed"]), r["status"],
               *(repr(float(rep[k])) if rep else "" for k in ("os_star", "unk", "hos")),
               str(rep.get("unk_defined", "")), r["error"]]
        lines.append(_csv_line(row))
    man.write_text(out, "results.csv", "# manifest_hash=" + man.hash + "\n" + "\n".join(lines) + "\n")

    agg_rows = []
    for t in tasks:
        for label, _, _ in variants:
            reps = [metrics.EvalReport(**r["report"]) for r in records
                    if r["task"] == t["name"] and r["variant"] == label and r["status"] == "ok"]
            if not reps:
                agg_rows.append({"task": t["name"], "variant": label, "n": 0})
                continue
            a = metrics.aggregate(reps)
            agg_rows.append({"task": t["name"], "variant": label, "n": a.n, "mean": a.mean, "stderr": a.stderr,
                             "n_unk_undefined": a.n_unk_undefined,
                             "formatted": {k: a.format(k) for k in ("os_star", "unk", "hos")}})
    table = ["task,variant,n,OS*,UNK,HOS"]
    for row in agg_rows:
        f = row.get("formatted", {})
        table.append(_csv_line([row["task"], row["variant"], str(row["n"]), f.get("os_star", ""), f.get("unk", ""), f.get("hos", "")]))
    man.write_text(out, "aggregate.csv", "# manifest_hash=" + man.hash + "\n" + "\n".join(table) + "\n")
    man.write_json(out, "aggregate.json", {"manifest_hash": man.hash, "rows": agg_rows})

    labels = [v[0] for v in variants]
    sig = _significance(records, labels, alpha, metric)
    if isinstance(sig, tuple):
        doc, scores, cols = sig
        buf = Path(out) / "scores.csv"
        metrics.write_score_matrix(buf, scores, labels, cols)
        man.record(out, "scores.csv")
    else:
        doc = sig
    doc["manifest_hash"] = man.hash
    man.write_json(out, "significance.json", doc)
    man.save(out)

    n_fail = sum(r["status"] != "ok" for r in records)
    for row in table[1:]:
        print(row)
    if n_fail:
        print(f"{n_fail}/{len(records)} cells failed; see results.csv", file=sys.stderr)
        if args.strict:
            numeric = any(r["status"] == "numeric_error" for r in records)
            return EXIT_NUMERIC if numeric else EXIT_INPUT
    return EXIT_OK


def _csv_line(cells):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(cells)
    return buf.getvalue()


# ---------------------------------------------------------------- bound-audit


def _audit_job(job):
    syn, tcfg, opts = job
    return [r.to_dict() for r in bounds.audit_models(syn, tcfg, **opts)]


def cmd_bound_audit(args):
    cfg, raw, base = load_config(args.config)
    if "data" in cfg:
        raise UnsupportedInputError("bound audits need synthetic data with full ground truth, not CSV files")
    a = cfg.get("audit", {}) or {}
    opts = {
        "codebook_size": int(a.get("codebook_size", 32)),
        "loss": a.get("loss", "zero_one"),
        "C": float(a.get("C", 1.0)),
        "tolerance": float(a.get("tolerance", 0.05)),
        "models": tuple(a.get("models", ["trained"])),
    }
    if opts["loss"] not in bounds.LOSSES:
        raise InvalidConfigError(f"audit.loss must be one of {bounds.LOSSES}")
    tc = dict(cfg.get("train", {"epochs": 20, "steps_per_epoch": 16}) or {})
    tc.pop("lam", None)
    tc.pop("lambda", None)
    tcfg = _train_config(tc)
    if "sweep" in cfg:
        sw = cfg["sweep"] or {}
        root = args.seed if args.seed is not None else int(sw.get("root_seed", 123))
        syns = bounds.random_audit_configs(int(sw.get("n_configs", 20)), root, int(sw.get("n_samples", 600)))
    elif "synthetic" in cfg:
        entries = cfg["synthetic"] if isinstance(cfg["synthetic"], list) else [cfg["synthetic"]]
        syns = [_synthetic_config(e, args.seed) for e in entries]
    else:
        raise InvalidConfigError("bound-audit config needs a 'synthetic' block or a 'sweep' block")
    man = Manifest("bound-audit", raw, {"seed": args.seed})
    out = _out_dir(args, cfg, base)
    jobs_in = [(s, tcfg, opts) for s in syns]
    n_jobs = args.jobs or os.cpu_count() or 1
    if n_jobs == 1 or len(jobs_in) == 1:
        results = [_audit_job(j) for j in jobs_in]
    else:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs_in))) as ex:
            results = list(ex.map(_audit_job, jobs_in))
    reports = [dict(r, manifest_hash=man.hash) for pair in results for r in pair]
    man.write_text(out, "bound_audit.json", json.dumps(reports, sort_keys=True, indent=2) + "\n")
    man.save(out)
    n_up = sum(r["holds_upper"] for r in reports)
    n_lo = sum(r["holds_lower"] for r in reports)
    print(f"{len(reports)} audits: upper bound holds on {n_up}, lower bound holds on {n_lo}")
    return EXIT_OK


# ---------------------------------------------------------------- estimate-lambda


def cmd_estimate_lambda(args):
    cfg, raw, base = load_config(args.config)
    k = int(cfg.get("k", 1))
    alpha = float(cfg.get("alpha", 0.05))
    man = Manifest("estimate-lambda", raw, {"seed": args.seed})
    doc = {"k": k, "alpha": alpha}
    if "synthetic" in cfg:
        b = generate_synthetic(_synthetic_config(cfg["synthetic"], args.seed))
        tl, tu = b.target_labeled, b.target_unlabeled
        doc["lambda_true"] = b.realized_lambda
    elif "data" in cfg:
        d = cfg["data"]
        paths = {k_: _resolve(base, d.get(k_)) for k_ in ("target_labeled", "target_unlabeled")}
        for name, p in paths.items():
            if p is None or not p.exists():
                raise InvalidInputError(f"data.{name} file {p} does not exist")
            man.add_input(name, p)
        tl = load_csv(paths["target_labeled"], True, "target")
        tu = load_csv(paths["target_unlabeled"], True, "target")
    else:
        raise InvalidConfigError("estimate-lambda config needs a 'synthetic' or 'data' block")
    if tl.labels is None:
        raise InvalidInputError("target_labeled must carry labels")
    doc["lambda_hat"] = estimate_lambda(tl, tu, k=k, alpha=alpha)
    doc["manifest_hash"] = man.hash
    text = _dumps(doc)
    sys.stdout.write(text)
    if args.out or cfg.get("out") or os.environ.get(OUT_ROOT_ENV):
        out = _out_dir(args, cfg, base)
        man.write_text(out, "lambda.json", text)
        man.save(out)
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="osheda", description="Open-set heterogeneous domain adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        return sp

    common(sub.add_parser("generate", help="write a synthetic benchmark task to CSV")).set_defaults(func=cmd_generate)
    common(sub.add_parser("train", help="train rl_osheda, sl or pl")).set_defaults(func=cmd_train)
    ev = common(sub.add_parser("eval", help="score a saved model"), config_required=False)
    ev.add_argument("--model", help="model JSON written by train")
    ev.add_argument("--data", help="CSV of target rows to score")
    ev.add_argument("--truth", help="ground-truth label file")
    ev.set_defaults(func=cmd_eval)
    be = common(sub.add_parser("bench", help="run a methods x tasks x seeds grid"))
    be.add_argument("--jobs", type=int, default=None, help="parallel cells (default: logical cores)")
    be.add_argument("--strict", action="store_true", help="non-zero exit if any cell fails")
    be.set_defaults(func=cmd_bench)
    ba = common(sub.add_parser("bound-audit", help="audit the target-error bounds on synthetic tasks"))
    ba.add_argument("--jobs", type=int, default=None, help="parallel audits (default: logical cores)")
    ba.set_defaults(func=cmd_bound_audit)
    common(sub.add_parser("estimate-lambda", help="estimate the known-class prior")).set_defaults(func=cmd_estimate_lambda)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        where = f" (epoch {e.epoch})" if getattr(e, "epoch", None) is not None else ""
        print(f"error: numeric failure{where}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OshedaError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
