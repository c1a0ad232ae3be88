"""Command-line entry point: ``scsr <command> [options]``."""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, baselines, engine, stats, store
from .cohort import CohortConfig, ORDINAL, ad_atrophy, load_cohort_config, split_cohort, synth_cohort
from .errors import ConfigurationError, ConvergenceError, InsufficientDataError, ScsrError
from .geometry import build_icosphere, contiguous_roi, define_roi, generate_parcellation
from .neural import TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("scsr")

EXIT_CODES = {
    "usage": 2,
    "io": 3,
    "format": 4,
    "config": 5,
    "bounds": 6,
    "shape": 7,
    "insufficient-data": 8,
    "degenerate-mask": 9,
    "split": 10,
    "undefined-metric": 11,
    "numeric": 12,
    "convergence": 13,
    "error": 1,
}

EPILOG = """exit codes:
  0 success          1 other error       2 usage (bad or unknown flag)
  3 io (missing or unreadable file)       4 format (invalid file contents)
  5 config           6 bounds            7 shape
  8 insufficient-data                    9 degenerate-mask
 10 split           11 undefined-metric 12 numeric
 13 convergence
On failure a single line 'error: <category>: <message>' is written to stderr.
Environment: SCSR_OUT_DIR resolves relative output paths, SCSR_THREADS sets
the default for --threads."""


def exit_code(category):
    return EXIT_CODES.get(category.split("-")[0] if category.startswith("format") else category, 1)


# ---------------------------------------------------------------- helpers


def parse_grid(text):
    """``start:stop:step`` (stop included within 1e-9) or a comma list."""
    text = text.strip()
    if ":" in text:
        try:
            start, stop, step = (float(t) for t in text.split(":"))
        except ValueError:
            raise ConfigurationError(f"bad grid {text!r}, expected start:stop:step") from None
        if step <= 0 or stop < start:
            raise ConfigurationError(f"bad grid {text!r}: need step > 0 and stop >= start")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"bad list {text!r}") from None


def parse_floats(text, n=None):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigurationError(f"expected {n} values, got {len(vals)}")
    return vals


def parse_groups(text):
    out = {}
    for item in text.split(","):
        name, _, count = item.partition("=")
        if not count:
            raise ConfigurationError(f"bad group spec {item!r}, expected LABEL=COUNT")
        out[name.strip()] = int(count)
    return out


def out_path(p):
    p = Path(p)
    base = os.environ.get("SCSR_OUT_DIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_toml(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve(names, cli, file_cfg, defaults):
    """Merge settings with precedence CLI > config file > default; also report the source."""
    values, sources = {}, {}
    for name in names:
        if cli.get(name) is not None:
            values[name], sources[name] = cli[name], "cli"
        elif name in file_cfg:
            values[name], sources[name] = file_cfg[name], "config"
        else:
            values[name], sources[name] = defaults[name], "default"
    return values, sources


class Manifest:
    def __init__(self, args):
        self.command = args.command
        self.argv = sys.argv[1:]
        self.start = time.time()
        self.config = {}
        self.sources = {}
        self.seeds = {}
        self.inputs = []
        self.outputs = []

    def write(self, path):
        def digest(p):
            p = Path(p)
            if p.is_dir():
                return {f.name: file_digest(f) for f in sorted(p.iterdir())
                        if f.is_file() and f.name != "manifest.json"}
            return file_digest(p) if p.exists() else None

        data = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "config": self.config,
            "config_sources": self.sources,
            "seeds": self.seeds,
            "inputs": {str(p): digest(p) for p in self.inputs},
            "outputs": {str(p): digest(p) for p in self.outputs},
            "wall_time_s": round(time.time() - self.start, 3),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        path = Path(path)
        target = path / "manifest.json" if path.is_dir() else path.with_name(path.name + ".manifest.json")
        target.write_text(json.dumps(data, indent=1, sort_keys=True, default=str) + "\n")


def load_rois(parcellation, names):
    rois = {}
    for name in names:
        if name == "cortex":
            continue
        rois[name] = parcellation.roi_mask(name)
    return rois


# ---------------------------------------------------------------- commands


def cmd_make_mesh(args, man):
    mesh = build_icosphere(args.order)
    out = out_path(args.out)
    store.write_mesh_ply(out, mesh)
    man.config = {"order": args.order}
    man.outputs.append(out)
    print(f"{mesh.n_vertices} vertices, {mesh.faces.shape[0]} faces -> {out}")
    return out


def cmd_parcellate(args, man):
    mesh = store.read_mesh_ply(args.mesh)
    parc = generate_parcellation(mesh, args.k, args.seed)
    for spec in args.roi or []:
        name, _, ids = spec.partition("=")
        if not ids:
            raise ConfigurationError(f"bad --roi {spec!r}, expected NAME=ID,ID,...")
        parc = define_roi(parc, [int(i) for i in ids.split(",")], name)
    if "ad_roi" not in parc.roi_sets and args.ad_roi_size > 0:
        parc = define_roi(parc, contiguous_roi(mesh, parc, args.ad_roi_size), "ad_roi")
    out = out_path(args.out)
    store.write_parcellation(out, parc)
    man.config = {"k": args.k, "ad_roi_size": args.ad_roi_size,
                  "rois": {k: sorted(v) for k, v in parc.roi_sets.items()}}
    man.seeds = {"seed": args.seed}
    man.inputs.append(args.mesh)
    man.outputs += [out, out.with_suffix(".rois.json")]
    print(f"{parc.k} parcels, sizes {parc.parcel_sizes().min()}-{parc.parcel_sizes().max()} -> {out}")
    return out


def cmd_synth(args, man):
    mesh = store.read_mesh_ply(args.mesh)
    parc = store.read_parcellation(args.parcellation)
    cli = {
        "seed": args.seed,
        "population_seed": args.population_seed,
        "n_per_group": parse_groups(args.groups) if args.groups else None,
        "mesh_order": mesh.order,
    }
    if args.ad_depth is not None:
        cli["atrophy"] = {k: vars(v) for k, v in ad_atrophy(args.ad_roi, args.ad_depth, args.spread).items()}
    if args.config:
        cfg = load_cohort_config(args.config, **cli)
        file_keys = set(read_toml(args.config))
    else:
        cfg = CohortConfig(**{k: v for k, v in cli.items() if v is not None})
        file_keys = set()
    cohort = synth_cohort(cfg, mesh, parc)
    out = out_path(args.out)
    store.write_cohort(out, cohort)
    man.config = cfg.to_dict()
    man.sources = {k: "cli" if cli.get(k) is not None else "config" if k in file_keys else "default"
                   for k in man.config}
    man.seeds = {"seed": cfg.seed, "population_seed": cfg.population_seed}
    man.inputs += [args.mesh, args.parcellation] + ([args.config] if args.config else [])
    man.outputs.append(out)
    counts = {d: cohort.diagnosis.count(d) for d in dict.fromkeys(cohort.diagnosis)}
    print(f"{len(cohort)} subjects {counts} x {cohort.p} vertices -> {out}")
    return out


def cmd_split(args, man):
    cohort = store.read_cohort(args.cohort)
    fractions = parse_floats(args.fractions, 3)
    parts = split_cohort(cohort, fractions, args.seed)
    out_dir = out_path(Path(args.out_dir) / "x").parent
    stem = Path(args.cohort).stem
    outs = []
    for name, part in zip(("train", "val", "test"), parts):
        p = out_dir / f"{stem}.{name}.scb"
        store.write_cohort(p, part)
        outs.append(p)
        print(f"{name}: {len(part)} subjects -> {p}")
    man.config = {"fractions": fractions}
    man.seeds = {"seed": args.seed}
    man.inputs.append(args.cohort)
    man.outputs += outs
    return out_dir


TRAIN_FLAGS = {
    "lr": "lr", "weight_decay": "weight_decay", "epochs": "epochs", "batch_size": "batch_size",
    "sampling_rate": "sampling_rate", "seed": "seed", "val_seed": "val_seed",
}


def cmd_train(args, man):
    tr = store.read_cohort(args.train)
    va = store.read_cohort(args.val)
    if args.healthy_label:
        tr, va = tr.select(args.healthy_label), va.select(args.healthy_label)
    file_cfg = read_toml(args.config)
    fields = list(TrainConfig.__dataclass_fields__)
    unknown = set(file_cfg) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
    cli = {k: getattr(args, k) for k in TRAIN_FLAGS}
    cli["hidden"] = [int(h) for h in args.hidden.split(",")] if args.hidden else None
    defaults = {k: f.default for k, f in TrainConfig.__dataclass_fields__.items()}
    values, sources = resolve(fields, cli, file_cfg, defaults)
    cfg = TrainConfig(**values)

    def progress(epoch, hist):
        log.info("epoch %d/%d train %.5f val %.5f", epoch + 1, cfg.epochs, hist.train_loss[-1], hist.val_loss[-1])

    model, hist = train(tr, va, cfg, callback=progress)
    out = out_path(args.out)
    store.write_model(out, model, extra={
        "best_epoch": hist.best_epoch, "train_loss": hist.train_loss, "val_loss": hist.val_loss,
        "train_cohort": tr.config_hash,
    })
    man.config = cfg.to_dict()
    man.sources = sources
    man.seeds = {"seed": cfg.seed, "val_seed": cfg.val_seed}
    man.inputs += [args.train, args.val] + ([args.config] if args.config else [])
    man.outputs.append(out)
    print(f"best epoch {hist.best_epoch + 1} val loss {hist.best_val_loss:.5f} -> {out}")
    return out


def cmd_sigma(args, man):
    model = store.read_model(args.model)
    val = store.read_cohort(args.val).select(args.healthy_label)
    sigma = engine.residual_sigma(model, val, args.s, args.m, args.q, args.seed, threads=args.threads)
    out = out_path(args.out)
    meta = {"s": args.s, "q": args.q, "m": args.m, "base_seed": args.seed, "n_subjects": len(val)}
    store.write_sigma(out, sigma, meta)
    man.config = dict(meta, threads=args.threads)
    man.seeds = {"base_seed": args.seed}
    man.inputs += [args.model, args.val]
    man.outputs += [out, store.sidecar_path(out)]
    print(f"sigma over {len(val)} subjects: median {np.median(sigma):.4f} mm -> {out}")
    return out


def cmd_deviate(args, man):
    model = store.read_model(args.model)
    sigma, sig_meta = store.read_sigma(args.sigma)
    cohort = store.read_cohort(args.cohort)
    defaults = {"s": 0.2, "q": 0.95, "m": 500, "seed": 0}
    sidecar = dict(sig_meta)
    if "base_seed" in sidecar:
        sidecar["seed"] = sidecar["base_seed"]
    values, sources = resolve(list(defaults), vars(args), sidecar, defaults)
    names = [r for r in args.rois.split(",") if r] if args.rois else (["ad_roi"] if args.parcellation else [])
    rois = {}
    if any(r != "cortex" for r in names):
        if not args.parcellation:
            raise ConfigurationError("--rois needs --parcellation")
        rois = load_rois(store.read_parcellation(args.parcellation), names)
    if args.all:
        sub = cohort
    else:
        sub = cohort.subset([cohort.index_of(sid) for sid in args.subject_id])
    maps = engine.deviation_maps(model, sub, sigma, values["s"], values["m"], values["q"], values["seed"],
                                 rois=rois, threads=args.threads)
    out_dir = out_path(Path(args.out_dir) / "x").parent
    mesh = store.read_mesh_ply(args.mesh) if args.ply else None
    if args.ply and mesh is None:
        raise ConfigurationError("--ply needs --mesh")
    for i, dmap in enumerate(maps):
        rec = sub[i]
        p = out_dir / f"{rec.id}.csv"
        store.write_map(p, dmap, extra={"diagnosis": rec.diagnosis, "age": rec.age, "sex": rec.sex,
                                        "site": rec.site, "method": "scsr"})
        if mesh is not None:
            store.write_mesh_ply(out_dir / f"{rec.id}.ply", mesh, dmap.z, "z")
    man.config = dict(values, rois=names, n_subjects=len(sub), threads=args.threads)
    man.sources = sources
    man.seeds = {"base_seed": values["seed"]}
    man.inputs += [args.model, args.sigma, args.cohort] + ([args.parcellation] if args.parcellation else [])
    man.outputs.append(out_dir)
    print(f"{len(maps)} deviation maps -> {out_dir}")
    return out_dir


def _baseline_fit(args, man):
    cohort = store.read_cohort(args.train)
    if args.healthy_label:
        cohort = cohort.select(args.healthy_label)
    if args.kind == "popref":
        model = baselines.popref_fit(cohort, args.width)
        man.config = {"width_years": args.width}
    else:
        parc = store.read_parcellation(args.parcellation) if args.parcellation else None
        if parc is None:
            raise ConfigurationError(f"{args.kind} is a parcel-level model and needs --parcellation")
        kwargs = {}
        if args.kind == "gamlss":
            kwargs = {"iters": args.iters, "tol": args.tol}
            man.config = dict(kwargs)
        try:
            model = baselines.fit_parcel_model(args.kind, cohort, parc, **kwargs)
        except ConvergenceError as exc:
            if not args.keep_unconverged:
                raise
            log.warning("%s; keeping the last iterate", exc)
            model = exc.last_iterate
            man.config["converged"] = False
        man.inputs.append(args.parcellation)
    out = out_path(args.out)
    store.write_json(out, model.to_dict())
    man.inputs.append(args.train)
    man.outputs.append(out)
    print(f"{args.kind} fitted on {len(cohort)} subjects -> {out}")
    return out


def _baseline_apply(args, man):
    model = baselines.model_from_dict(store.read_json(args.model))
    cohort = store.read_cohort(args.cohort)
    out_dir = out_path(Path(args.out_dir) / "x").parent
    names = [r for r in args.rois.split(",") if r] if args.rois else (["ad_roi"] if args.parcellation else [])
    parc = store.read_parcellation(args.parcellation) if args.parcellation else None
    if model.kind != "popref" and parc is None:
        raise ConfigurationError(f"{model.kind} is a parcel-level model and needs --parcellation")
    if any(r != "cortex" for r in names) and parc is None:
        raise ConfigurationError("--rois needs --parcellation")
    for i in range(len(cohort)):
        rec = cohort[i]
        extra = {"diagnosis": rec.diagnosis, "age": rec.age, "sex": rec.sex, "site": rec.site,
                 "method": model.kind}
        if model.kind == "popref":
            mean, std = model.reference(rec.age)
            rois = load_rois(parc, names) if parc is not None else {}
            z, means = engine.zscore_map(rec.thickness, mean, std, rois)
            dmap = engine.DeviationMap(rec.thickness.astype(np.float64), mean, std, z, float("nan"),
                                       float("nan"), 0, 0, means, None, rec.id)
            _, clamped = model.bracket_of(rec.age)
            extra["age_clamped"] = clamped
            store.write_map(out_dir / f"{rec.id}.csv", dmap, extra)
        else:
            vals = parc.parcel_means(rec.thickness)
            z = np.asarray(model.z(vals[None, :], [rec.age], [rec.sex]), dtype=np.float64).reshape(-1)
            means = {"cortex": float(z.mean())}
            for name in names:
                if name != "cortex":
                    ids = sorted(parc.roi_sets[name]) if name in parc.roi_sets else None
                    if not ids:
                        raise ConfigurationError(f"unknown or empty ROI {name!r}")
                    means[name] = float(z[ids].mean())
            with open(out_dir / f"{rec.id}.csv", "w") as fh:
                fh.write("parcel_id,z\n")
                for j, v in enumerate(z):
                    fh.write(f"{j},{store.FLOAT_FMT.format(v)}\n")
            meta = {"format_version": store.FORMAT_VERSION, "subject_id": rec.id, "roi_means": means, **extra}
            store.write_json(out_dir / f"{rec.id}.json", meta)
    man.inputs += [args.model, args.cohort]
    man.outputs.append(out_dir)
    print(f"{model.kind} z for {len(cohort)} subjects -> {out_dir}")
    return out_dir


def cmd_baseline(args, man):
    man.command = f"baseline {args.kind} {args.action}"
    return _baseline_fit(args, man) if args.action == "fit" else _baseline_apply(args, man)


def read_labels(path):
    if path is None:
        return None
    if str(path).endswith(".csv"):
        with open(path, newline="") as fh:
            return {row["subject_id"]: row["diagnosis"] for row in csv.DictReader(fh)}
    cohort = store.read_cohort(path)
    return dict(zip(cohort.ids, cohort.diagnosis))


def evaluate_scores(ids, diagnosis, roi_z, roi, dataset, n_perm=2000, seed=0):
    """Rows of (metric, dataset, group_pair, value, p, p_bh, p_bonferroni)."""
    z = np.asarray(roi_z, dtype=np.float64)
    groups = sorted(set(diagnosis), key=lambda d: ORDINAL.get(d, 99))
    rows = []
    if len(groups) >= 2:
        pair_rows = []
        for a_i, lo in enumerate(groups):
            for hi in groups[a_i + 1:]:
                keep = np.array([d in (lo, hi) for d in diagnosis])
                lab = np.array([d == hi for d in diagnosis])[keep]
                auc = stats.roc_auc(-z[keep], lab)
                za = z[np.array([d == lo for d in diagnosis])]
                zb = z[np.array([d == hi for d in diagnosis])]
                _, p_rs = stats.wilcoxon_rank_sum(za, zb)
                diff, p_perm = stats.permutation_median_diff(za, zb, n_perm=n_perm, seed=seed)
                pair_rows.append([("auc", f"{lo}-{hi}", auc, p_rs), ("median_diff", f"{lo}-{hi}", diff, p_perm)])
        for k in range(2):
            block = [r[k] for r in pair_rows]
            ps = [r[3] for r in block]
            bh, bf = stats.benjamini_hochberg(ps), stats.bonferroni(ps)
            rows += [(m, dataset, pair, v, p, b, f) for (m, pair, v, p), b, f in zip(block, bh, bf)]
        rows.append(("multiclass_auc", dataset, "all", stats.multiclass_auc(-z, diagnosis), None, None, None))
    ordinal = [ORDINAL[d] for d in diagnosis if d in ORDINAL]
    if len(set(ordinal)) >= 2 and len(ordinal) == len(diagnosis):
        rows.append(("spearman", dataset, "all", stats.spearman(ordinal, z), None, None, None))
    for g in groups:
        zg = z[np.array([d == g for d in diagnosis])]
        rows.append(("mean_z", dataset, g, float(zg.mean()), None, None, None))
    return rows


def cmd_evaluate(args, man):
    maps_dir = Path(args.maps_dir)
    sidecars = sorted(p for p in maps_dir.glob("*.json") if p.name != "manifest.json")
    if not sidecars:
        raise InsufficientDataError(f"no deviation maps found in {maps_dir}")
    labels = read_labels(args.labels)
    ids, diag, scores = [], [], []
    for p in sidecars:
        meta = json.loads(p.read_text())
        sid = meta.get("subject_id", p.stem)
        d = labels.get(sid) if labels is not None else meta.get("diagnosis")
        if d is None:
            raise ConfigurationError(f"no diagnosis label for subject {sid!r}")
        if args.roi not in meta.get("roi_means", {}):
            raise ConfigurationError(f"map {p.name} has no mean for ROI {args.roi!r}")
        ids.append(sid)
        diag.append(d)
        scores.append(meta["roi_means"][args.roi])
    dataset = args.dataset or maps_dir.name
    rows = evaluate_scores(ids, diag, scores, args.roi, dataset, args.n_perm, args.seed)
    out = out_path(args.out)

    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(out, "w", newline="") as fh:
        fh.write("metric,dataset,group_pair,roi,value,p_value,p_bh,p_bonferroni\n")
        for m, ds, pair, v, p, b, f in rows:
            fh.write(f"{m},{ds},{pair},{args.roi},{fmt(v)},{fmt(p)},{fmt(b)},{fmt(f)}\n")
    summary = {
        "dataset": dataset, "roi": args.roi, "n_subjects": len(ids),
        "groups": {g: diag.count(g) for g in sorted(set(diag), key=lambda d: ORDINAL.get(d, 99))},
        "metrics": [{"metric": m, "group_pair": pair, "value": v, "p_value": p, "p_bh": b, "p_bonferroni": f}
                    for m, _, pair, v, p, b, f in rows],
    }
    summary_path = out.with_suffix(".json")
    store.write_json(summary_path, summary)
    man.config = {"roi": args.roi, "n_perm": args.n_perm}
    man.seeds = {"seed": args.seed}
    man.inputs += [maps_dir] + ([args.labels] if args.labels else [])
    man.outputs += [out, summary_path]
    for m, _, pair, v, p, _, _ in rows:
        print(f"{m:15s} {pair:8s} {v: .4f}" + ("" if p is None else f"  p={p:.3g}"))
    return out


def cmd_sweep(args, man):
    model = store.read_model(args.model)
    val = store.read_cohort(args.val)
    s_grid, q_grid = parse_grid(args.s_grid), parse_grid(args.q_grid)
    rois, parc = {}, None
    if args.roi != "cortex" or args.strategy == "parcel":
        if not args.parcellation:
            raise ConfigurationError("a non-cortex ROI or the parcel strategy needs --parcellation")
        parc = store.read_parcellation(args.parcellation)
        if args.roi != "cortex":
            rois = load_rois(parc, [args.roi])
    sigma_cohort = store.read_cohort(args.sigma_val).select("CN") if args.sigma_val else None
    rows = engine.sweep(model, val, s_grid, q_grid, args.m, args.seed, rois=rois, roi=args.roi,
                        sigma_cohort=sigma_cohort, strategy=args.strategy, parcellation=parc,
                        threads=args.threads)
    out = out_path(args.out)
    with open(out, "w") as fh:
        fh.write("s,q,rec_error_cn,rec_error_ad,auc\n")
        for r in rows:
            fh.write(f"{r.s!r},{r.q!r},{r.rec_error_cn!r},{r.rec_error_ad!r},{r.auc!r}\n")
    man.config = {"s_grid": s_grid, "q_grid": q_grid, "m": args.m, "roi": args.roi,
                  "strategy": args.strategy, "threads": args.threads}
    man.seeds = {"base_seed": args.seed}
    man.inputs += [args.model, args.val]
    man.outputs.append(out)
    print(f"{len(rows)} grid points -> {out}")
    return out


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CODES["usage"], f"error: usage: {message}\n")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="scsr", description="Stochastic self-reconstruction deviation maps for cortical thickness.",
                epilog=EPILOG, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"scsr {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command", parser_class=_Parser)

    threads_default = int(os.environ.get("SCSR_THREADS", "1"))

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=EPILOG, formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    def threads(sp):
        sp.add_argument("--threads", type=int, default=threads_default,
                        help="worker threads for inference (results do not depend on it; default 1)")

    sp = add("make-mesh", cmd_make_mesh, "write an icosphere mesh as ASCII PLY")
    sp.add_argument("--order", type=int, required=True, help="subdivision order 0..7")
    sp.add_argument("--out", required=True)

    sp = add("parcellate", cmd_parcellate, "split a mesh into contiguous parcels and define ROIs")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--k", type=int, default=34, help="number of parcels (default 34)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--roi", action="append", metavar="NAME=ID,ID",
                    help="named ROI from parcel ids; may repeat")
    sp.add_argument("--ad-roi-size", type=int, default=4,
                    help="parcels in the default contiguous 'ad_roi' if none is given (0 disables)")
    sp.add_argument("--out", required=True, help="parcellation CSV (ROIs go to <out>.rois.json)")

    sp = add("synth", cmd_synth, "generate a synthetic cohort")
    sp.add_argument("--config", help="TOML cohort config")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--parcellation", required=True)
    sp.add_argument("--groups", help="subjects per diagnosis, e.g. CN=100,MCI=50,AD=50")
    sp.add_argument("--ad-depth", type=float, help="AD atrophy depth in mm (MCI gets half)")
    sp.add_argument("--ad-roi", default="ad_roi", help="ROI receiving atrophy (default ad_roi)")
    sp.add_argument("--spread", type=int, default=2, help="atrophy falloff in hops (default 2)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--population-seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("split", cmd_split, "stratified train/val/test split")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--fractions", default="0.8,0.2,0", help="train,val,test (default 0.8,0.2,0)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", default=".", help="writes <stem>.train.scb, .val.scb, .test.scb")

    sp = add("train", cmd_train, "train the masked reconstruction network")
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--config", help="TOML training config")
    sp.add_argument("--healthy-label", default="CN", help="train only on this label ('' for all)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--sampling-rate", type=float)
    sp.add_argument("--hidden", help="hidden widths, e.g. 1024,1024,1024")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--val-seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("sigma", cmd_sigma, "estimate per-vertex residual std on healthy validation subjects")
    sp.add_argument("--model", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--healthy-label", default="CN")
    sp.add_argument("--s", type=float, default=0.2, help="sampling rate (default 0.2)")
    sp.add_argument("--q", type=float, default=0.95, help="reference centile (default 0.95)")
    sp.add_argument("--m", type=int, default=500, help="reconstructions per subject (default 500)")
    sp.add_argument("--seed", type=int, default=0)
    threads(sp)
    sp.add_argument("--out", required=True)

    sp = add("deviate", cmd_deviate, "compute deviation maps (defaults for s, q, m, seed come from the sigma file)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--sigma", required=True)
    sp.add_argument("--cohort", required=True)
    who = sp.add_mutually_exclusive_group(required=True)
    who.add_argument("--subject-id", action="append", help="subject to map; may repeat")
    who.add_argument("--all", action="store_true", help="map every subject of the cohort")
    sp.add_argument("--parcellation")
    sp.add_argument("--rois", help="comma-separated ROI names (default ad_roi when --parcellation is given)")
    sp.add_argument("--s", type=float)
    sp.add_argument("--q", type=float)
    sp.add_argument("--m", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ply", action="store_true", help="also write a PLY with z per vertex")
    sp.add_argument("--mesh", help="mesh for --ply")
    threads(sp)
    sp.add_argument("--out-dir", required=True)

    sp = add("baseline", cmd_baseline, "fit or apply a reference normative model")
    sp.add_argument("kind", choices=["popref", "gam", "gamlss", "blr"])
    sp.add_argument("action", choices=["fit", "apply"])
    sp.add_argument("--train", help="fit: training cohort")
    sp.add_argument("--healthy-label", default="CN", help="fit: label to fit on ('' for all)")
    sp.add_argument("--width", type=float, default=5.0, help="popref bracket width in years")
    sp.add_argument("--iters", type=int, default=2000, help="gamlss: gradient ascent iterations")
    sp.add_argument("--tol", type=float, default=1e-2, help="gamlss: gradient-norm tolerance")
    sp.add_argument("--keep-unconverged", action="store_true",
                    help="gamlss: save the last iterate instead of failing on non-convergence")
    sp.add_argument("--model", help="apply: fitted model JSON")
    sp.add_argument("--cohort", help="apply: cohort to score")
    sp.add_argument("--parcellation")
    sp.add_argument("--rois", help="comma-separated ROI names (default ad_roi when --parcellation is given)")
    sp.add_argument("--out", help="fit: model JSON")
    sp.add_argument("--out-dir", help="apply: directory for per-subject z files")

    sp = add("evaluate", cmd_evaluate, "AUC, Spearman and rank tests of ROI mean z")
    sp.add_argument("--maps-dir", required=True)
    sp.add_argument("--labels", help="cohort file or CSV with subject_id,diagnosis (default: map sidecars)")
    sp.add_argument("--roi", default="ad_roi")
    sp.add_argument("--dataset", help="dataset name in the report (default: maps dir name)")
    sp.add_argument("--n-perm", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("sweep", cmd_sweep, "reconstruction error and AUC over a grid of s and q")
    sp.add_argument("--model", required=True)
    sp.add_argument("--val", required=True, help="cohort with CN and AD subjects")
    sp.add_argument("--sigma-val", help="healthy cohort for sigma (default: CN subjects of --val)")
    sp.add_argument("--s-grid", default="0.01:0.30:0.01")
    sp.add_argument("--q-grid", default="0.5,0.75,0.95,0.99")
    sp.add_argument("--m", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--roi", default="cortex")
    sp.add_argument("--parcellation")
    sp.add_argument("--strategy", choices=["vertex", "parcel"], default="vertex")
    threads(sp)
    sp.add_argument("--out", required=True)
    return p


def _check_baseline_args(args):
    need = ["train", "out"] if args.action == "fit" else ["model", "cohort", "out_dir"]
    missing = [f"--{n.replace('_', '-')}" for n in need if getattr(args, n) is None]
    if missing:
        raise _UsageError(f"baseline {args.action} needs {', '.join(missing)}")


class _UsageError(Exception):
    pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "threads", 1) < 1:
        parser.exit(EXIT_CODES["usage"], "error: usage: --threads must be >= 1\n")
    man = Manifest(args)
    try:
        if args.command == "baseline":
            _check_baseline_args(args)
        target = args.func(args, man)
        man.write(target)
    except _UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_CODES["usage"]
    except ScsrError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exit_code(exc.category)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
