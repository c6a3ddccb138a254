"""Experiment orchestration: staged, checkpointed, reproducible runs.

A run directory holds ``manifest.json`` (config snapshot, package version,
per-stage wall times and output checksums) plus one subdirectory per stage.
Re-running with an unchanged config skips stages whose recorded outputs
still match their checksums; a forced re-run must reproduce the CSVs
byte-for-byte in single-threaded mode.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..assimilation import MDAConfig, records_to_csv, run_latent_assimilation
from ..ensemble import Ensemble
from ..errors import ConfigError, NumericalError
from ..fields import (ChannelParams, Dataset, Grid, Realization, facies_to_log_perm,
                      FACIES_LOG_PERM, denormalize_array, generate_dataset, load_dataset,
                      normalize_array, prior_realizations, save_dataset)
from ..generative import (GenerativeModel, build_model, decode, encode_latents, facies_decode,
                          load_model, prior_latents, save_model, train)
from ..metrics import (FeatureModel, balanced_accuracy, frechet_distance, geostats_report,
                       train_reservoir_classifier)
from ..nn import load_network, save_network
from ..simulator import ChannelLayout, DataVector, NoiseSpec, Schedule, WellSpec, default_well_pattern, observe, simulate
from .config import ExperimentConfig, dump_config
from . import plots

STAGES = ("dataset", "classifier", "model", "assimilate", "metrics", "report")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class RunManifest:
    def __init__(self, out_dir: Path, config: ExperimentConfig):
        self.path = out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"version": __version__, "config": config.to_dict(), "stages": {}}
        self.data["version"] = __version__
        self.data["config"] = config.to_dict()
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))

    def stage_current(self, name: str, cfg_hash: str, out_dir: Path) -> bool:
        rec = self.data["stages"].get(name)
        if not rec or rec.get("config_hash") != cfg_hash:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            f = out_dir / rel
            if not f.exists() or _sha256(f) != digest:
                return False
        return True

    def record_stage(self, name: str, cfg_hash: str, out_dir: Path, outputs: list[Path],
                     wall_time: float, info: dict | None = None) -> None:
        self.data["stages"][name] = {
            "config_hash": cfg_hash,
            "wall_time_s": round(wall_time, 3),
            "outputs": {str(p.relative_to(out_dir)): _sha256(p) for p in outputs},
            "info": info or {},
        }
        self.write()


# -- well layout -------------------------------------------------------------------


def wells_for(cfg: ExperimentConfig) -> list[WellSpec]:
    base = default_well_pattern(cfg.grid, bhp=cfg.flow.bhp_producers, wir=cfg.flow.wir_injectors)
    if cfg.flow.injector_bhp_limit is None:
        return base
    return [WellSpec(w.name, w.i, w.j, w.role, w.control,
                     bhp_limit=cfg.flow.injector_bhp_limit if w.role == "injector" else None)
            for w in base]


# -- stage: dataset ----------------------------------------------------------------


def stage_dataset(cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest) -> Path:
    sec = cfg.section_dict("case", "grid", "dataset")
    h = _config_hash(sec)
    target = out_dir / "dataset.rmds"
    if manifest.stage_current("dataset", h, out_dir):
        return target
    t0 = time.time()
    ds = generate_dataset(cfg.grid, cfg.case, cfg.dataset.count, cfg.dataset.seed,
                          channel_params=cfg.dataset.channels, cov_spec=cfg.dataset.covariance)
    save_dataset(ds, target)
    manifest.record_stage("dataset", h, out_dir, [target], time.time() - t0,
                          {"count": ds.count, "bounds": list(ds.bounds)})
    return target


# -- stage: classifier ---------------------------------------------------------------


def stage_classifier(cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest) -> Path | None:
    if not cfg.classifier.enabled:
        return None
    sec = cfg.section_dict("case", "grid", "classifier")
    sec["dataset_channels"] = cfg.to_dict()["dataset"]["channels"]
    h = _config_hash(sec)
    target = out_dir / "classifier"
    if manifest.stage_current("classifier", h, out_dir):
        return target
    t0 = time.time()
    labeled = generate_dataset(cfg.grid, cfg.case, cfg.classifier.count, cfg.classifier.seed,
                               channel_params=cfg.dataset.channels, cov_spec=cfg.dataset.covariance,
                               with_labels=True)
    model, info = train_reservoir_classifier(labeled, epochs=cfg.classifier.epochs,
                                             batch=cfg.classifier.batch, lr=cfg.classifier.lr,
                                             seed=cfg.classifier.seed,
                                             feature_width=cfg.classifier.feature_width)
    save_network(model.net, target, metadata={
        "feature_layer": model.feature_layer, "n_classes": model.n_classes,
        "bounds": list(model.bounds), **info,
    })
    outputs = sorted(p for p in target.rglob("*") if p.is_file())
    manifest.record_stage("classifier", h, out_dir, outputs, time.time() - t0, info)
    return target


def load_classifier(directory: str | Path) -> FeatureModel:
    directory = Path(directory)
    if not directory.exists():
        raise ConfigError(f"classifier directory not found: {directory}")
    net, meta = load_network(directory)
    return FeatureModel(net=net, feature_layer=int(meta["feature_layer"]),
                        n_classes=int(meta["n_classes"]), bounds=tuple(meta["bounds"]))


# -- stage: model training --------------------------------------------------------------


def stage_model(cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest,
                dataset_path: Path, classifier_dir: Path | None, log=None) -> Path | None:
    if cfg.mda.param == "identity":
        return None
    sec = cfg.section_dict("case", "grid", "dataset", "model", "seed")
    h = _config_hash(sec)
    target = out_dir / "model"
    if manifest.stage_current("model", h, out_dir):
        return target
    t0 = time.time()
    ds = load_dataset(dataset_path)
    feature_model = None
    needs_features = cfg.model.kind == "dcgan" or (
        cfg.model.kind == "vaegan" and cfg.model.gamma_perceptual > 0)
    if needs_features and classifier_dir is not None:
        feature_model = load_classifier(classifier_dir)
    model = build_model(cfg.model.kind, cfg.grid.shape, cfg.model, seed=cfg.seed, bounds=ds.bounds)
    model, trace = train(model, ds, val_fraction=0.1, seed=cfg.seed + 1,
                         feature_model=feature_model, log=log)
    save_model(model, target, trace)
    _plot_training_curves(target, trace)
    outputs = sorted(p for p in target.rglob("*") if p.is_file() and p.suffix != ".svg")
    manifest.record_stage("model", h, out_dir, outputs, time.time() - t0,
                          {"epochs_run": len(trace.rows)})
    return target


def _plot_training_curves(target: Path, trace) -> None:
    if not trace.rows:
        return
    keys = [k for k in ("recon", "kl", "total", "val_mse", "gen_loss", "disc_loss")
            if any(k in row for row in trace.rows)]
    series = {}
    for k in keys:
        vals = [row[k] for row in trace.rows if k in row]
        if vals:
            series[k] = np.asarray(vals)
    for k, vals in series.items():
        plots.line_chart(target / f"curve_{k}.svg", {k: vals}, xlabel="epoch", ylabel=k,
                         title=f"training {k}")


# -- stage: assimilation ---------------------------------------------------------------


def _truth_realization(cfg: ExperimentConfig) -> Realization:
    from ..fields import gaussian_random_field

    return gaussian_random_field(cfg.grid, cfg.prior.spec(), cfg.truth_seed)


def _facies_levels(cfg: ExperimentConfig, bounds: tuple[float, float]) -> np.ndarray:
    return normalize_array(np.asarray(FACIES_LOG_PERM), *bounds)


def stage_assimilate(cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest,
                     dataset_path: Path, model_dir: Path | None, log=None) -> Path:
    sec = cfg.to_dict()
    sec.pop("classifier", None)
    h = _config_hash(sec)
    target = out_dir / "assimilation"
    if manifest.stage_current("assimilate", h, out_dir):
        return target
    t0 = time.time()
    target.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(dataset_path)
    lo, hi = ds.bounds
    wells = wells_for(cfg)
    schedule = cfg.schedule
    fr = cfg.flow.fluid_rock()
    layout = ChannelLayout.from_wells(wells, cfg.flow.include_injector_rate)

    truth = _truth_realization(cfg)
    d_true = simulate(truth, wells, schedule, fr, layout=layout)
    d_obs, cd = observe(d_true, cfg.noise, cfg.obs_seed)
    if np.any(cd <= 0):
        raise ConfigError("observation noise must be positive for assimilation (C_D must be invertible)")

    model = None
    if cfg.mda.param == "latent":
        if model_dir is None:
            raise ConfigError("latent assimilation needs a trained model directory")
        model = load_model(model_dir)

    priors = prior_realizations(cfg.grid, cfg.prior.spec(), cfg.mda.n_e, cfg.mda.prior_seed)
    prior_stack = np.stack([r.values for r in priors])

    if model is not None:
        prior_norm = normalize_array(prior_stack, lo, hi)
        z0 = encode_latents(model, prior_norm, cfg.mda.latent_seed) if model.has_encoder \
            else prior_latents(model, cfg.mda.n_e, cfg.mda.latent_seed)
        ens = Ensemble(z0, space="latent")

        def decode_fn(z):
            return denormalize_array(decode(model, z), lo, hi)
    else:
        ens = Ensemble(prior_stack.reshape(cfg.mda.n_e, -1), space="model")

        def decode_fn(z):
            return z.reshape(-1, cfg.grid.ny, cfg.grid.nx)

    def forward_fn(field, j):
        r = Realization(cfg.grid, field, "continuous-logperm")
        return simulate(r, wells, schedule, fr, layout=layout).values

    accuracy_fn = None
    if cfg.case == "categorical":
        levels_log = np.asarray(FACIES_LOG_PERM)
        truth_classes = facies_decode(truth.values, levels_log)

        def accuracy_fn(fields):
            preds = facies_decode(fields, levels_log)
            return float(np.mean([balanced_accuracy(p, truth_classes) for p in preds]))

    mda = MDAConfig(n_a=cfg.mda.n_a)
    result = run_latent_assimilation(ens, decode_fn, forward_fn, d_obs.values, cd, mda,
                                     seed=cfg.mda.seed, m_true=truth.values,
                                     accuracy_fn=accuracy_fn)

    records_to_csv(result.records, target / "iterations.csv")
    np.savetxt(target / "truth_field.csv", truth.values, delimiter=",", fmt="%.8g")
    d_true.to_csv(target / "d_true.csv")
    d_obs.to_csv(target / "d_obs.csv")
    np.savetxt(target / "cd_diag.csv", cd, delimiter=",", fmt="%.10g")
    _save_ensemble_snapshots(target / "snapshots", result)
    _save_fields(target / "prior_fields.bin", result.prior_fields)
    _save_fields(target / "posterior_fields.bin", result.posterior_fields)
    np.savetxt(target / "prior_predictions.csv", result.prior_predictions, delimiter=",", fmt="%.10g")
    np.savetxt(target / "posterior_predictions.csv", result.predictions, delimiter=",", fmt="%.10g")

    outputs = sorted(p for p in target.rglob("*") if p.is_file())
    manifest.record_stage("assimilate", h, out_dir, outputs, time.time() - t0, {
        "prior_dm": result.records[0].mean_dm,
        "final_dm": result.records[-1].mean_dm,
        "prior_spread": result.records[0].spread,
        "final_spread": result.records[-1].spread,
        "n_d": int(d_obs.n_data),
    })
    return target


def _save_ensemble_snapshots(directory: Path, result) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"iterations": len(result.records), "space": result.posterior.space,
            "n_members": result.posterior.n_members, "dim": result.posterior.dim,
            "files": {"final": "final.f32"}}
    (directory / "final.f32").write_bytes(result.posterior.members.astype("<f4").tobytes())
    (directory / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _save_fields(path: Path, fields: np.ndarray) -> None:
    path.write_bytes(np.asarray(fields, dtype="<f4").tobytes())


def load_fields(path: Path, grid: Grid) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return raw.reshape(-1, grid.ny, grid.nx).astype(np.float64)


# -- stage: metrics -----------------------------------------------------------------------


def stage_metrics(cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest,
                  dataset_path: Path, model_dir: Path | None, classifier_dir: Path | None) -> Path:
    sec = cfg.section_dict("case", "grid", "dataset", "model", "classifier", "seed")
    h = _config_hash(sec)
    target = out_dir / "metrics"
    if manifest.stage_current("metrics", h, out_dir):
        return target
    t0 = time.time()
    target.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(dataset_path)
    rows = []
    info = {}
    if model_dir is not None and cfg.mda.param == "latent":
        model = load_model(model_dir)
        rng = np.random.default_rng(cfg.seed + 99)
        n = min(256, ds.count)
        zs = rng.normal(size=(n, model.latent_dim))
        samples = decode(model, zs)                      # normalized space
        ref = ds.normalized()[rng.permutation(ds.count)[:n]].astype(np.float64)
        rep = geostats_report(ref, samples)
        for k, v in rep.as_dict().items():
            rows.append((k, v))
        if classifier_dir is not None:
            fm = load_classifier(classifier_dir)
            frd = frechet_distance(fm.features(ref), fm.features(samples))
            rows.append(("frd", frd))
            info["frd"] = frd
        info.update(rep.as_dict())
    path = target / "geostats.csv"
    with path.open("w") as f:
        f.write("metric,value\n")
        for k, v in rows:
            f.write(f"{k},{v:.10g}\n")
    manifest.record_stage("metrics", h, out_dir, [path], time.time() - t0, info)
    return target


# -- stage: report ----------------------------------------------------------------------


def stage_report(cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest) -> Path:
    h = _config_hash(cfg.to_dict())
    target = out_dir / "report"
    if manifest.stage_current("report", h, out_dir):
        return target
    t0 = time.time()
    target.mkdir(parents=True, exist_ok=True)
    assim = out_dir / "assimilation"
    if not assim.exists():
        raise ConfigError(f"missing assimilation outputs at {assim}; run the assimilate stage first")

    # iteration metric panels
    rows = _read_csv_dicts(assim / "iterations.csv")
    iters = np.array([int(r["iteration"]) for r in rows])
    csv_out = target / "iteration_metrics.csv"
    csv_out.write_text((assim / "iterations.csv").read_text())
    for key, label in (("mean_dm", "mean data mismatch"), ("rmse_mean", "RMSE"),
                       ("spread", "spread"), ("balanced_accuracy", "balanced accuracy")):
        vals = [r[key] for r in rows]
        if any(v == "" for v in vals):
            continue
        arr = np.array([float(v) for v in vals])
        plots.line_chart(target / f"iter_{key}.svg", {label: arr}, x=iters,
                         xlabel="assimilation iteration", ylabel=label,
                         title=f"{label} vs iteration", logy=key == "mean_dm")

    # field panels: truth, prior/posterior mean and std
    truth = np.loadtxt(assim / "truth_field.csv", delimiter=",")
    prior_fields = load_fields(assim / "prior_fields.bin", cfg.grid)
    post_fields = load_fields(assim / "posterior_fields.bin", cfg.grid)
    panels = [
        ("truth", truth),
        ("prior mean", prior_fields.mean(axis=0)),
        ("posterior mean", post_fields.mean(axis=0)),
    ]
    plots.field_panels(target / "fields_mean.svg", panels)
    plots.field_panels(target / "fields_std.svg", [
        ("prior std", prior_fields.std(axis=0)),
        ("posterior std", post_fields.std(axis=0)),
    ])
    np.savetxt(target / "prior_mean.csv", prior_fields.mean(axis=0), delimiter=",", fmt="%.8g")
    np.savetxt(target / "posterior_mean.csv", post_fields.mean(axis=0), delimiter=",", fmt="%.8g")
    np.savetxt(target / "prior_std.csv", prior_fields.std(axis=0), delimiter=",", fmt="%.8g")
    np.savetxt(target / "posterior_std.csv", post_fields.std(axis=0), delimiter=",", fmt="%.8g")
    plots.field_panels(target / "member1.svg", [
        ("member 1 prior", prior_fields[0]),
        ("member 1 posterior", post_fields[0]),
    ])
    np.savetxt(target / "member1_prior.csv", prior_fields[0], delimiter=",", fmt="%.8g")
    np.savetxt(target / "member1_posterior.csv", post_fields[0], delimiter=",", fmt="%.8g")

    # per-well rate fans
    wells = wells_for(cfg)
    layout = ChannelLayout.from_wells(wells, cfg.flow.include_injector_rate)
    times = cfg.schedule.report_times
    prior_preds = np.loadtxt(assim / "prior_predictions.csv", delimiter=",", ndmin=2)
    post_preds = np.loadtxt(assim / "posterior_predictions.csv", delimiter=",", ndmin=2)
    d_obs = _read_data_csv(assim / "d_obs.csv")
    names = layout.channel_names()
    per_time = layout.per_time
    for qty, label in (("oil_rate", "oil rate (m3/day)"), ("water_rate", "water rate (m3/day)")):
        chan_idx = [i for i, nm in enumerate(names) if nm.endswith(qty) and nm.startswith("P")]
        if not chan_idx:
            continue
        prior_by, post_by, obs_by = {}, {}, {}
        series_rows = []
        for ci in chan_idx:
            wname = names[ci].split(".")[0]
            cols = [t * per_time + ci for t in range(len(times))]
            prior_by[wname] = prior_preds[:, cols]
            post_by[wname] = post_preds[:, cols]
            obs_by[wname] = d_obs[cols]
            series_rows.append((wname, obs_by[wname]))
        plots.well_grid(target / f"wells_{qty}.svg", times, prior_by, post_by, obs_by,
                        ylabel=label, title="production history")
        with (target / f"wells_{qty}_observed.csv").open("w") as f:
            f.write("well," + ",".join(f"t{int(t)}" for t in times) + "\n")
            for wname, obs in series_rows:
                f.write(wname + "," + ",".join(f"{v:.10g}" for v in obs) + "\n")

    outputs = sorted(p for p in target.rglob("*") if p.is_file() and p.suffix == ".csv")
    manifest.record_stage("report", h, out_dir, outputs, time.time() - t0)
    return target


def _read_csv_dicts(path: Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def _read_data_csv(path: Path) -> np.ndarray:
    rows = _read_csv_dicts(path)
    vals = []
    for row in rows:
        vals.extend(float(v) for k, v in row.items() if k != "time_days")
    return np.asarray(vals)


# -- entry points ------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, log=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out_dir, cfg)
    dump_config(cfg, out_dir / "config.yaml")
    dataset_path = stage_dataset(cfg, out_dir, manifest)
    classifier_dir = stage_classifier(cfg, out_dir, manifest)
    model_dir = stage_model(cfg, out_dir, manifest, dataset_path, classifier_dir, log=log)
    stage_assimilate(cfg, out_dir, manifest, dataset_path, model_dir, log=log)
    stage_metrics(cfg, out_dir, manifest, dataset_path, model_dir, classifier_dir)
    stage_report(cfg, out_dir, manifest)
    return out_dir


def compare_models(run_dirs: list[str | Path], out_path: str | Path) -> dict:
    """Side-by-side table of final metrics for runs differing only in model."""
    from .config import load_config

    runs = []
    for d in run_dirs:
        d = Path(d)
        cfg_path = d / "config.yaml"
        if not cfg_path.exists():
            raise ConfigError(f"not a run directory (missing config.yaml): {d}")
        man_path = d / "manifest.json"
        if not man_path.exists():
            raise ConfigError(f"not a run directory (missing manifest.json): {d}")
        cfg = load_config(cfg_path)
        manifest = json.loads(man_path.read_text())
        runs.append((d, cfg, manifest))

    base = runs[0][1].to_dict()
    for d, cfg, _ in runs[1:]:
        other = cfg.to_dict()
        diffs = _dict_diff(base, other, skip_prefixes=("model",))
        if diffs:
            raise ConfigError("runs are not comparable; differing non-model fields: " + ", ".join(diffs))

    columns = ("frd", "final_dm", "rmse_mean", "spread", "balanced_accuracy",
               "variogram_mse", "connectivity_mse", "histogram_kl", "pca_correlation", "mds_mmd")
    best_high = {"pca_correlation", "balanced_accuracy"}
    table: dict[str, dict] = {}
    for d, cfg, manifest in runs:
        name = cfg.model.kind if cfg.mda.param == "latent" else "identity"
        row: dict[str, float | None] = {}
        info_m = manifest["stages"].get("metrics", {}).get("info", {})
        info_a = manifest["stages"].get("assimilate", {}).get("info", {})
        rows = _read_csv_dicts(d / "assimilation" / "iterations.csv")
        last = rows[-1]
        row["final_dm"] = info_a.get("final_dm")
        row["spread"] = info_a.get("final_spread")
        row["rmse_mean"] = float(last["rmse_mean"]) if last.get("rmse_mean") else None
        row["balanced_accuracy"] = float(last["balanced_accuracy"]) if last.get("balanced_accuracy") else None
        for k in ("frd", "variogram_mse", "connectivity_mse", "histogram_kl",
                  "pca_correlation", "mds_mmd"):
            row[k] = info_m.get(k)
        table[name] = row

    best: dict[str, str] = {}
    for col in columns:
        entries = [(name, row[col]) for name, row in table.items() if row.get(col) is not None]
        if not entries:
            continue
        pick = max if col in best_high else min
        best[col] = pick(entries, key=lambda kv: kv[1])[0]

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as f:
        f.write("model," + ",".join(columns) + "\n")
        for name, row in table.items():
            f.write(name + "," + ",".join("" if row.get(c) is None else f"{row[c]:.10g}" for c in columns) + "\n")
        f.write("best," + ",".join(best.get(c, "") for c in columns) + "\n")
    return {"table": table, "best": best}


def _dict_diff(a: dict, b: dict, skip_prefixes=(), prefix="") -> list[str]:
    diffs = []
    keys = set(a) | set(b)
    for k in sorted(keys):
        path = f"{prefix}.{k}" if prefix else k
        if any(path == p or path.startswith(p + ".") for p in skip_prefixes):
            continue
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs.extend(_dict_diff(va, vb, skip_prefixes, path))
        elif va != vb:
            diffs.append(path)
    return diffs
