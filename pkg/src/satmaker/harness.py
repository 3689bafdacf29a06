"""Dataset assembly, method comparison runs, missing-ratio sweeps and reports.

Results are aggregated per (method, band, ratio, scope). The aggregation
unit is the tile: metrics are computed per tile and averaged over tiles
and seeds; ``*_std`` columns are the spread of the per-seed means.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from satmaker import checkpoint as ckpt
from satmaker.baselines import AEConfig, ae_fill_batch, fill_harmonic, fill_nearest, train_autoencoder
from satmaker.denoiser import PromptSpec, normalize_dem, prompt_vocab
from satmaker.diffusion import SamplerConfig, inpaint_batch, make_schedule
from satmaker.errors import ConfigError, IntegrityError
from satmaker.masking import DEFAULT_FILL, random_mask
from satmaker.metrics import mae, perceptual_distance, psnr_from_rmse, rmse, ssim
from satmaker.perceptual import ADAPT_TOL, LAMBDA_STYLE, adapt, make_extractor
from satmaker.raster_io import Raster, tile, write_raster
from satmaker.scene_synth import DEFAULT_BANDS, SceneConfig, synth_band, synth_dem
from satmaker.training import Sample

DEFAULT_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5)
SITES = tuple(f"{i:02d}" for i in range(1, 11))
METRICS = ("ssim", "psnr", "rmse", "mae", "perceptual")
CSV_FIELDS = [
    "method", "band", "missing_ratio", "scope", *METRICS, "n_pixels", "n_tiles",
    *(f"{m}_std" for m in METRICS), "adapter", "error",
]
SCOPES = ("masked", "full")
SEED_ENV = "SATMAKER_SEED"


# --- datasets ---------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    test: list
    train_scenes: list
    test_scenes: list
    task: int = 1

    @property
    def vocab(self) -> list[str]:
        """Prompt tokens of both splits; prompts are metadata, so this leaks no test pixels."""
        return prompt_vocab([s.prompt for s in self.train + self.test])


def scene_configs(n: int, size: int = 64, seed: int = 0, **kw) -> list[SceneConfig]:
    """``n`` scene configs with distinct derived seeds."""
    seeds = np.random.default_rng(np.random.SeedSequence([seed, 0xD3])).integers(0, 2**31, size=n)
    return [SceneConfig(size=size, seed=int(s), **kw) for s in seeds]


def split_scenes(scene_ids: list, split=(0.8, 0.2), seed: int = 0) -> tuple[list, list]:
    train_frac, test_frac = split
    if train_frac < 0 or test_frac < 0 or not math.isclose(train_frac + test_frac, 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {split}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17])).permutation(len(scene_ids))
    n_train = int(math.floor(train_frac * len(scene_ids) + 0.5))
    train = sorted(scene_ids[i] for i in order[:n_train])
    test = sorted(scene_ids[i] for i in order[n_train:])
    return train, test


def check_disjoint(train: list, test: list) -> None:
    """Machine check that no scene or tile id appears on both sides of a split."""
    shared_tiles = {s.id for s in train} & {s.id for s in test}
    if shared_tiles:
        raise IntegrityError(f"tile ids in both splits: {sorted(shared_tiles)[:5]}")
    shared_scenes = {s.scene for s in train} & {s.scene for s in test}
    if shared_scenes:
        raise IntegrityError(f"scenes in both splits: {sorted(shared_scenes)[:5]}")


def _task1_samples(idx: int, cfg: SceneConfig, bands, tile_size, overlap) -> list[Sample]:
    scene = f"s{idx:03d}"
    site = SITES[idx % len(SITES)]
    dem = synth_dem(cfg)
    phase = (cfg.seed % cfg.season_period) / cfg.season_period
    dem_tiles = tile(dem, tile_size, overlap)
    out = []
    for band in bands:
        img_tiles = tile(synth_band(dem, band, phase, cfg), tile_size, overlap)
        for t_img, t_dem, (r, c) in zip(img_tiles.tiles, dem_tiles.tiles, img_tiles.origins):
            out.append(Sample(
                id=f"{scene}-{band}-r{r}c{c}",
                image=t_img.data[0],
                dem=t_dem.data[0],
                prompt=PromptSpec(1, band, site=site),
                scene=scene,
            ))
    return out


def _task2_samples(idx: int, cfg: SceneConfig, bands, tile_size, overlap, n_steps) -> list[Sample]:
    scene = f"s{idx:03d}"
    location = SITES[idx % len(SITES)]
    dem = synth_dem(cfg)
    dem_tiles = tile(dem, tile_size, overlap)
    out = []
    for band in bands:
        prev_tiles = None
        for t in range(n_steps):
            # synthetic monthly acquisitions; the day token indexes position in the series
            date = f"2021-{t % 12 + 1:02d}"
            img_tiles = tile(synth_band(dem, band, t / cfg.season_period, cfg), tile_size, overlap)
            for k, (t_img, t_dem, (r, c)) in enumerate(zip(img_tiles.tiles, dem_tiles.tiles,
                                                             img_tiles.origins)):
                out.append(Sample(
                    id=f"{scene}-{band}-t{t:02d}-r{r}c{c}",
                    image=t_img.data[0],
                    dem=t_dem.data[0],
                    prompt=PromptSpec(2, band, site=location, date=date, day=t),
                    scene=scene,
                    previous=None if prev_tiles is None else prev_tiles[k].data[0],
                ))
            prev_tiles = img_tiles.tiles
    return out


def build_dataset(task: int, scene_cfgs: list, split=(0.8, 0.2), seed: int = 0,
                  bands=DEFAULT_BANDS, tile_size: int | None = None, overlap: float = 0.5,
                  n_steps: int = 6, out_dir=None) -> DatasetSplit:
    """Synthesise scenes, tile them and split at scene granularity.

    With ``out_dir`` the tiles are written as ``.rsr`` files next to
    ``train.json`` / ``test.json`` manifests.
    """
    if task not in (1, 2):
        raise ConfigError(f"task must be 1 or 2, got {task}")
    if not scene_cfgs:
        raise ConfigError("no scene configs")
    ids = [f"s{i:03d}" for i in range(len(scene_cfgs))]
    train_ids, test_ids = split_scenes(ids, split, seed)
    by_scene = {}
    for i, cfg in enumerate(scene_cfgs):
        ts = tile_size or cfg.size
        if task == 1:
            by_scene[ids[i]] = _task1_samples(i, cfg, bands, ts, overlap)
        else:
            by_scene[ids[i]] = _task2_samples(i, cfg, bands, ts, overlap, n_steps)
    train = [s for sid in train_ids for s in by_scene[sid]]
    test = [s for sid in test_ids for s in by_scene[sid]]
    check_disjoint(train, test)
    ds = DatasetSplit(train, test, train_ids, test_ids, task)
    if out_dir is not None:
        write_dataset(ds, out_dir, extra={"seed": seed, "split": list(split),
                                          "scene_seeds": [c.seed for c in scene_cfgs]})
    return ds


def _entries(samples, tile_dir: Path, root: Path) -> list[dict]:
    entries = []
    for s in samples:
        img_path = tile_dir / f"{s.id}.rsr"
        dem_path = tile_dir / f"{s.id}.dem.rsr"
        write_raster(Raster([s.prompt.band], s.image[None]), img_path)
        write_raster(Raster(["dem"], s.dem[None]), dem_path)
        e = {
            "id": s.id,
            "scene": s.scene,
            "band": s.prompt.band,
            "image": str(img_path.relative_to(root)),
            "dem": str(dem_path.relative_to(root)),
            "prompt": s.prompt.to_dict(),
            "mask": None,
        }
        if s.previous is not None:
            prev_path = tile_dir / f"{s.id}.prev.rsr"
            write_raster(Raster([s.prompt.band], s.previous[None]), prev_path)
            e["previous"] = str(prev_path.relative_to(root))
        entries.append(e)
    return entries


def write_dataset(ds: DatasetSplit, out_dir, extra: dict | None = None) -> dict:
    root = Path(out_dir)
    tile_dir = root / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, samples, scenes in (("train", ds.train, ds.train_scenes), ("test", ds.test, ds.test_scenes)):
        doc = {"task": ds.task, "split": name, "scenes": scenes, **(extra or {}), "vocab": ds.vocab,
               "entries": _entries(samples, tile_dir, root)}
        paths[name] = root / f"{name}.json"
        paths[name].write_text(json.dumps(doc, indent=1))
    return paths


def load_split(train_manifest=None, test_manifest=None) -> tuple[list, list]:
    from satmaker.training import load_samples

    train = load_samples(train_manifest) if train_manifest else []
    test = load_samples(test_manifest) if test_manifest else []
    if train and test:
        check_disjoint(train, test)
    return train, test


# --- experiment spec --------------------------------------------------------------

@dataclass
class ExperimentSpec:
    task: int = 1
    methods: tuple = ("nearest", "diffusion")
    missing_ratios: tuple = DEFAULT_RATIOS
    bands: tuple = DEFAULT_BANDS
    seeds: tuple = (0,)
    adapter: str = "off"
    output_dir: str = "results"
    train_manifest: str | None = None
    test_manifest: str | None = None
    model: str | None = None
    autoencoder: str | None = None
    ae_epochs: int = 30
    steps: int = 50
    eta: float = 1.0
    strength: float = 0.9
    adapt_steps: int = 50
    adapt_step_size: float = 0.01
    adapt_tol: float = ADAPT_TOL
    lambda_style: float = LAMBDA_STYLE
    batch_size: int = 64
    previews: bool = True

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.missing_ratios = tuple(float(r) for r in self.missing_ratios)
        self.bands = tuple(self.bands)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.task not in (1, 2):
            raise ConfigError(f"task must be 1 or 2, got {self.task}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unregistered methods {unknown}; known: {sorted(METHODS)}")
        if not self.methods or not self.missing_ratios or not self.seeds or not self.bands:
            raise ConfigError("methods, missing_ratios, bands and seeds must be non-empty")
        for r in self.missing_ratios:
            if not 0.0 <= r <= 0.95:
                raise ConfigError(f"missing ratio {r} outside [0, 0.95]")
        if self.adapter not in ("on", "off"):
            raise ConfigError(f"adapter must be 'on' or 'off', got {self.adapter!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("methods", "missing_ratios", "bands", "seeds"):
            d[k] = list(d[k])
        return d

    def with_env(self) -> "ExperimentSpec":
        """Apply the ``SATMAKER_SEED`` override, if set."""
        raw = os.environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        d = self.to_dict()
        d["seeds"] = [int(raw)]
        return ExperimentSpec.from_dict(d)

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(steps=self.steps, eta=self.eta, strength=self.strength, seed=seed)


# --- methods ----------------------------------------------------------------------

@dataclass
class Resources:
    model: torch.nn.Module | None = None
    ae: object | None = None
    sched: object | None = None
    ex: object | None = None


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays]))[:, None]


def _observed(samples, masks) -> list[np.ndarray]:
    return [np.where(m, np.float32(DEFAULT_FILL), s.image).astype(np.float32) for s, m in zip(samples, masks)]


def _fill_each(fn):
    def run(spec, res, samples, masks, seed):
        return [fn(Raster([s.prompt.band], o[None]), m).data[0]
                for s, o, m in zip(samples, _observed(samples, masks), masks)]
    return run


def _fill_autoencoder(spec, res, samples, masks, seed):
    if res.ae is None:
        raise ConfigError("autoencoder method needs trained weights")
    out = []
    for i in range(0, len(samples), spec.batch_size):
        sl = slice(i, i + spec.batch_size)
        obs = _stack(_observed(samples[sl], masks[sl]))
        m = torch.from_numpy(np.stack(masks[sl]))[:, None]
        out.extend(ae_fill_batch(res.ae, obs, m)[:, 0].numpy())
    return out


def _diffusion(conditioned: bool):
    def run(spec, res, samples, masks, seed):
        if res.model is None:
            raise ConfigError("diffusion methods need a trained denoiser checkpoint")
        cfg = spec.sampler(seed)
        out = []
        for i in range(0, len(samples), spec.batch_size):
            chunk, mchunk = samples[i:i + spec.batch_size], masks[i:i + spec.batch_size]
            obs = _stack(_observed(chunk, mchunk))
            m = torch.from_numpy(np.stack(mchunk))[:, None]
            dem = normalize_dem(_stack([s.dem for s in chunk]).to(torch.float64)).to(torch.float32)
            if not conditioned:
                dem = torch.zeros_like(dem)  # the null condition seen under condition dropout
            res.model.eval()
            v = inpaint_batch(res.model, obs, m, dem, [s.prompt for s in chunk], cfg, res.sched)
            out.extend(v[:, 0].numpy())
        return out
    return run


def _with_adapter(base):
    def run(spec, res, samples, masks, seed):
        return adapt_outputs(spec, res, samples, masks, base(spec, res, samples, masks, seed))
    return run


def _fill_last_frame(spec, res, samples, masks, seed):
    out = []
    for s, o, m in zip(samples, _observed(samples, masks), masks):
        if s.previous is None:
            raise ConfigError(f"sample {s.id} has no previous frame")
        out.append(np.where(m, s.previous, o).astype(np.float32))
    return out


METHODS = {
    "nearest": _fill_each(fill_nearest),
    "harmonic": _fill_each(fill_harmonic),
    "autoencoder": _fill_autoencoder,
    "diffusion": _diffusion(True),
    "diffusion-uncond": _diffusion(False),
    "diffusion+adapter": _with_adapter(_diffusion(True)),
    "last-frame": _fill_last_frame,
}
LEARNED = {"diffusion", "diffusion-uncond", "diffusion+adapter"}


def adapt_outputs(spec, res, samples, masks, outputs) -> list[np.ndarray]:
    ex = res.ex or make_extractor()
    adapted = []
    for s, m, o in zip(samples, masks, outputs):
        ref = Raster([s.prompt.band], np.where(m, np.float32(DEFAULT_FILL), s.image)[None].astype(np.float32))
        gen = Raster([s.prompt.band], np.clip(o, 0.0, 1.0)[None].astype(np.float32))
        adapted.append(adapt(gen, ref, m, steps=spec.adapt_steps, step_size=spec.adapt_step_size,
                             ex=ex, lambda_style=spec.lambda_style, tol=spec.adapt_tol).data[0])
    return adapted


def mask_seed(seed: int, ratio: float, index: int) -> int:
    ss = np.random.SeedSequence([int(seed) & (2**32 - 1), int(round(ratio * 1000)), int(index)])
    return int(ss.generate_state(1)[0])


def make_masks(samples, ratio: float, seed: int) -> list[np.ndarray]:
    return [random_mask(s.image.shape, ratio, mask_seed(seed, ratio, i)).data for i, s in enumerate(samples)]


# --- running ----------------------------------------------------------------------

@dataclass
class TileRecord:
    method: str
    band: str
    ratio: float
    seed: int
    tile: str
    scope: str
    ssim: float
    psnr: float
    rmse: float
    mae: float
    perceptual: float
    n_pixels: int


@dataclass
class ExperimentResult:
    rows: list
    records: list = field(default_factory=list)
    csv_path: Path | None = None
    previews: list = field(default_factory=list)

    def pooled(self, method: str, ratio: float, metric: str = "rmse", scope: str = "masked") -> float:
        """Mean of a per-tile metric over every band, tile and seed of one cell."""
        vals = [getattr(r, metric) for r in self.records
                if r.method == method and math.isclose(r.ratio, ratio) and r.scope == scope]
        if not vals:
            raise KeyError(f"no records for {method} at ratio {ratio}")
        return float(np.mean(vals))


def _tile_metrics(pred, truth, mask, ex) -> dict:
    perc = perceptual_distance(pred, truth, ex)
    out = {}
    for scope in SCOPES:
        sel = mask if scope == "masked" else None
        err = rmse(pred, truth, sel)
        out[scope] = dict(ssim=ssim(pred, truth, sel), psnr=psnr_from_rmse(err), rmse=err,
                          mae=mae(pred, truth, sel), perceptual=perc,
                          n_pixels=int(mask.sum()) if sel is not None else int(mask.size))
    return out


def _fmt(v) -> str:
    return repr(float(v))


def _aggregate(spec, method, ratio, band, scope, recs) -> dict:
    row = {"method": method, "band": band, "missing_ratio": _fmt(ratio), "scope": scope,
           "adapter": spec.adapter, "error": ""}
    for m in METRICS:
        per_seed = [np.mean([getattr(r, m) for r in recs if r.seed == s]) for s in spec.seeds]
        row[m] = _fmt(np.mean([getattr(r, m) for r in recs]))
        row[f"{m}_std"] = _fmt(np.std(per_seed))
    row["n_pixels"] = str(sum(r.n_pixels for r in recs))
    row["n_tiles"] = str(len(recs))
    return row


def _error_row(spec, method, ratio, band, scope, message) -> dict:
    row = {k: "" for k in CSV_FIELDS}
    row.update(method=method, band=band, missing_ratio=_fmt(ratio), scope=scope,
               adapter=spec.adapter, error=message.replace("\n", " "))
    return row


def _load_resources(spec, train, res: Resources | None) -> Resources:
    res = res or Resources()
    if res.sched is None:
        res.sched = make_schedule()
    if res.ex is None:
        res.ex = make_extractor()
    if LEARNED & set(spec.methods) and res.model is None:
        if not spec.model:
            raise ConfigError("diffusion methods need a model checkpoint (spec.model)")
        if not Path(spec.model).exists():
            raise ConfigError(f"model checkpoint {spec.model} does not exist")
        res.model, _, _ = ckpt.load_model(spec.model)
    if "autoencoder" in spec.methods and res.ae is None:
        if spec.autoencoder and Path(spec.autoencoder).exists():
            res.ae = ckpt.load_autoencoder(spec.autoencoder)
        elif train:
            seed = spec.seeds[0]
            data = _stack([s.image for s in train])
            res.ae = train_autoencoder(data, AEConfig(epochs=spec.ae_epochs), seed)
            if spec.autoencoder:
                ckpt.save_autoencoder(res.ae, spec.autoencoder)
        else:
            raise ConfigError("autoencoder method needs a checkpoint or a training manifest")
    return res


def run_experiment(spec: ExperimentSpec, test: list | None = None, train: list | None = None,
                   resources: Resources | None = None, write: bool = True) -> ExperimentResult:
    """Mask, reconstruct, optionally adapt and evaluate every (method, ratio, band, seed) cell.

    A failing cell is recorded with an error tag and the run carries on.
    """
    spec = spec.with_env()
    if test is None or (train is None and spec.train_manifest):
        tr, te = load_split(spec.train_manifest, spec.test_manifest)
        test = te if test is None else test
        train = tr if train is None else train
    train = train or []
    if train:
        check_disjoint(train, test)
    test = [s for s in test if s.prompt.band in spec.bands]
    if not test:
        raise ConfigError("no test samples for the requested bands")
    res = _load_resources(spec, train, resources)
    out_dir = Path(spec.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)

    records, rows, previews = [], [], []
    for method in spec.methods:
        fill = METHODS[method]
        for ratio in spec.missing_ratios:
            cell, error = [], None
            try:
                for seed in spec.seeds:
                    masks = make_masks(test, ratio, seed)
                    preds = fill(spec, res, test, masks, seed)
                    if spec.adapter == "on" and method != "diffusion+adapter":
                        preds = adapt_outputs(spec, res, test, masks, preds)
                    for s, m, p in zip(test, masks, preds):
                        if not m.any():
                            continue
                        for scope, vals in _tile_metrics(p, s.image, m, res.ex).items():
                            cell.append(TileRecord(method, s.prompt.band, ratio, seed, s.id, scope, **vals))
                    if write and spec.previews and seed == spec.seeds[0]:
                        previews += _emit_previews(out_dir, method, ratio, test, masks, preds)
            except Exception as exc:  # noqa: BLE001 - isolated to the cell
                error = f"{type(exc).__name__}: {exc}"
            for band in spec.bands:
                for scope in SCOPES:
                    recs = [r for r in cell if r.band == band and r.scope == scope]
                    if error is not None:
                        rows.append(_error_row(spec, method, ratio, band, scope, error))
                    elif not recs:
                        rows.append(_error_row(spec, method, ratio, band, scope, "no masked tiles"))
                    else:
                        rows.append(_aggregate(spec, method, ratio, band, scope, recs))
            if error is None:
                records.extend(cell)
    csv_path = None
    if write:
        csv_path = out_dir / "results.csv"
        write_results(rows, csv_path)
        (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return ExperimentResult(rows, records, csv_path, previews)


def write_results(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _emit_previews(out_dir, method, ratio, samples, masks, preds) -> list:
    from satmaker.plotting import preview_panel

    errs = [rmse(p, s.image, m) if m.any() else math.nan for s, m, p in zip(samples, masks, preds)]
    if all(math.isnan(e) for e in errs):
        return []
    order = np.argsort(np.nan_to_num(errs, nan=np.inf))
    pdir = Path(out_dir) / "previews"
    pdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for tag, i in (("best", order[0]), ("worst", order[np.isfinite(errs).sum() - 1])):
        s, m = samples[i], masks[i]
        safe = method.replace("+", "_")
        path = pdir / f"{safe}_r{ratio:.2f}_{tag}.png"
        observed = np.where(m, np.nan, s.image)
        preview_panel({"observed": observed, "filled": preds[i], "truth": s.image, "dem": s.dem}, path,
                      title=f"{method} {ratio:.0%} {tag}: {s.id} rmse={errs[i]:.4f}")
        paths.append(path)
    return paths


# --- reports ----------------------------------------------------------------------

def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"method", "band", "missing_ratio", "scope"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"results CSV lacks columns {sorted(missing)}")
        return list(reader)


def _tag(row) -> str:
    return "NA[error]" if row.get("error") else "NA[missing]"


def results_table(rows: list, metric: str, band: str, scope: str) -> tuple[dict, list]:
    """Methods as rows, ratios as columns; cell text is copied from the CSV verbatim."""
    sel = [r for r in rows if r["band"] == band and r["scope"] == scope]
    methods = list(dict.fromkeys(r["method"] for r in sel))
    ratios = sorted({r["missing_ratio"] for r in rows}, key=float)
    table = {m: {} for m in methods}
    for r in sel:
        table[r["method"]][r["missing_ratio"]] = r[metric] if r.get(metric) and not r.get("error") else _tag(r)
    for m in methods:
        for q in ratios:
            table[m].setdefault(q, "NA[missing]")
    return table, ratios


def sweep_report(results_csv, out_dir, metrics=("psnr", "rmse")) -> dict:
    """Per-(metric, band, scope) tables and plots; every file derives from the CSV alone."""
    from satmaker.plotting import metric_vs_ratio

    rows = read_results(results_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    bands = list(dict.fromkeys(r["band"] for r in rows))
    scopes = list(dict.fromkeys(r["scope"] for r in rows))
    for metric in metrics:
        for band in bands:
            for scope in scopes:
                table, ratios = results_table(rows, metric, band, scope)
                if not table:
                    continue
                stem = f"{metric}_{band}_{scope}"
                tpath = out / f"{stem}.csv"
                with open(tpath, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["method", *ratios])
                    for m, cells in table.items():
                        w.writerow([m, *(cells[q] for q in ratios)])
                ppath = out / f"{stem}.png"
                metric_vs_ratio(table, ratios, metric, ppath, title=f"{band}, {scope} scope (per-tile mean)")
                written[stem] = (tpath, ppath, table)
    return written

