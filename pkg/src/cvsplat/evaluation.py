"""Experimental protocol: three training regimes, three test splits, several seeds.

Also hosts the root-exponent ablation. Results are written as ``results.csv``
(regime, split, seed, psnr, ssim) plus a formatted ``summary.txt``.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import save_checkpoint
from .losses import psnr, ssim
from .rasterizer import render
from .scenegen import load_manifest
from .trainer import (
    AERIAL_VIEW,
    GROUND_VIEW,
    REGIMES,
    TrainConfig,
    TrainingSet,
    View,
    init_field,
    train,
    train_ensemble,
    write_trace,
)
from .uncertainty import CrossViewWeights, build_cross_view_weights, normalize_maps

log = logging.getLogger(__name__)

TEST_SPLITS = ("held-out", "shifted", "shifted-rotated")
SPLIT_TITLES = {"held-out": "Held-out", "shifted": "View(+0.1m)", "shifted-rotated": "View(+0.1m 5deg down)"}
REGIME_TITLES = {"ground": "ground only", "joint": "joint, equal weight", "uc": "joint, uncertainty weight"}
DEFAULT_SEEDS = (0, 1, 2)
ROOT_VALUES = (1, 2, 3, 4, 6, 8, 10)
# held-out PSNR gain of uncertainty weighting over equal weighting at full scale (two city scenes)
PUBLISHED_GAIN_DB = {"NYC": 0.66, "SF": 0.59}


@dataclass
class SceneData:
    ground: list          # [(id, camera, image)]
    aerial: list
    tests: dict           # split -> [(id, camera, image)]
    points: np.ndarray
    colors: np.ndarray
    background: tuple

    @classmethod
    def load(cls, manifest_path, splits=TEST_SPLITS):
        m = load_manifest(manifest_path)

        def views(name):
            return [(v.id, v.camera, v.image()) for v in m.split(name)]

        pts, cols = m.points()
        return cls(views("ground-train"), views("aerial-train"), {s: views(s) for s in splits}, pts, cols,
                   tuple(m.background))

    def training_set(self, regime, weights=None) -> TrainingSet:
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        views = [View(c, im, GROUND_VIEW, None, i) for i, c, im in self.ground]
        if regime == "ground":
            return TrainingSet(views)
        if regime == "uc":
            if weights is None:
                raise ValueError("the uncertainty-weighted regime needs aerial weight maps")
            missing = [i for i, _, _ in self.aerial if i not in weights]
            if missing:
                raise ValueError(f"no weight map for aerial views {missing[:5]}")
        for i, c, im in self.aerial:
            w = weights[i] if regime == "uc" else None
            views.append(View(c, im, AERIAL_VIEW, w, i))
        return TrainingSet(views)


def evaluate_field(field_, views, config: TrainConfig):
    """Mean PSNR and SSIM over (id, camera, image) triples, plus per-view rows."""
    bg = np.asarray(config.background, dtype=np.float32)
    per_view = []
    for vid, cam, img in views:
        out = render(field_, cam, bg, config.raster, n_threads=config.threads).color
        per_view.append((vid, psnr(out, img), ssim(out, img)))
    p = float(np.mean([r[1] for r in per_view]))
    s = float(np.mean([r[2] for r in per_view]))
    return p, s, per_view


@dataclass
class ResultRow:
    regime: str
    split: str
    seed: int
    psnr: float
    ssim: float


@dataclass
class ProtocolResult:
    rows: list = field(default_factory=list)

    def values(self, regime, split, metric="psnr"):
        return np.array([getattr(r, metric) for r in self.rows if r.regime == regime and r.split == split])

    def mean(self, regime, split, metric="psnr"):
        return float(self.values(regime, split, metric).mean())

    def per_seed(self, regime, split, metric="psnr"):
        return {r.seed: getattr(r, metric) for r in self.rows if r.regime == regime and r.split == split}

    @property
    def seeds(self):
        return sorted({r.seed for r in self.rows})

    @property
    def regimes(self):
        return [g for g in REGIMES if any(r.regime == g for r in self.rows)]

    def gain(self, better="uc", base="joint", split="held-out", metric="psnr"):
        """Per-seed differences better - base."""
        a, b = self.per_seed(better, split, metric), self.per_seed(base, split, metric)
        return {s: a[s] - b[s] for s in sorted(a) if s in b}

    def shift_drop(self, regime, to_split="shifted-rotated", metric="psnr"):
        """Mean (held-out - to_split) over seeds; smaller means more robust to the view change."""
        a, b = self.per_seed(regime, "held-out", metric), self.per_seed(regime, to_split, metric)
        return float(np.mean([a[s] - b[s] for s in a if s in b]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["regime", "split", "seed", "psnr", "ssim"])
            for r in self.rows:
                w.writerow([r.regime, r.split, r.seed, repr(r.psnr), repr(r.ssim)])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [ResultRow(d["regime"], d["split"], int(d["seed"]), float(d["psnr"]), float(d["ssim"]))
                    for d in csv.DictReader(fh)]
        return cls(rows)

    def summary(self):
        splits = [s for s in TEST_SPLITS if any(r.split == s for r in self.rows)]
        head = f"{'regime':<28}" + "".join(f"{SPLIT_TITLES[s]:>50}" for s in splits)
        sub = " " * 28 + "".join(f"{'PSNR':>22}{'SSIM':>28}" for _ in splits)
        lines = [f"seeds: {', '.join(map(str, self.seeds))}   (mean [min, max] over seeds)", "", head, sub]
        for g in self.regimes:
            cells = []
            for s in splits:
                for metric, fmt, width in (("psnr", "{:.2f}", 22), ("ssim", "{:.4f}", 28)):
                    v = self.values(g, s, metric)
                    text = fmt.format(v.mean())
                    if len(v) > 1:
                        text += f" [{fmt.format(v.min())}, {fmt.format(v.max())}]"
                    cells.append(text.rjust(width))
            lines.append(f"{REGIME_TITLES[g]:<28}" + "".join(cells))
        lines.append("")
        if "uc" in self.regimes and "joint" in self.regimes and "held-out" in splits:
            g = self.gain()
            lines.append("held-out PSNR gain, uncertainty over equal weight: "
                         + ", ".join(f"seed {s}: {d:+.3f}" for s, d in g.items())
                         + f"   mean {np.mean(list(g.values())):+.3f} dB")
            ref = ", ".join(f"{k} {v:+.2f}" for k, v in PUBLISHED_GAIN_DB.items())
            lines.append(f"published full-scale gain for reference: {ref} dB")
        if "shifted-rotated" in splits:
            drops = ", ".join(f"{REGIME_TITLES[g]} {self.shift_drop(g):.3f}" for g in self.regimes)
            lines.append(f"PSNR drop held-out -> shifted+rotated: {drops}")
        return "\n".join(lines) + "\n"


def _train_job(job):
    regime, seed, cfg, data, weights = job
    ts = data.training_set(regime, weights)
    field_, trace = train(init_field(data.points, data.colors, cfg), ts, cfg)
    scores = {s: evaluate_field(field_, data.tests[s], cfg)[:2] for s in data.tests}
    return regime, seed, field_, trace, scores


def _run_jobs(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def build_weights(data: SceneData, ensemble, config: TrainConfig, n_root=None, out_dir=None) -> CrossViewWeights:
    return build_cross_view_weights(
        ensemble, [c for _, c, _ in data.ground], [c for _, c, _ in data.aerial],
        n=config.root_n if n_root is None else n_root, background=config.background, settings=config.raster,
        occlusion_tol=config.occlusion_tol, ground_ids=[i for i, _, _ in data.ground],
        aerial_ids=[i for i, _, _ in data.aerial], out_dir=out_dir, n_threads=config.threads,
    )


def fit_ensemble(data: SceneData, config: TrainConfig, members=None, out_dir=None, workers=1):
    ts = data.training_set("ground")
    fields, traces = train_ensemble(data.points, data.colors, ts, config, members, workers=workers)
    if out_dir is not None:
        save_ensemble(out_dir, fields, traces)
    return fields


def save_ensemble(out_dir, fields, traces=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(fields):
        save_checkpoint(f, out / f"member_{k:02d}.gsuc")
        if traces is not None:
            write_trace(out / f"member_{k:02d}_trace.csv", traces[k])
    return out


def load_ensemble(ens_dir):
    from .gaussians import load_checkpoint

    paths = sorted(Path(ens_dir).glob("member_*.gsuc"))
    if len(paths) < 2:
        raise FileNotFoundError(f"{ens_dir}: expected at least 2 member_*.gsuc checkpoints, found {len(paths)}")
    return [load_checkpoint(p) for p in paths]


def run_protocol(manifest, config: TrainConfig = TrainConfig(), seeds=DEFAULT_SEEDS, regimes=REGIMES,
                 out_dir=None, ensemble=None, weights=None, workers=1) -> ProtocolResult:
    """Train every (regime, seed) pair on one scene and score it on every test split.

    The ensemble and its weight maps are built once, from ``config.seed``, and
    shared by all uncertainty-weighted runs.
    """
    data = manifest if isinstance(manifest, SceneData) else SceneData.load(manifest)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.txt")
    if "uc" in regimes and weights is None:
        if ensemble is None:
            log.info("training %d-member ensemble", config.ensemble_size)
            ensemble = fit_ensemble(data, config, out_dir=None if out is None else out / "ensemble", workers=workers)
        weights = build_weights(data, ensemble, config, out_dir=None if out is None else out / "weights")
    if isinstance(weights, CrossViewWeights):
        weights = weights.weight_arrays()
    jobs = [(g, s, config.updated(seed=s), data, weights if g == "uc" else None) for s in seeds for g in regimes]
    result = ProtocolResult()
    for regime, seed, field_, trace, scores in _run_jobs(_train_job, jobs, workers):
        for split in data.tests:
            p, s = scores[split]
            result.rows.append(ResultRow(regime, split, seed, p, s))
            log.info("%s seed %d %s: PSNR %.3f SSIM %.4f", regime, seed, split, p, s)
        if out is not None:
            save_checkpoint(field_, out / f"{regime}_seed{seed}.gsuc")
            write_trace(out / f"{regime}_seed{seed}_trace.csv", trace)
    if out is not None:
        result.write_csv(out / "results.csv")
        (out / "summary.txt").write_text(result.summary())
    return result


@dataclass
class AblationResult:
    rows: list            # (n, split, psnr, ssim, mean weight, fraction of nonzero weights)
    maps: dict            # n -> list of normalized aerial UncertaintyMaps

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "split", "psnr", "ssim", "mean_weight", "nonzero_weight"])
            for r in self.rows:
                w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:]])

    def summary(self):
        splits = list(dict.fromkeys(r[1] for r in self.rows))
        lines = [f"{'n':>4}" + "".join(f"{SPLIT_TITLES[s]:>26}" for s in splits) + f"{'mean weight':>14}"]
        for n in sorted(self.maps):
            cells = [f"{r[2]:.2f} / {r[3]:.4f}".rjust(26) for s in splits for r in self.rows if r[0] == n and r[1] == s]
            mw = next(r[4] for r in self.rows if r[0] == n)
            lines.append(f"{n:>4}" + "".join(cells) + f"{mw:>14.4f}")
        return "\n".join(lines) + "\n"


def run_n_ablation(manifest, config: TrainConfig = TrainConfig(), values=ROOT_VALUES, ensemble=None,
                   raw_maps=None, out_dir=None, workers=1) -> AblationResult:
    """Uncertainty-weighted training repeated for each root exponent n, all else fixed."""
    values = [int(v) for v in values]
    if not values or min(values) < 1:
        raise ValueError("root exponents must be integers >= 1")
    data = manifest if isinstance(manifest, SceneData) else SceneData.load(manifest)
    if raw_maps is None:
        if ensemble is None:
            ensemble = fit_ensemble(data, config, workers=workers)
        raw_maps = build_weights(data, ensemble, config).raw_aerial
    aerial_ids = [i for i, _, _ in data.aerial]
    maps = {n: normalize_maps(raw_maps, n) for n in values}
    jobs = [("uc", config.seed, config, data, {i: m.values for i, m in zip(aerial_ids, maps[n])}) for n in values]
    rows = []
    for n, (_, _, _, _, scores) in zip(values, _run_jobs(_train_job, jobs, workers)):
        allw = np.concatenate([m.values.ravel() for m in maps[n]])
        for split in data.tests:
            p, s = scores[split]
            rows.append((n, split, p, s, float(allw.mean()), float((allw > 0).mean())))
            log.info("n=%d %s: PSNR %.3f SSIM %.4f", n, split, p, s)
    result = AblationResult(rows, maps)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "ablation.csv")
        (out / "ablation.txt").write_text(result.summary())
    return result
