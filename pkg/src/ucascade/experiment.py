"""End-to-end experiment stages.

Each stage reads its prerequisites from ``cfg.output_dir``, writes its
artifacts there and records wall-clock time in ``manifest.json``. Every
random choice derives from ``cfg.seed`` via :func:`derive_seed` with a
stage-specific key, so a stage's output is a pure function of the config.
"""

import contextlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import bayes, metrics, pipeline
from .config import dump_config
from .errors import ConfigError, DataError, NumericalError
from .models import (DetectCNN, DetectNetConfig, SegNetConfig, SegUNet, load_checkpoint,
                     save_checkpoint)
from .numerics import ops
from .numerics.optim import OptimState, optimizer_step
from .numerics.tensor import derive_seed, make_rng
from .phantom import PhantomConfig, generate_phantom, read_volume, split_dataset, write_volume

log = logging.getLogger(__name__)

# seed-derivation keys, one per stochastic stage
K_PHANTOM, K_SPLIT, K_SEG_INIT, K_SEG_TRAIN, K_SEG_MC = 1, 2, 3, 4, 5
K_DET_INIT, K_DET_TRAIN, K_DET_MC = 6, 7, 8
VARIANTS = {"1ch": 1, "3ch": 3}
MODEL_ROWS = [
    ("baseline", "Baseline"),
    ("bayes_1ch", "Bayes. CNN"),
    ("fusion_3ch", "Bayes. CNN w/ Uncert. Fusion"),
    ("ensemble", "Bayes. Ensemble"),
]


def worker_count():
    raw = os.environ.get("UCASCADE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"UCASCADE_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("UCASCADE_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------- paths

class Layout:
    def __init__(self, root):
        self.root = os.fspath(root)
        self.data = os.path.join(self.root, "data")
        self.checkpoints = os.path.join(self.root, "checkpoints")
        self.maps = os.path.join(self.root, "maps")
        self.candidates = os.path.join(self.root, "candidates")
        self.report = os.path.join(self.root, "report")
        self.manifest = os.path.join(self.root, "manifest.json")
        self.split = os.path.join(self.data, "split.json")
        self.seg_ckpt = os.path.join(self.checkpoints, "seg.uckp")
        self.cand_npz = os.path.join(self.candidates, "candidates.npz")
        self.cand_csv = os.path.join(self.candidates, "candidates.csv")
        self.seg_stats = os.path.join(self.candidates, "seg_metrics.json")

    def volume(self, vid):
        return os.path.join(self.data, f"vol_{vid:04d}")

    def seg_map(self, vid):
        return os.path.join(self.maps, f"seg_{vid:04d}.npz")

    def detect_ckpt(self, variant):
        return os.path.join(self.checkpoints, f"detect_{variant}.uckp")

    def make(self, *dirs):
        for d in dirs:
            try:
                os.makedirs(d, exist_ok=True)
            except OSError as exc:
                raise ConfigError(f"output directory {d} is not writable: {exc}") from exc


def _load_manifest(lay):
    if os.path.exists(lay.manifest):
        with open(lay.manifest) as fh:
            return json.load(fh)
    return {"stages": {}}


@contextlib.contextmanager
def _stage(cfg, name, outputs):
    lay = Layout(cfg.output_dir)
    lay.make(lay.root)
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    yield lay
    man = _load_manifest(lay)
    man["config_hash"] = cfg.digest()
    man["stages"][name] = {"seconds": round(time.perf_counter() - t0, 3),
                           "outputs": [os.path.relpath(p, lay.root) for p in outputs()]}
    with open(lay.manifest, "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
    dump_config(cfg, os.path.join(lay.root, "config.yaml"))
    log.info("stage %s: done in %.1fs", name, man["stages"][name]["seconds"])


def phantom_config(cfg):
    p = cfg.phantom
    return PhantomConfig(shape=tuple(p.shape), nodules=tuple(p.nodules), nodule_radius=tuple(p.nodule_radius),
                         nodule_intensity=tuple(p.nodule_intensity), ellipticity=p.ellipticity,
                         vessels=tuple(p.vessels), vessel_radius=tuple(p.vessel_radius),
                         vessel_intensity=tuple(p.vessel_intensity), vessel_length=tuple(p.vessel_length),
                         background=p.background, noise_std=p.noise_std,
                         seed=derive_seed(cfg.seed, K_PHANTOM))


def seg_config(cfg):
    return SegNetConfig(input_size=cfg.phantom.shape[1], base_channels=cfg.seg.base_channels,
                        depth=cfg.seg.depth, dropout=cfg.seg.dropout)


def detect_config(cfg, variant):
    if variant not in VARIANTS:
        raise ConfigError(f"detector variant must be one of {sorted(VARIANTS)}, got {variant!r}")
    return DetectNetConfig(cube_edge=cfg.detect.cube_edge, in_channels=VARIANTS[variant],
                           hidden=cfg.detect.hidden, dropout=cfg.detect.dropout)


def read_split(lay):
    if not os.path.exists(lay.split):
        raise DataError(f"no dataset at {lay.data}; run 'generate' first")
    with open(lay.split) as fh:
        return json.load(fh)


# ------------------------------------------------------------------- generate

def cmd_generate(cfg):
    """Write the phantom volumes and the train/val/test split file."""
    n = cfg.phantom.n_volumes
    if n <= 0:
        raise DataError("empty dataset: phantom.n_volumes must be positive")
    pcfg = phantom_config(cfg)
    pcfg.validate()
    ids = list(range(n))
    written = []
    with _stage(cfg, "generate", lambda: written) as lay:
        lay.make(lay.data)
        for vid in ids:
            write_volume(lay.volume(vid), generate_phantom(pcfg, vid))
            written.append(lay.volume(vid) + ".vol")
        train, val, test = split_dataset(ids, cfg.split.ratios, derive_seed(cfg.seed, K_SPLIT))
        with open(lay.split, "w") as fh:
            json.dump({"ids": ids, "train": sorted(train), "val": sorted(val), "test": sorted(test)}, fh, indent=1)
        written.append(lay.split)
    return lay.split


# ------------------------------------------------------------------ seg train

def _pos_weight(labels, cap):
    n_pos = float(np.sum(labels))
    n_neg = float(labels.size - n_pos)
    if n_pos == 0:
        return 1.0
    w = n_neg / n_pos
    return min(w, cap) if cap and cap > 0 else w


def _weights(labels, pos_w):
    return np.where(labels > 0, pos_w, 1.0)


def _augment_slices(x, y, rng):
    """Random flips and transposes applied jointly to images and masks."""
    for i in range(x.shape[0]):
        k = int(rng.integers(8))
        if k & 1:
            x[i], y[i] = x[i][..., ::-1], y[i][..., ::-1]
        if k & 2:
            x[i], y[i] = x[i][..., ::-1, :], y[i][..., ::-1, :]
        if k & 4:
            x[i], y[i] = np.swapaxes(x[i], -1, -2), np.swapaxes(y[i], -1, -2)
    return x, y


def _patch_origin(mask, size, positive, rng):
    """Top-left corner of a ``size`` patch; positive picks keep a nodule voxel inside."""
    H, W = mask.shape
    if positive:
        ys, xs = np.nonzero(mask)
        i = int(rng.integers(len(ys)))
        y0 = int(rng.integers(max(0, ys[i] - size + 1), min(ys[i], H - size) + 1))
        x0 = int(rng.integers(max(0, xs[i] - size + 1), min(xs[i], W - size) + 1))
        return y0, x0
    return int(rng.integers(H - size + 1)), int(rng.integers(W - size + 1))


def _cosine_lr(base, epoch, epochs):
    return 0.5 * base * (1 + math.cos(math.pi * (epoch - 1) / epochs))


def seg_predict_eval(model, volume, batch=32):
    """Deterministic per-slice probabilities for a ``[D, H, W]`` volume."""
    return bayes.predict_eval(model, volume[:, None], batch)[:, 0]


def volume_dice(prob, mask, threshold=0.5):
    """Dice of the thresholded map; NaN for volumes without nodules."""
    if not np.any(mask):
        return float("nan")
    return metrics.dice(prob >= threshold, mask > 0)


def mean_dice(dices):
    vals = [d for d in dices if not math.isnan(d)]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_train_seg(cfg):
    """Train the U-Net; keeps the epoch with the best validation Dice."""
    outputs = []
    with _stage(cfg, "train-seg", lambda: outputs) as lay:
        return _train_seg(cfg, lay, outputs)


def _train_seg(cfg, lay, outputs):
    split = read_split(lay)
    s = cfg.seg
    train = [read_volume(lay.volume(v)) for v in split["train"]]
    val = [read_volume(lay.volume(v)) for v in split["val"]]
    images = np.stack([pv.volume for pv in train])
    masks = np.stack([pv.mask for pv in train]).astype(np.float32)
    n_vol, D = images.shape[:2]
    all_slices = [(v, z) for v in range(n_vol) for z in range(D)]
    pos_slices = [(v, z) for v, z in all_slices if masks[v, z].any()]

    model = SegUNet(seg_config(cfg), seed=derive_seed(cfg.seed, K_SEG_INIT))
    state = OptimState(lr=s.lr, kind=s.optimizer)
    rng = make_rng(derive_seed(cfg.seed, K_SEG_TRAIN))

    probe_idx = [all_slices[i] for i in make_rng(derive_seed(cfg.seed, K_SEG_TRAIN, 1)).choice(
        len(all_slices), size=min(32, len(all_slices)), replace=False)]
    if pos_slices:
        probe_idx[: len(probe_idx) // 2] = pos_slices[: len(probe_idx) // 2]
    probe_x = np.stack([images[v, z] for v, z in probe_idx])[:, None]
    probe_y = np.stack([masks[v, z] for v, z in probe_idx])[:, None]
    probe_w = _weights(probe_y, _pos_weight(probe_y, s.max_pos_weight))

    def probe_loss():
        with ops.inference():
            return ops.sigmoid_bce_loss(model.forward(probe_x, "eval"), probe_y, probe_w)[0]

    def val_dice():
        return mean_dice([volume_dice(seg_predict_eval(model, pv.volume), pv.mask) for pv in val])

    history = [{"epoch": 0, "train_loss": float("nan"), "probe_loss": probe_loss(),
                "val_dice": val_dice() if val else float("nan")}]
    best = (history[0]["val_dice"], 0, {k: v.copy() for k, v in model.named_params().items()})
    n_pos = int(round(s.positive_fraction * s.slices_per_epoch)) if pos_slices else 0
    size = s.patch if 0 < s.patch < min(images.shape[2:]) else 0
    for epoch in range(1, s.epochs + 1):
        if s.lr_schedule == "cosine":
            state.lr = _cosine_lr(s.lr, epoch, s.epochs)
        picks = []
        if n_pos:
            picks += [(*pos_slices[i], True) for i in rng.integers(len(pos_slices), size=n_pos)]
        picks += [(*all_slices[i], False) for i in rng.integers(len(all_slices), size=s.slices_per_epoch - n_pos)]
        picks = [picks[i] for i in rng.permutation(len(picks))]
        losses = []
        for b0 in range(0, len(picks), s.batch_size):
            chunk = picks[b0:b0 + s.batch_size]
            if size:
                corners = [_patch_origin(masks[v, z], size, pos, rng) for v, z, pos in chunk]
                x = np.stack([images[v, z, y0:y0 + size, x0:x0 + size]
                              for (v, z, _), (y0, x0) in zip(chunk, corners)])[:, None].copy()
                y = np.stack([masks[v, z, y0:y0 + size, x0:x0 + size]
                              for (v, z, _), (y0, x0) in zip(chunk, corners)])[:, None].copy()
            else:
                x = np.stack([images[v, z] for v, z, _ in chunk])[:, None].copy()
                y = np.stack([masks[v, z] for v, z, _ in chunk])[:, None].copy()
            x, y = _augment_slices(x, y, rng)
            x, y = np.ascontiguousarray(x), np.ascontiguousarray(y)
            w = _weights(y, _pos_weight(y, s.max_pos_weight))
            model.zero_grad()
            z = model.forward(x, "train", rng)
            loss, g = ops.sigmoid_bce_loss(z, y, w)
            model.backward(g)
            optimizer_step(model.named_params(), model.named_grads(), state)
            losses.append(loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "probe_loss": probe_loss(),
               "val_dice": val_dice() if val else float("nan")}
        if not math.isfinite(rec["probe_loss"]):
            raise NumericalError(f"segmentation training diverged at epoch {epoch}")
        history.append(rec)
        log.info("seg epoch %d: loss %.4f probe %.4f val dice %.3f", epoch, rec["train_loss"],
                 rec["probe_loss"], rec["val_dice"])
        score = rec["val_dice"] if val else -rec["probe_loss"]
        if not val or score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.named_params().items()})

    _, best_epoch, params = best
    model.load_params(params)
    lay.make(lay.checkpoints)
    meta = {"epoch": best_epoch, "seed": cfg.seed, "loss": history[best_epoch]["probe_loss"],
            "val_dice": history[best_epoch]["val_dice"], "history": history}
    save_checkpoint(model, lay.seg_ckpt, meta)
    outputs.append(lay.seg_ckpt)
    return model, history


# --------------------------------------------------------- candidate extraction

def seg_mc_volume(model, volume, cfg, vid):
    """MC mean/std maps for one volume; slice ``z`` uses stream key ``(vid, z)``."""
    mc = bayes.McConfig(cfg.mc.samples, derive_seed(cfg.seed, K_SEG_MC))
    D = volume.shape[0]
    maps = []
    for z in range(D):
        samples = bayes.mc_predict_many(model, volume[z][None, None], mc, keys=[(vid, z)], batch=64)[0]
        st = bayes.predictive_stats(samples[:, 0])
        maps.append((st.mean.astype(np.float32), st.std.astype(np.float32)))
    return pipeline.stack_slices(maps)


def _parallel_map(fn, items):
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        with threadpool_limits(1):
            return [fn(it) for it in items]
    with threadpool_limits(1), ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def cmd_extract_candidates(cfg):
    """MC segmentation of every volume, then candidates, labels and cubes."""
    lay = Layout(cfg.output_dir)
    split = read_split(lay)
    if not os.path.exists(lay.seg_ckpt):
        raise DataError("no segmentation checkpoint; run 'train-seg' first")
    model = load_checkpoint(lay.seg_ckpt, seg_config(cfg))
    p = cfg.pipeline
    which = {v: name for name in ("train", "val", "test") for v in split[name]}
    outputs = []
    with _stage(cfg, "extract-candidates", lambda: outputs):
        lay.make(lay.maps, lay.candidates)

        def one(vid):
            pv = read_volume(lay.volume(vid))
            mu, sd = seg_mc_volume(model, pv.volume, cfg, vid)
            np.savez(lay.seg_map(vid), mean=mu, std=sd)
            cands = pipeline.extract_candidates(mu, p.threshold, p.min_voxels, p.cube_edge)
            pipeline.label_candidates(cands, pv.truths)
            for c in cands:
                c.volume_id = vid
                c.image = pipeline.crop_cube(pv.volume, c.centroid, p.cube_edge)
                c.seg_mean = pipeline.crop_cube(mu, c.centroid, p.cube_edge)
                c.seg_std = pipeline.crop_cube(sd, c.centroid, p.cube_edge)
            return cands, pv.truths, volume_dice(mu, pv.mask, p.threshold)

        results = _parallel_map(one, split["ids"])
        per_split = {k: {"cands": [], "truths": [], "dice": []} for k in ("train", "val", "test")}
        allc = []
        for vid, (cands, truths, d) in zip(split["ids"], results):
            bucket = per_split[which[vid]]
            bucket["cands"].append(cands)
            bucket["truths"].append(truths)
            bucket["dice"].append(d)
            allc += cands
        stats = {}
        for name, b in per_split.items():
            if not b["truths"]:
                continue
            rec, prec = pipeline.seg_candidate_metrics(b["cands"], b["truths"])
            stats[name] = {"recall": rec, "precision": prec, "mean_dice": mean_dice(b["dice"]),
                           "n_candidates": sum(len(c) for c in b["cands"]),
                           "n_positive": sum(c.label for cs in b["cands"] for c in cs),
                           "n_truths": sum(len(t) for t in b["truths"])}
        with open(lay.seg_stats, "w") as fh:
            json.dump(stats, fh, indent=1, sort_keys=True)
        save_candidates(lay.cand_npz, allc, which)
        pipeline.write_candidate_table(lay.cand_csv, allc)
        outputs += [lay.cand_npz, lay.cand_csv, lay.seg_stats]
    return allc, stats


def save_candidates(path, cands, which):
    E = cands[0].image.shape[0] if cands else 0
    np.savez(path,
             volume_id=np.array([c.volume_id for c in cands], dtype=np.int64),
             split=np.array([which[c.volume_id] for c in cands], dtype="U5"),
             centroid=np.array([c.centroid for c in cands], dtype=np.int64).reshape(-1, 3),
             label=np.array([c.label for c in cands], dtype=np.int64),
             component_voxels=np.array([c.component_voxels for c in cands], dtype=np.int64),
             image=np.array([c.image for c in cands], dtype=np.float32).reshape(-1, E, E, E),
             seg_mean=np.array([c.seg_mean for c in cands], dtype=np.float32).reshape(-1, E, E, E),
             seg_std=np.array([c.seg_std for c in cands], dtype=np.float32).reshape(-1, E, E, E))


def load_candidates(lay):
    if not os.path.exists(lay.cand_npz):
        raise DataError("no candidates; run 'extract-candidates' first")
    with np.load(lay.cand_npz) as z:
        return {k: z[k] for k in z.files}


def detector_inputs(cands, variant, rows=None):
    rows = slice(None) if rows is None else rows
    if variant == "1ch":
        return cands["image"][rows][:, None]
    if variant == "3ch":
        return np.stack([cands["image"][rows], cands["seg_mean"][rows], cands["seg_std"][rows]], axis=1)
    raise ConfigError(f"unknown detector variant {variant!r}")


# ---------------------------------------------------------------- detect train

def _augment_cubes(x, rng):
    """Random per-axis flips plus an in-plane (y/x) transpose."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        k = int(rng.integers(16))
        c = x[i]
        for bit, ax in ((1, 1), (2, 2), (4, 3)):
            if k & bit:
                c = np.flip(c, axis=ax)
        if k & 8:
            c = np.swapaxes(c, 2, 3)
        out[i] = c
    return out


def cmd_train_detect(cfg, variant):
    """Train one detector variant; keeps the epoch with the lowest validation loss."""
    dcfg = detect_config(cfg, variant)
    outputs = []
    with _stage(cfg, f"train-detect-{variant}", lambda: outputs) as lay:
        return _train_detect(cfg, variant, dcfg, lay, outputs)


def _train_detect(cfg, variant, dcfg, lay, outputs):
    cands = load_candidates(lay)
    d = cfg.detect
    tr = np.nonzero(cands["split"] == "train")[0]
    va = np.nonzero(cands["split"] == "val")[0]
    y_tr = cands["label"][tr].astype(np.float32)
    if y_tr.sum() == 0 or y_tr.sum() == y_tr.size:
        raise DataError("training candidates must contain both classes")
    x_tr = detector_inputs(cands, variant, tr)
    x_va = detector_inputs(cands, variant, va)
    y_va = cands["label"][va].astype(np.float32)
    pos_w = _pos_weight(y_tr, 0)

    vkey = VARIANTS[variant]
    model = DetectCNN(dcfg, seed=derive_seed(cfg.seed, K_DET_INIT, vkey))
    state = OptimState(lr=d.lr, kind=d.optimizer)
    rng = make_rng(derive_seed(cfg.seed, K_DET_TRAIN, vkey))

    def eval_loss(x, y):
        if y.size == 0:
            return float("nan")
        z = bayes.predict_eval(model, x)
        p = np.clip(z, 1e-7, 1 - 1e-7)
        w = _weights(y, pos_w)
        return float(np.sum(w * -(y * np.log(p) + (1 - y) * np.log(1 - p))) / w.sum())

    history = [{"epoch": 0, "train_loss": eval_loss(x_tr, y_tr), "val_loss": eval_loss(x_va, y_va)}]
    use_val = y_va.size > 0
    best = (history[0]["val_loss"] if use_val else history[0]["train_loss"], 0,
            {k: v.copy() for k, v in model.named_params().items()})
    for epoch in range(1, d.epochs + 1):
        if d.lr_schedule == "cosine":
            state.lr = _cosine_lr(d.lr, epoch, d.epochs)
        perm = rng.permutation(tr.size)
        losses = []
        for b0 in range(0, perm.size, d.batch_size):
            idx = perm[b0:b0 + d.batch_size]
            x = x_tr[idx]
            if d.augment:
                x = _augment_cubes(x, rng)
            y = y_tr[idx]
            model.zero_grad()
            z = model.forward(x, "train", rng)
            loss, g = ops.sigmoid_bce_loss(z, y, _weights(y, pos_w))
            model.backward(g)
            optimizer_step(model.named_params(), model.named_grads(), state)
            losses.append(loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": eval_loss(x_va, y_va)}
        history.append(rec)
        log.info("detect %s epoch %d: loss %.4f val %.4f", variant, epoch, rec["train_loss"], rec["val_loss"])
        score = rec["val_loss"] if use_val else rec["train_loss"]
        if not math.isfinite(score):
            raise NumericalError(f"detector training diverged at epoch {epoch}")
        if score < best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.named_params().items()})

    _, best_epoch, params = best
    model.load_params(params)
    lay.make(lay.checkpoints)
    meta = {"epoch": best_epoch, "seed": cfg.seed, "loss": history[best_epoch]["val_loss"],
            "variant": variant, "pos_weight": pos_w, "history": history}
    save_checkpoint(model, lay.detect_ckpt(variant), meta)
    outputs.append(lay.detect_ckpt(variant))
    return model, history


# -------------------------------------------------------------------- evaluate

@dataclass
class EvalReport:
    alpha: float
    spearman_rho: float
    spearman_p: float
    rows: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def mc_detector_stats(model, x, samples, seed, keys):
    """Per-candidate MC mean and population std; candidate ``k`` uses stream key ``k``."""
    if x.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    stack = bayes.mc_predict_many(model, x, bayes.McConfig(samples, seed), keys=keys)
    st = bayes.predictive_stats(stack, axis=1)
    return st.mean, st.std


def detector_predictions(cfg, model_1ch, model_3ch, cands, rows):
    """MC statistics of both detectors plus the deterministic baseline."""
    keys = [int(i) for i in rows]
    out = {}
    for variant, model in (("1ch", model_1ch), ("3ch", model_3ch)):
        x = detector_inputs(cands, variant, rows)
        mean, std = mc_detector_stats(model, x, cfg.mc.samples, derive_seed(cfg.seed, K_DET_MC, VARIANTS[variant]), keys)
        out[variant] = (mean, std)
    out["baseline"] = bayes.predict_eval(model_1ch, detector_inputs(cands, "1ch", rows)) if len(keys) else np.zeros(0)
    return out


def assemble_report(labels_val, preds_val, labels_test, preds_test, grid_step=0.05, default_alpha=0.5):
    """Pick alpha on validation, score all four model rows on test.

    ``preds_*`` map ``"1ch"``/``"3ch"`` to ``(mean, std)`` and ``"baseline"``
    to eval-mode probabilities. Returns ``(EvalReport, per-candidate test
    columns)``.
    """
    m1v, m3v = preds_val["1ch"][0], preds_val["3ch"][0]
    val_ok = labels_val.size >= 3 and 0 < labels_val.sum() < labels_val.size
    if val_ok:
        alpha, _ = bayes.alpha_sweep(m1v, m3v, labels_val, bayes.alpha_grid(grid_step))
    else:
        alpha = default_alpha
    try:
        rho, p = metrics.spearman(m1v, m3v)
    except DataError:
        rho, p = float("nan"), float("nan")

    if labels_test.sum() == 0:
        raise DataError("test split has no positive candidates; cannot evaluate")
    if labels_test.sum() == labels_test.size:
        raise DataError("test split has no negative candidates; cannot evaluate")
    (m1, s1), (m3, s3) = preds_test["1ch"], preds_test["3ch"]
    ens = bayes.ensemble_combine(m1, m3, alpha)
    ens_sd = np.sqrt(bayes.ensemble_variance(s1 ** 2, s3 ** 2, alpha))
    cols = {"baseline": preds_test["baseline"], "bayes_1ch_mean": m1, "bayes_1ch_std": s1,
            "fusion_3ch_mean": m3, "fusion_3ch_std": s3, "ensemble_mean": ens, "ensemble_std": ens_sd}
    rows = {
        "baseline": metrics.score_model("baseline", preds_test["baseline"], labels_test),
        "bayes_1ch": metrics.score_model("bayes_1ch", m1, labels_test, s1),
        "fusion_3ch": metrics.score_model("fusion_3ch", m3, labels_test, s3),
        "ensemble": metrics.score_model("ensemble", ens, labels_test, ens_sd),
    }
    report = EvalReport(alpha=float(alpha), spearman_rho=float(rho), spearman_p=float(p), rows=rows)
    report.summary = {"alpha": float(alpha), "alpha_from_validation": bool(val_ok),
                      "spearman_rho_val": float(rho), "spearman_p_val": float(p),
                      "n_test": int(labels_test.size), "n_test_pos": int(labels_test.sum()),
                      "n_val": int(labels_val.size), "n_val_pos": int(labels_val.sum())}
    return report, cols


def cmd_evaluate(cfg):
    from . import report as report_io

    lay = Layout(cfg.output_dir)
    cands = load_candidates(lay)
    models = {}
    for variant in VARIANTS:
        path = lay.detect_ckpt(variant)
        if not os.path.exists(path):
            raise DataError(f"no {variant} detector checkpoint; run 'train-detect --variant {variant}' first")
        models[variant] = load_checkpoint(path, detect_config(cfg, variant))
    va = np.nonzero(cands["split"] == "val")[0]
    te = np.nonzero(cands["split"] == "test")[0]
    if te.size == 0:
        raise DataError("test split has no candidates")
    outputs = []
    with _stage(cfg, "evaluate", lambda: outputs):
        lay.make(lay.report)
        pv = detector_predictions(cfg, models["1ch"], models["3ch"], cands, va)
        pt = detector_predictions(cfg, models["1ch"], models["3ch"], cands, te)
        report, cols = assemble_report(cands["label"][va], pv, cands["label"][te], pt, cfg.ensemble.grid_step,
                                       cfg.ensemble.alpha)
        with open(lay.seg_stats) as fh:
            seg = json.load(fh)
        for name, st in seg.items():
            for k, v in st.items():
                report.summary[f"seg_{name}_{k}"] = v
        val_cols = {"baseline": pv["baseline"], "bayes_1ch_mean": pv["1ch"][0], "bayes_1ch_std": pv["1ch"][1],
                    "fusion_3ch_mean": pv["3ch"][0], "fusion_3ch_std": pv["3ch"][1]}
        val_cols["ensemble_mean"] = bayes.ensemble_combine(val_cols["bayes_1ch_mean"], val_cols["fusion_3ch_mean"],
                                                           report.alpha)
        val_cols["ensemble_std"] = np.sqrt(bayes.ensemble_variance(val_cols["bayes_1ch_std"] ** 2,
                                                                   val_cols["fusion_3ch_std"] ** 2, report.alpha))
        outputs += report_io.write_report(lay.report, report, cands, {"val": (va, val_cols), "test": (te, cols)})
    return report


def run_all(cfg):
    cmd_generate(cfg)
    cmd_train_seg(cfg)
    cmd_extract_candidates(cfg)
    cmd_train_detect(cfg, "1ch")
    cmd_train_detect(cfg, "3ch")
    return cmd_evaluate(cfg)
